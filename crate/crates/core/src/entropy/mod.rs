//! Bit-exact entropy coding of the quantised latents and the `.mpa`
//! container.

mod cdf;
mod coder;
mod container;
mod stream;

pub use cdf::{build_gaussian_cdf, build_logistic_cdf, CdfTable, PRECISION_BITS, TOTAL};
pub use coder::{range_decode, range_encode, RangeDecoder, RangeEncoder, FLUSH_BYTES};
pub use container::{quality_from_fixed, quality_to_fixed, Container, HEADER_BYTES, MAGIC, VERSION};
pub use stream::{compress, decode_latents, decompress, Compressed, Decompressed, Latents};
