//! Carry-propagating range coder with 16-bit frequency tables.

use super::cdf::{CdfTable, PRECISION_BITS, TOTAL};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
/// Bytes emitted by [`RangeEncoder::finish`] beyond the coded payload.
pub const FLUSH_BYTES: usize = 5;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes the interval `[start, start + freq)` of `2¹⁶`.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= TOTAL);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes `symbol` under `table`, escaping to a raw 32-bit value when it
    /// lies outside the table.
    pub fn encode_symbol(&mut self, table: &CdfTable, symbol: i32) {
        match table.slot(symbol) {
            Some(i) => {
                let (s, f) = table.range(i);
                self.encode(s, f);
            }
            None => {
                let (s, f) = table.range(table.escape_index());
                self.encode(s, f);
                let raw = symbol as u32;
                self.encode(raw >> 16, 1);
                self.encode(raw & 0xFFFF, 1);
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..FLUSH_BYTES {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    symbols: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < FLUSH_BYTES {
            return Err(Error::Decode {
                symbol: 0,
                byte: data.len(),
                reason: format!("stream shorter than {FLUSH_BYTES} bytes"),
            });
        }
        if data[0] != 0 {
            return Err(Error::Decode {
                symbol: 0,
                byte: 0,
                reason: "leading byte must be zero".into(),
            });
        }
        let code = data[1..FLUSH_BYTES].iter().fold(0u32, |c, &b| (c << 8) | b as u32);
        Ok(Self {
            data,
            pos: FLUSH_BYTES,
            code,
            range: u32::MAX,
            symbols: 0,
        })
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Decode {
            symbol: self.symbols,
            byte: self.pos,
            reason: reason.into(),
        }
    }

    fn target(&mut self) -> Result<(u32, u32)> {
        let r = self.range >> PRECISION_BITS;
        let v = self.code / r;
        if v >= TOTAL {
            return Err(self.err("code value outside the coding interval"));
        }
        Ok((r, v))
    }

    fn consume(&mut self, r: u32, start: u32, freq: u32) -> Result<()> {
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            let b = *self.data.get(self.pos).ok_or_else(|| self.err("unexpected end of stream"))?;
            self.pos += 1;
            self.code = (self.code << 8) | b as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    fn decode_raw16(&mut self) -> Result<u32> {
        let (r, v) = self.target()?;
        self.consume(r, v, 1)?;
        Ok(v)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32> {
        let (r, v) = self.target()?;
        let i = table.find(v);
        let (start, freq) = table.range(i);
        self.consume(r, start, freq)?;
        let s = if i == table.escape_index() {
            let hi = self.decode_raw16()?;
            let lo = self.decode_raw16()?;
            let s = ((hi << 16) | lo) as i32;
            if table.slot(s).is_some() {
                return Err(self.err("escaped value lies inside the table"));
            }
            s
        } else {
            table.min_symbol() + i as i32
        };
        self.symbols += 1;
        Ok(s)
    }

    /// True once every byte has been consumed.
    pub fn is_exhausted(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Codes a sequence with one table per symbol.
pub fn range_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::dim(format!("{} symbols for {} tables", symbols.len(), tables.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode_symbol(t, s);
    }
    Ok(enc.finish())
}

/// Inverse of [`range_encode`].
pub fn range_decode(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let out = tables.iter().map(|t| dec.decode_symbol(t)).collect::<Result<Vec<_>>>()?;
    if !dec.is_exhausted() {
        return Err(dec.err("trailing bytes after the last symbol"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::cdf::build_gaussian_cdf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_stream_is_flush_only() {
        let bytes = range_encode(&[], &[]).unwrap();
        assert_eq!(bytes.len(), FLUSH_BYTES);
        assert!(range_decode(&bytes, &[]).unwrap().is_empty());
    }

    #[test]
    fn random_tables_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tables: Vec<CdfTable> = (0..10_000)
            .map(|_| build_gaussian_cdf(rng.gen_range(-20.0..20.0), rng.gen_range(0.11..30.0)).unwrap())
            .collect();
        let symbols: Vec<i32> = tables
            .iter()
            .map(|t| {
                if rng.gen_bool(0.01) {
                    rng.gen_range(-100_000..100_000)
                } else {
                    rng.gen_range(t.min_symbol()..=t.max_symbol())
                }
            })
            .collect();
        let refs: Vec<&CdfTable> = tables.iter().collect();
        let bytes = range_encode(&symbols, &refs).unwrap();
        assert_eq!(bytes, range_encode(&symbols, &refs).unwrap());
        assert_eq!(range_decode(&bytes, &refs).unwrap(), symbols);
    }

    #[test]
    fn uniform_bytes_cost_eight_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = CdfTable::uniform(0, 256).unwrap();
        let symbols: Vec<i32> = (0..10_000).map(|_| rng.gen_range(0..256)).collect();
        let refs = vec![&t; symbols.len()];
        let bytes = range_encode(&symbols, &refs).unwrap();
        let excess = (bytes.len() as f64 - 10_000.0).abs() / 10_000.0;
        assert!(excess < 0.01, "{}", bytes.len());
        assert_eq!(range_decode(&bytes, &refs).unwrap(), symbols);
    }

    #[test]
    fn truncated_stream_reports_position() {
        let t = build_gaussian_cdf(0.0, 3.0).unwrap();
        let symbols: Vec<i32> = (0..500).map(|i| (i % 7) - 3).collect();
        let refs = vec![&t; symbols.len()];
        let bytes = range_encode(&symbols, &refs).unwrap();
        match range_decode(&bytes[..bytes.len() / 2], &refs) {
            Err(Error::Decode { symbol, byte, .. }) => assert!(symbol > 0 && byte > 0),
            other => panic!("expected decode error, got {other:?}"),
        }
    }
}
