//! `.mpa` container: fixed little-endian header followed by the hyper-latent
//! and latent segments.

use crate::autodiff::ByteCursor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MPA1";
pub const VERSION: u8 = 1;
/// magic + version + quality + width + height + two segment lengths
pub const HEADER_BYTES: usize = 4 + 1 + 2 + 4 + 4 + 4 + 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    /// Quality in 8.8 fixed point.
    pub quality: u16,
    pub width: u32,
    pub height: u32,
    pub z_bytes: Vec<u8>,
    pub y_bytes: Vec<u8>,
}

/// Nearest 8.8 fixed-point value of `q`.
pub fn quality_to_fixed(q: f64) -> Result<u16> {
    let v = (q * 256.0).round();
    if !(0.0..=u16::MAX as f64).contains(&v) {
        return Err(Error::domain(format!("quality {q} not representable")));
    }
    Ok(v as u16)
}

pub fn quality_from_fixed(v: u16) -> f64 {
    v as f64 / 256.0
}

impl Container {
    pub fn q(&self) -> f64 {
        quality_from_fixed(self.quality)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let len32 = |n: usize| u32::try_from(n).map_err(|_| Error::format("segment longer than 4 GiB"));
        let mut out = Vec::with_capacity(HEADER_BYTES + self.z_bytes.len() + self.y_bytes.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.quality.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&len32(self.z_bytes.len())?.to_le_bytes());
        out.extend_from_slice(&self.z_bytes);
        out.extend_from_slice(&len32(self.y_bytes.len())?.to_le_bytes());
        out.extend_from_slice(&self.y_bytes);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = ByteCursor::new(bytes);
        if c.take(4)? != MAGIC {
            return Err(Error::format("not an MPA1 stream (bad magic)"));
        }
        let version = c.u8()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported stream version {version}")));
        }
        let quality = c.u16()?;
        let width = c.u32()?;
        let height = c.u32()?;
        let zl = c.u32()? as usize;
        let z_bytes = c.take(zl)?.to_vec();
        let yl = c.u32()? as usize;
        let y_bytes = c.take(yl)?.to_vec();
        if !c.is_done() {
            return Err(Error::format("trailing bytes after the latent segment"));
        }
        if width == 0 || height == 0 {
            return Err(Error::format("zero image extent"));
        }
        Ok(Self {
            quality,
            width,
            height,
            z_bytes,
            y_bytes,
        })
    }
}
