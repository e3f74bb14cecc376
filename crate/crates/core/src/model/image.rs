//! Binary PPM (P6) / PGM (P5) I/O and edge-replicating padding.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// 8-bit interleaved image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::dim(format!(
                "{} bytes for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// `[H, W, C]` tensor with values `/255`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&b| T::of(b as f64 / 255.0)).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data).expect("extents")
    }

    /// Quantises a `[H, W, C]` tensor in `[0, 1]` to 8 bits (clamped, rounded).
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (h, w, c) = t.hwc()?;
        let data = t
            .data()
            .iter()
            .map(|&v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(w, h, c, data)
    }

    pub fn crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height {
            return Err(Error::dim("crop larger than image"));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in 0..height {
            let start = y * self.width * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Self::new(width, height, c, data)
    }

    /// Pads right and bottom by repeating the last column and row until both
    /// extents are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in 0..h {
            let sy = y.min(self.height - 1);
            for x in 0..w {
                let sx = x.min(self.width - 1);
                let i = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[i..i + c]);
            }
        }
        Self {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }

    pub fn write_pnm<W: Write>(&self, mut w: W) -> Result<()> {
        let magic = match self.channels {
            3 => "P6",
            1 => "P5",
            c => return Err(Error::format(format!("cannot write {c}-channel PNM"))),
        };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_pnm<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        parse_pnm(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_pnm(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        parse_pnm(&std::fs::read(path)?)
    }
}

fn parse_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PNM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("bad PNM header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::format(format!("unsupported PNM magic {m:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad PNM field {s:?}")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(Error::format(format!("only 8-bit PNM supported, maxval {maxval}")));
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::format("PNM extents overflow"))?;
    if width == 0 || height == 0 {
        return Err(Error::format("empty PNM"));
    }
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::format("truncated PNM raster"))?;
    Image::new(width, height, channels, raster.to_vec())
}
