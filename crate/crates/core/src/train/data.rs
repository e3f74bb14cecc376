//! Seeded synthetic textures with labels, and a directory-backed dataset.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Image;

/// Number of orientation classes.
pub const CLS_CLASSES: usize = 2;
/// Number of per-pixel pattern classes.
pub const SEG_CLASSES: usize = 3;

/// One image with whatever labels its generator provides.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    /// 0 = horizontal stripes, 1 = vertical stripes.
    pub cls: Option<usize>,
    /// Per-pixel 0 = flat, 1 = horizontal stripes, 2 = vertical stripes.
    pub seg: Option<Vec<u8>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    /// Oriented gratings over a smooth background.
    Grating,
    /// Four rectangular regions of flat or striped fill.
    Regions,
    /// Either of the above with equal probability.
    Mixed,
}

impl std::str::FromStr for TextureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grating" => Ok(Self::Grating),
            "regions" => Ok(Self::Regions),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::config(format!("unknown texture kind '{s}' (grating|regions|mixed)"))),
        }
    }
}

fn colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)]
}

fn finish(size: usize, px: Vec<[f64; 3]>, rng: &mut ChaCha8Rng) -> Image {
    let mut data = Vec::with_capacity(size * size * 3);
    for p in px {
        for v in p {
            let n: f64 = rng.gen_range(-0.02..0.02);
            data.push(((v + n).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Image::new(size, size, 3, data).expect("consistent extents")
}

struct Stripes {
    period: f64,
    phase: f64,
    amp: f64,
    tint: [f64; 3],
}

impl Stripes {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            period: rng.gen_range(3.0..9.0),
            phase: rng.gen_range(0.0..2.0 * PI),
            amp: rng.gen_range(0.08..0.3),
            tint: colour(rng),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * (2.0 * PI * t / self.period + self.phase).sin()
    }
}

/// A sinusoidal grating, horizontal (label 0) or vertical (label 1), on a
/// linear colour ramp.
pub fn grating(rng: &mut ChaCha8Rng, size: usize) -> Sample {
    let label = rng.gen_range(0..CLS_CLASSES);
    let (c0, c1) = (colour(rng), colour(rng));
    let (gx, gy): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let s = Stripes::random(rng);
    let n = size as f64;
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / n - 0.5, y as f64 / n - 0.5);
            let t = (0.5 + gx * u + gy * v).clamp(0.0, 1.0);
            let w = s.at(if label == 0 { y as f64 } else { x as f64 });
            px.push(std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t + w * (s.tint[c] - 0.5) * 2.0));
        }
    }
    Sample {
        image: finish(size, px, rng),
        cls: Some(label),
        seg: None,
    }
}

/// Four regions split at a random point; each region is flat, horizontally
/// striped or vertically striped.
pub fn regions(rng: &mut ChaCha8Rng, size: usize) -> Sample {
    let lo = size / 4;
    let cx = rng.gen_range(lo..=size - lo);
    let cy = rng.gen_range(lo..=size - lo);
    let fills: Vec<(u8, [f64; 3], Stripes)> = (0..4)
        .map(|_| (rng.gen_range(0..SEG_CLASSES as u8), colour(rng), Stripes::random(rng)))
        .collect();
    let mut px = Vec::with_capacity(size * size);
    let mut seg = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r = (y >= cy) as usize * 2 + (x >= cx) as usize;
            let (class, base, s) = &fills[r];
            let w = match class {
                0 => 0.0,
                1 => s.at(y as f64) * 1.5,
                _ => s.at(x as f64) * 1.5,
            };
            px.push(std::array::from_fn(|c| base[c] + w));
            seg.push(*class);
        }
    }
    Sample {
        image: finish(size, px, rng),
        cls: None,
        seg: Some(seg),
    }
}

pub fn texture(rng: &mut ChaCha8Rng, kind: TextureKind, size: usize) -> Sample {
    match kind {
        TextureKind::Grating => grating(rng, size),
        TextureKind::Regions => regions(rng, size),
        TextureKind::Mixed => {
            if rng.gen_bool(0.5) {
                grating(rng, size)
            } else {
                regions(rng, size)
            }
        }
    }
}

/// Deterministic list of `n` samples.
pub fn texture_set(seed: u64, kind: TextureKind, size: usize, n: usize) -> Vec<Sample> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| texture(&mut rng, kind, size)).collect()
}

/// Image as a `[H, W, 3]` tensor in `[0, 1]`.
pub fn sample_tensor(s: &Sample) -> Tensor<f32> {
    s.image.to_tensor()
}

/// Name of the label file inside a dataset directory.
pub const LABELS_FILE: &str = "labels.txt";

fn seg_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.seg.pgm"))
}

/// Writes `samples` as `img0000.ppm ...` plus `labels.txt` (classification)
/// and `*.seg.pgm` label maps (segmentation).
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut labels = String::new();
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("img{i:04}");
        s.image.save(dir.join(format!("{stem}.ppm")))?;
        if let Some(c) = s.cls {
            labels.push_str(&format!("{stem} {c}\n"));
        }
        if let Some(seg) = &s.seg {
            Image::new(s.image.width, s.image.height, 1, seg.clone())?.save(seg_path(dir, &stem))?;
        }
    }
    if !labels.is_empty() {
        fs::write(dir.join(LABELS_FILE), labels)?;
    }
    Ok(())
}

/// An image file with its labels.
#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub sample: Sample,
}

/// Reads every `*.ppm` in `dir` (sorted by name) with any labels found.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<Entry>> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::config(format!("no .ppm images in {}", dir.display())));
    }
    let mut cls = std::collections::HashMap::new();
    let lp = dir.join(LABELS_FILE);
    if lp.exists() {
        for (n, line) in fs::read_to_string(&lp)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(stem), Some(label), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::format(format!("{}:{}: expected '<name> <class>'", lp.display(), n + 1)));
            };
            let label: usize = label
                .parse()
                .map_err(|_| Error::format(format!("{}:{}: bad class '{label}'", lp.display(), n + 1)))?;
            cls.insert(stem.to_string(), label);
        }
    }
    let mut out = Vec::with_capacity(names.len());
    for file in names {
        let stem = file.trim_end_matches(".ppm").to_string();
        let image = Image::load(dir.join(&file))?;
        let sp = seg_path(dir, &stem);
        let seg = if sp.exists() {
            let m = Image::load(&sp)?;
            if m.channels != 1 || m.width != image.width || m.height != image.height {
                return Err(Error::format(format!("{} does not match its image", sp.display())));
            }
            Some(m.data)
        } else {
            None
        };
        out.push(Entry {
            sample: Sample {
                image,
                cls: cls.get(&stem).copied(),
                seg,
            },
            name: stem,
        });
    }
    Ok(out)
}

/// Source of training crops.
pub enum DataSource {
    Synthetic(TextureKind),
    /// Random crops from a fixed list of images.
    Files(Vec<Sample>),
}

impl DataSource {
    pub fn from_spec(spec: &str) -> Result<Self> {
        match spec {
            "synthetic" | "mixed" => Ok(Self::Synthetic(TextureKind::Mixed)),
            "grating" | "regions" => Ok(Self::Synthetic(spec.parse()?)),
            dir => Ok(Self::Files(read_dataset(dir)?.into_iter().map(|e| e.sample).collect())),
        }
    }

    /// A `size × size` training sample; label maps are cropped alongside.
    pub fn draw(&self, rng: &mut ChaCha8Rng, size: usize) -> Result<Sample> {
        match self {
            Self::Synthetic(kind) => Ok(texture(rng, *kind, size)),
            Self::Files(list) => {
                let s = &list[rng.gen_range(0..list.len())];
                let (w, h) = (s.image.width, s.image.height);
                if w < size || h < size {
                    return Err(Error::config(format!("dataset image {w}x{h} smaller than crop {size}")));
                }
                let x0 = rng.gen_range(0..=w - size);
                let y0 = rng.gen_range(0..=h - size);
                let c = s.image.channels;
                let mut data = Vec::with_capacity(size * size * c);
                let mut seg = s.seg.as_ref().map(|_| Vec::with_capacity(size * size));
                for y in y0..y0 + size {
                    let row = (y * w + x0) * c;
                    data.extend_from_slice(&s.image.data[row..row + size * c]);
                    if let (Some(dst), Some(src)) = (seg.as_mut(), s.seg.as_ref()) {
                        dst.extend_from_slice(&src[y * w + x0..y * w + x0 + size]);
                    }
                }
                Ok(Sample {
                    image: Image::new(size, size, c, data)?,
                    cls: s.cls,
                    seg,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generators_are_seeded() {
        let a = texture_set(3, TextureKind::Mixed, 32, 4);
        let b = texture_set(3, TextureKind::Mixed, 32, 4);
        for (a, b) in a.iter().zip(&b) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.cls, b.cls);
            assert_eq!(a.seg, b.seg);
        }
    }

    #[test]
    fn labels_are_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = grating(&mut rng, 16);
            assert!(g.cls.unwrap() < CLS_CLASSES);
            let r = regions(&mut rng, 16);
            let seg = r.seg.unwrap();
            assert_eq!(seg.len(), 256);
            assert!(seg.iter().all(|&c| (c as usize) < SEG_CLASSES));
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = texture_set(5, TextureKind::Grating, 16, 2);
        set.extend(texture_set(6, TextureKind::Regions, 16, 2));
        write_dataset(dir.path(), &set).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        for (e, s) in back.iter().zip(&set) {
            assert_eq!(e.sample.image, s.image);
            assert_eq!(e.sample.cls, s.cls);
            assert_eq!(e.sample.seg, s.seg);
        }
    }

    #[test]
    fn file_crops_keep_labels_aligned() {
        let set = texture_set(9, TextureKind::Regions, 32, 1);
        let src = DataSource::Files(set.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = src.draw(&mut rng, 16).unwrap();
        assert_eq!(c.image.width, 16);
        assert_eq!(c.seg.unwrap().len(), 256);
    }
}
