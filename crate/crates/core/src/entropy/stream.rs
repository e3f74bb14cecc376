//! Image ⇄ container: analysis, quantisation and entropy coding of both
//! latents, and the inverse.

use super::cdf::{build_gaussian_cdf, build_logistic_cdf, CdfTable};
use super::coder::{RangeDecoder, RangeEncoder};
use super::container::{quality_from_fixed, quality_to_fixed, Container};
use crate::autodiff::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{estimate_rate, y_likelihood, Codec, Image, Masking, Task, DOWNSCALE};
use crate::routing::{ImportanceMask, PathCounters};

/// Result of [`compress`].
#[derive(Clone, Debug)]
pub struct Compressed {
    pub bytes: Vec<u8>,
    /// Model rate of both latents, bits per source pixel.
    pub bpp_estimated: f64,
    /// Container size, bits per source pixel.
    pub bpp_actual: f64,
    pub y_hat: Tensor<f32>,
    pub z_hat: Tensor<f32>,
}

/// Result of [`decompress`].
#[derive(Clone, Debug)]
pub struct Decompressed {
    /// Reconstruction cropped to the source extent.
    pub image: Image,
    /// Clamped reconstruction at the padded extent.
    pub x_hat: Tensor<f32>,
    pub quality: f64,
    /// Decoder routing masks, shallowest stage first.
    pub masks: Vec<ImportanceMask>,
    pub y_hat: Tensor<f32>,
    pub z_hat: Tensor<f32>,
}

/// Latents recovered from a container without running the synthesis transform.
#[derive(Clone, Debug)]
pub struct Latents {
    pub container: Container,
    pub y_hat: Tensor<f32>,
    pub z_hat: Tensor<f32>,
}

fn z_tables(g: &Graph<f32>, store: &ParameterStore<f32>) -> Result<Vec<CdfTable>> {
    let loc = g.value(g.named(store, "hyper.prior.loc")?);
    let ls = g.value(g.named(store, "hyper.prior.log_scale")?);
    loc.data()
        .iter()
        .zip(ls.data())
        .map(|(&l, &s)| build_logistic_cdf(l as f64, (s as f64).exp()))
        .collect()
}

fn y_tables(g: &Graph<f32>, mu: Var, sigma: Var) -> Result<Vec<CdfTable>> {
    let (m, s) = (g.value(mu), g.value(sigma));
    m.data()
        .iter()
        .zip(s.data())
        .map(|(&m, &s)| build_gaussian_cdf(m as f64, s as f64))
        .collect()
}

fn to_symbols(t: &Tensor<f32>) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.is_finite() && v.abs() < 1e9 {
                Ok(v as i32)
            } else {
                Err(Error::Numeric(format!("latent value {v} cannot be coded")))
            }
        })
        .collect()
}

/// Encodes an image at quality `q` (stored with 1/256 resolution; the
/// stored value is the one used for encoding).
pub fn compress(codec: &Codec, store: &ParameterStore<f32>, image: &Image, q: f64) -> Result<Compressed> {
    if image.channels != 3 {
        return Err(Error::format("expected an RGB image"));
    }
    let qmax = codec.config.levels as f64;
    if !(1.0..=qmax).contains(&q) {
        return Err(Error::domain(format!("quality {q} outside [1, {qmax}]")));
    }
    let quality = quality_to_fixed(q)?;
    let q = quality_from_fixed(quality);
    let padded = image.pad_to_multiple(DOWNSCALE);
    let g = Graph::inference();
    let x = g.constant(padded.to_tensor());
    let a = codec.encode(&g, store, x, q, &mut Masking::Infer, None)?;
    let z = codec.hyper_analysis(&g, store, a.y)?;
    let z_hat = g.round(z);
    let (mu, sigma) = codec.hyper_synthesis(&g, store, z_hat)?;
    let y_hat = g.round(a.y);

    let pixels = image.width * image.height;
    let pz = codec.z_likelihood(&g, store, z_hat)?;
    let py = y_likelihood(&g, y_hat, mu, sigma)?;
    let bpp_estimated = g.item(estimate_rate(&g, &[pz, py], pixels)?) as f64;

    let zt = z_tables(&g, store)?;
    let zv = g.value(z_hat);
    let mut enc = RangeEncoder::new();
    for (i, s) in to_symbols(&zv)?.into_iter().enumerate() {
        enc.encode_symbol(&zt[i % zt.len()], s);
    }
    let z_bytes = enc.finish();

    let yt = y_tables(&g, mu, sigma)?;
    let yv = g.value(y_hat);
    let mut enc = RangeEncoder::new();
    for (t, s) in yt.iter().zip(to_symbols(&yv)?) {
        enc.encode_symbol(t, s);
    }
    let y_bytes = enc.finish();

    let container = Container {
        quality,
        width: image.width as u32,
        height: image.height as u32,
        z_bytes,
        y_bytes,
    };
    let bytes = container.to_bytes()?;
    Ok(Compressed {
        bpp_actual: bytes.len() as f64 * 8.0 / pixels as f64,
        bytes,
        bpp_estimated,
        y_hat: (*yv).clone(),
        z_hat: (*zv).clone(),
    })
}

fn decode_segment(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<f32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(tables.len());
    for t in tables {
        out.push(dec.decode_symbol(t)? as f32);
    }
    if !dec.is_exhausted() {
        return Err(Error::Decode {
            symbol: tables.len(),
            byte: bytes.len(),
            reason: "trailing bytes in segment".into(),
        });
    }
    Ok(out)
}

fn latent_dims(c: &Container) -> (usize, usize) {
    let ext = |v: u32| (v as usize).div_ceil(DOWNSCALE);
    (ext(c.height), ext(c.width))
}

fn decode_on(codec: &Codec, store: &ParameterStore<f32>, g: &Graph<f32>, container: Container) -> Result<(Latents, Var)> {
    let qmax = codec.config.levels as f64;
    if !(1.0..=qmax).contains(&container.q()) {
        return Err(Error::format(format!("stream quality {} outside [1, {qmax}]", container.q())));
    }
    let (h, w) = latent_dims(&container);
    if h * w > (1 << 20) {
        return Err(Error::format("image extent too large"));
    }
    let hc = codec.config.hyper;
    let zt = z_tables(g, store)?;
    let z_refs: Vec<&CdfTable> = (0..h * w * hc).map(|i| &zt[i % hc]).collect();
    let z = Tensor::new(vec![h, w, hc], decode_segment(&container.z_bytes, &z_refs)?)?;
    let z_hat = g.constant(z.clone());
    let (mu, sigma) = codec.hyper_synthesis(g, store, z_hat)?;
    let yt = y_tables(g, mu, sigma)?;
    let y_refs: Vec<&CdfTable> = yt.iter().collect();
    let y = Tensor::new(g.shape(mu), decode_segment(&container.y_bytes, &y_refs)?)?;
    let y_var = g.constant(y.clone());
    Ok((
        Latents {
            container,
            y_hat: y,
            z_hat: z,
        },
        y_var,
    ))
}

/// Entropy-decodes both latents.
pub fn decode_latents(codec: &Codec, store: &ParameterStore<f32>, bytes: &[u8]) -> Result<Latents> {
    let container = Container::from_bytes(bytes)?;
    let g = Graph::inference();
    Ok(decode_on(codec, store, &g, container)?.0)
}

/// Full decode under decoder-side controls `alpha` and `task`.
pub fn decompress(
    codec: &Codec,
    store: &ParameterStore<f32>,
    bytes: &[u8],
    alpha: f64,
    task: Task,
    counters: Option<&PathCounters>,
) -> Result<Decompressed> {
    let container = Container::from_bytes(bytes)?;
    let g = Graph::inference();
    let q = container.q();
    let (lat, y_hat) = decode_on(codec, store, &g, container)?;
    let syn = codec.decode(&g, store, y_hat, q, alpha, task, &mut Masking::Infer, counters)?;
    let x_hat = g.value(syn.x).map(|v| v.clamp(0.0, 1.0));
    let padded = Image::from_tensor(&x_hat)?;
    let image = padded.crop(lat.container.width as usize, lat.container.height as usize)?;
    let masks = syn
        .stages
        .iter()
        .rev()
        .filter_map(|r| r.hard().cloned())
        .collect();
    Ok(Decompressed {
        image,
        x_hat,
        quality: q,
        masks,
        y_hat: lat.y_hat,
        z_hat: lat.z_hat,
    })
}
