//! Loss terms: scaled MSE, mask-ratio penalty, conditional GAN losses and a
//! fixed random-feature perceptual distance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParameterStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::model::DOWNSCALE;

/// Rate weight per quality level, lowest quality first.
pub const RATE_WEIGHTS: [f64; 8] = [18.0, 9.32, 4.83, 2.5, 1.3, 0.67, 0.35, 0.18];

/// Bound applied to discriminator outputs before taking logs.
pub const D_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub rate: Vec<f64>,
    pub gan: f64,
    pub perceptual: f64,
    pub task: f64,
    pub ratio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rate: RATE_WEIGHTS.to_vec(),
            gan: 2.56,
            perceptual: 4.26,
            task: 1.0,
            ratio: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.rate.is_empty() || self.rate.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::config("rate weights must be positive"));
        }
        if self.rate.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::config("rate weights must decrease with quality"));
        }
        if [self.gan, self.perceptual, self.task, self.ratio].iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// Rate weight of 0-based quality level `level`.
    pub fn rate_for(&self, level: usize) -> Result<f64> {
        self.rate
            .get(level)
            .copied()
            .ok_or_else(|| Error::domain(format!("quality level {level} outside 0..{}", self.rate.len())))
    }
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

/// `0.01 · mean((255x − 255x̂)²)`.
pub fn distortion_d<T: Real>(g: &Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    same_shape(g, x, x_hat, "distortion")?;
    let d = g.mean(g.square(g.sub(x, x_hat)?));
    Ok(g.scale(d, T::of(0.01 * 255.0 * 255.0)))
}

/// `(1/S) Σ_s (ρ − mean(M_s))²` over per-stage mask tensors.
pub fn ratio_loss<T: Real>(g: &Graph<T>, masks: &[Var], rho: f64) -> Result<Var> {
    if masks.is_empty() {
        return Err(Error::domain("ratio loss needs at least one stage"));
    }
    let mut total: Option<Var> = None;
    for &m in masks {
        let dev = g.square(g.add_scalar(g.scale(g.mean(m), T::of(-1.0)), T::of(rho)));
        total = Some(match total {
            None => dev,
            Some(t) => g.add(t, dev)?,
        });
    }
    Ok(g.scale(total.expect("non-empty"), T::of(1.0 / masks.len() as f64)))
}

fn neg_log_mean<T: Real>(g: &Graph<T>, p: Var) -> Var {
    let p = g.clamp(p, T::of(D_CLAMP), T::of(1.0 - D_CLAMP));
    g.scale(g.mean(g.ln(p)), T::of(-1.0))
}

/// `E[−log D(fake)]`.
pub fn generator_loss<T: Real>(g: &Graph<T>, d_fake: Var) -> Var {
    neg_log_mean(g, d_fake)
}

/// `E[−log(1 − D(fake))] + E[−log D(real)]`.
pub fn discriminator_loss<T: Real>(g: &Graph<T>, d_fake: Var, d_real: Var) -> Result<Var> {
    let one_minus = g.add_scalar(g.scale(d_fake, T::of(-1.0)), T::one());
    g.add(neg_log_mean(g, one_minus), neg_log_mean(g, d_real))
}

/// Conditional patch discriminator. The condition (a latent at 1/16
/// resolution) is projected to a few channels, upsampled and stacked on the
/// image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Discriminator {
    pub latent_channels: usize,
}

impl Discriminator {
    pub const PREFIX: &'static str = "disc.";
    const COND: usize = 4;
    const WIDTHS: [usize; 2] = [16, 32];

    pub fn is_param(name: &str) -> bool {
        name.starts_with(Self::PREFIX)
    }

    pub fn is_registered<T: Real>(store: &ParameterStore<T>) -> bool {
        store.contains("disc.out.w")
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let cl = self.latent_channels;
        let [w1, w2] = Self::WIDTHS;
        let cin = 3 + Self::COND;
        store.insert("disc.cond.w", init::uniform(rng, &[cl, Self::COND], cl), true)?;
        store.insert("disc.cond.b", init::zeros(&[Self::COND]), true)?;
        store.insert("disc.c1.w", init::uniform(rng, &[3, 3, cin, w1], 9 * cin), true)?;
        store.insert("disc.c1.b", init::zeros(&[w1]), true)?;
        store.insert("disc.c2.w", init::uniform(rng, &[3, 3, w1, w2], 9 * w1), true)?;
        store.insert("disc.c2.b", init::zeros(&[w2]), true)?;
        store.insert("disc.out.w", init::uniform(rng, &[w2, 1], w2), true)?;
        store.insert("disc.out.b", init::zeros(&[1]), true)?;
        Ok(())
    }

    /// Per-patch probabilities `[H/4, W/4, 1]` that `image` is real given `cond`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParameterStore<T>, cond: Var, image: Var) -> Result<Var> {
        let (cs, is) = (g.shape(cond), g.shape(image));
        if cs.len() != 3 || is.len() != 3 || cs[0] * DOWNSCALE != is[0] || cs[1] * DOWNSCALE != is[1] {
            return Err(Error::dim(format!("discriminator condition {cs:?} does not match image {is:?}")));
        }
        let p = |n: &str| g.named(store, &format!("disc.{n}"));
        let c = g.linear(cond, p("cond.w")?, Some(p("cond.b")?))?;
        let c = g.upsample_nearest(c, DOWNSCALE)?;
        let h = g.concat_channels(image, c)?;
        let h = g.gelu(g.conv2d(h, p("c1.w")?, Some(p("c1.b")?), 2)?);
        let h = g.gelu(g.conv2d(h, p("c2.w")?, Some(p("c2.b")?), 2)?);
        Ok(g.sigmoid(g.linear(h, p("out.w")?, Some(p("out.b")?))?))
    }
}

/// Generator and discriminator losses of one pair. The generator side sees
/// the decoded image with live gradients and a detached condition; the
/// discriminator side sees only detached values, with the unquantised latent
/// conditioning the real pair.
#[allow(clippy::too_many_arguments)]
pub fn gan_losses<T: Real>(
    g: &Graph<T>,
    store: &ParameterStore<T>,
    d: &Discriminator,
    y_hat: Var,
    y: Var,
    x: Var,
    x_hat: Var,
) -> Result<(Var, Var)> {
    same_shape(g, x, x_hat, "gan")?;
    let cond_fake = g.detach(y_hat);
    let lg = generator_loss(g, d.forward(g, store, cond_fake, x_hat)?);
    let fake = d.forward(g, store, cond_fake, g.detach(x_hat))?;
    let real = d.forward(g, store, g.detach(y), g.detach(x))?;
    Ok((lg, discriminator_loss(g, fake, real)?))
}

/// Fixed, seeded three-layer convolutional feature extractor.
#[derive(Clone, Debug)]
pub struct PerceptualProxy<T: Real> {
    layers: Vec<(Tensor<T>, Tensor<T>, usize)>,
}

impl<T: Real> PerceptualProxy<T> {
    pub const SEED: u64 = 0x5eed_f00d;

    pub fn new() -> Self {
        Self::with_seed(Self::SEED)
    }

    pub fn with_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = [(3, 8, 1), (8, 16, 2), (16, 16, 2)]
            .into_iter()
            .map(|(cin, cout, s)| {
                let w = init::uniform(&mut rng, &[3, 3, cin, cout], 9 * cin);
                let b = init::uniform(&mut rng, &[cout], 9 * cin);
                (w, b, s)
            })
            .collect();
        Self { layers }
    }

    fn features(&self, g: &Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b, s) in &self.layers {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            h = g.gelu(g.conv2d(h, w, Some(b), *s)?);
            out.push(h);
        }
        Ok(out)
    }

    /// Mean over layers of the mean squared feature difference.
    pub fn distance(&self, g: &Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
        same_shape(g, x, x_hat, "perceptual proxy")?;
        let (fa, fb) = (self.features(g, x)?, self.features(g, x_hat)?);
        let mut total: Option<Var> = None;
        for (a, b) in fa.into_iter().zip(fb) {
            let d = g.mean(g.square(g.sub(a, b)?));
            total = Some(match total {
                None => d,
                Some(t) => g.add(t, d)?,
            });
        }
        Ok(g.scale(total.expect("three layers"), T::of(1.0 / self.layers.len() as f64)))
    }
}

impl<T: Real> Default for PerceptualProxy<T> {
    fn default() -> Self {
        Self::new()
    }
}
