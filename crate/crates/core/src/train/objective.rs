//! Full training objectives of both stages.

use rand_chacha::ChaCha8Rng;

use super::data::Sample;
use super::losses::{distortion_d, gan_losses, ratio_loss, Discriminator, LossWeights, PerceptualProxy};
use super::task_model::TaskModel;
use crate::autodiff::{Graph, ParameterStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{estimate_rate, quantize, y_likelihood, Codec, Masking, Quant, StageRouting, Task};
use crate::routing::{MaskGrad, StageMask, BIAS_LEVELS};

/// Surrogates used for the non-differentiable steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Estimators {
    /// Quantiser feeding the rate model.
    pub rate: Quant,
    /// Quantiser feeding the synthesis transforms.
    pub synthesis: Quant,
    pub mask: MaskGrad,
}

impl Estimators {
    /// Noise for the rate, rounding with identity gradient for synthesis,
    /// hard masks with straight-through gradients.
    pub const TRAIN: Self = Self {
        rate: Quant::Noise,
        synthesis: Quant::RoundSte,
        mask: MaskGrad::StraightThrough,
    };
    /// Smooth everywhere, for finite-difference checks.
    pub const SMOOTH: Self = Self {
        rate: Quant::Noise,
        synthesis: Quant::Identity,
        mask: MaskGrad::Soft,
    };
}

/// Shared pieces of both objectives.
pub struct Objective<'a, T: Real> {
    pub codec: &'a Codec,
    pub weights: &'a LossWeights,
    pub proxy: &'a PerceptualProxy<T>,
    pub disc: Discriminator,
}

/// Scalar values of the individual terms (unweighted).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Terms {
    pub rate: f64,
    pub distortion: f64,
    pub perceptual: f64,
    pub ratio: f64,
    pub generator: f64,
    pub discriminator: f64,
    pub task: f64,
    pub total: f64,
}

pub struct Stage1Output {
    pub loss: Var,
    /// Discriminator loss over detached inputs, when the GAN term is on.
    pub disc_loss: Option<Var>,
    pub x_hat: Var,
    pub terms: Terms,
}

pub struct Stage2Output {
    pub loss: Var,
    pub x_hat: Var,
    pub terms: Terms,
}

fn soft_masks(stages: &[StageRouting]) -> Result<Vec<Var>> {
    stages
        .iter()
        .map(|s| match &s.mask {
            StageMask::Soft(v) => Ok(*v),
            StageMask::Hard(_) => Err(Error::Invariant("training masks must live on the tape".into())),
        })
        .collect()
}

fn weighted_sum<T: Real>(g: &Graph<T>, parts: &[(f64, Var)]) -> Result<Var> {
    let mut total = g.scalar(T::zero());
    for &(w, v) in parts {
        if w != 0.0 {
            total = g.add(total, g.scale(v, T::of(w)))?;
        }
    }
    Ok(total)
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn new(codec: &'a Codec, weights: &'a LossWeights, proxy: &'a PerceptualProxy<T>) -> Self {
        Self {
            codec,
            weights,
            proxy,
            disc: Discriminator {
                latent_channels: codec.config.latent_channels(),
            },
        }
    }

    /// Generator-side loss at 0-based quality `level`:
    /// `λ_r·rate + d + λ_perc·perc + λ_ratio·ratio (+ λ_G·L_G)`.
    #[allow(clippy::too_many_arguments)]
    pub fn stage1(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        x: &Tensor<T>,
        level: usize,
        gan: bool,
        est: Estimators,
        rng: &mut ChaCha8Rng,
    ) -> Result<Stage1Output> {
        let w = self.weights;
        let lambda_r = w.rate_for(level)?;
        let q = (level + 1) as f64;
        let codec = self.codec;
        let (hh, ww, _) = x.hwc()?;
        let xv = g.constant(x.clone());
        let a = codec.encode(
            g,
            store,
            xv,
            q,
            &mut Masking::Train {
                rng: &mut *rng,
                grad: est.mask,
                level,
            },
            None,
        )?;
        let z = codec.hyper_analysis(g, store, a.y)?;
        let z_tilde = quantize(g, z, est.rate, rng)?;
        let z_hat = quantize(g, z, est.synthesis, rng)?;
        let (mu, sigma) = codec.hyper_synthesis(g, store, z_hat)?;
        let y_tilde = quantize(g, a.y, est.rate, rng)?;
        let pz = codec.z_likelihood(g, store, z_tilde)?;
        let py = y_likelihood(g, y_tilde, mu, sigma)?;
        let rate = estimate_rate(g, &[pz, py], hh * ww)?;

        let y_hat = quantize(g, a.y, est.synthesis, rng)?;
        let syn = codec.decode(g, store, y_hat, q, 0.0, Task::Mse, &mut Masking::Infer, None)?;
        let x_hat = syn.x;
        let dist = distortion_d(g, xv, x_hat)?;
        let perc = self.proxy.distance(g, xv, x_hat)?;
        let ratio = ratio_loss(g, &soft_masks(&a.stages)?, codec.schedule.ratio_from_quality(q)?)?;

        let mut parts = vec![(lambda_r, rate), (1.0, dist), (w.perceptual, perc), (w.ratio, ratio)];
        let mut terms = Terms {
            rate: g.item(rate).f64(),
            distortion: g.item(dist).f64(),
            perceptual: g.item(perc).f64(),
            ratio: g.item(ratio).f64(),
            ..Terms::default()
        };
        let disc_loss = if gan {
            let (lg, ld) = gan_losses(g, store, &self.disc, y_hat, a.y, xv, x_hat)?;
            parts.push((w.gan, lg));
            terms.generator = g.item(lg).f64();
            terms.discriminator = g.item(ld).f64();
            Some(ld)
        } else {
            None
        };
        let loss = weighted_sum(g, &parts)?;
        terms.total = g.item(loss).f64();
        Ok(Stage1Output {
            loss,
            disc_loss,
            x_hat,
            terms,
        })
    }

    /// Quantised latent and its model rate from the frozen analysis side.
    pub fn frozen_analysis(&self, store: &ParameterStore<T>, x: &Tensor<T>, q: f64) -> Result<(Tensor<T>, f64)> {
        let g = Graph::inference();
        let (hh, ww, _) = x.hwc()?;
        let codec = self.codec;
        let a = codec.encode(&g, store, g.constant(x.clone()), q, &mut Masking::Infer, None)?;
        let z_hat = g.round(codec.hyper_analysis(&g, store, a.y)?);
        let (mu, sigma) = codec.hyper_synthesis(&g, store, z_hat)?;
        let y_hat = g.round(a.y);
        let pz = codec.z_likelihood(&g, store, z_hat)?;
        let py = y_likelihood(&g, y_hat, mu, sigma)?;
        let rate = g.item(estimate_rate(&g, &[pz, py], hh * ww)?).f64();
        Ok(((*g.value(y_hat)).clone(), rate))
    }

    /// Side-path objective at quality level `q_level` and α index
    /// `alpha_level` (α = index / 7):
    /// `λ_r·rate + λ_task·L_task + λ_ratio·ratio`.
    #[allow(clippy::too_many_arguments)]
    pub fn stage2(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        sample: &Sample,
        q_level: usize,
        alpha_level: usize,
        task: Task,
        est: Estimators,
        rng: &mut ChaCha8Rng,
    ) -> Result<Stage2Output> {
        let codec = self.codec;
        if !codec.is_task_registered(store, task) {
            return Err(Error::config(format!("task {task} has no side path registered")));
        }
        if alpha_level >= BIAS_LEVELS {
            return Err(Error::domain(format!("alpha level {alpha_level} outside 0..{BIAS_LEVELS}")));
        }
        let w = self.weights;
        let lambda_r = w.rate_for(q_level)?;
        let q = (q_level + 1) as f64;
        let alpha = alpha_level as f64 / (BIAS_LEVELS - 1) as f64;
        let x: Tensor<T> = sample.image.to_tensor();
        let (y_hat, rate) = self.frozen_analysis(store, &x, q)?;
        let xv = g.constant(x);
        let syn = codec.decode(
            g,
            store,
            g.constant(y_hat),
            q,
            alpha,
            task,
            &mut Masking::Train {
                rng,
                grad: est.mask,
                level: alpha_level,
            },
            None,
        )?;
        let x_hat = syn.x;
        let ratio = ratio_loss(g, &soft_masks(&syn.stages)?, 1.0 - alpha)?;
        let dist = distortion_d(g, xv, x_hat)?;
        let mut terms = Terms {
            rate,
            distortion: g.item(dist).f64(),
            ratio: g.item(ratio).f64(),
            ..Terms::default()
        };
        let task_loss = match task {
            Task::Mse => dist,
            Task::Cls | Task::Seg => {
                let model = TaskModel::new(task)?;
                if !model.is_registered(store) {
                    return Err(Error::config(format!("no frozen {task} model in the store")));
                }
                let clamped = g.clamp(x_hat, T::zero(), T::one());
                let ce = model.loss(g, store, clamped, sample)?;
                let perc = self.proxy.distance(g, xv, x_hat)?;
                terms.perceptual = g.item(perc).f64();
                terms.task = g.item(ce).f64();
                weighted_sum(g, &[(1.0, ce), (1.0, dist), (w.perceptual, perc)])?
            }
        };
        let rate_c = g.scalar(T::of(rate));
        let loss = weighted_sum(g, &[(lambda_r, rate_c), (w.task, task_loss), (w.ratio, ratio)])?;
        terms.total = g.item(loss).f64();
        Ok(Stage2Output { loss, x_hat, terms })
    }
}
