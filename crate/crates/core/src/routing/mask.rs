//! Importance masks: top-k binarisation at inference and Gumbel-Sigmoid
//! sampling with a straight-through gradient during training.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Binary `H×W` routing map; `true` sends the position to the main path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImportanceMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ImportanceMask {
    pub fn filled(height: usize, width: usize, on: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![on; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim(format!(
                "mask of {} bits for {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Raster indices of main-path positions, ascending.
    pub fn ones(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Raster indices of side-path positions, ascending.
    pub fn zeros(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.height, self.width, 1],
            self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask extents")
    }

    /// 8-bit grey levels: 255 for main path, 0 for side path.
    pub fn to_gray(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }
}

/// Number of main-path positions for ratio `rho` over `n` positions.
pub fn target_count(rho: f64, n: usize) -> usize {
    ((rho * n as f64).round() as usize).min(n)
}

/// Marks the `round(ρ·H·W)` highest scores; equal scores are ordered by
/// ascending raster index. Because the ranking does not depend on `ρ`,
/// masks for increasing `ρ` are nested.
pub fn binarize_mask_infer<T: Real>(scores: &Tensor<T>, rho: f64) -> Result<ImportanceMask> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::domain(format!("ratio {rho} outside [0, 1]")));
    }
    let (h, w, c) = scores.hwc()?;
    if c != 1 {
        return Err(Error::dim(format!("score map must have 1 channel, got {c}")));
    }
    let n = h * w;
    let k = target_count(rho, n);
    let mut bits = vec![false; n];
    if k == n {
        bits.fill(true);
    } else if k > 0 {
        for i in ranking(scores.data()).into_iter().take(k) {
            bits[i] = true;
        }
    }
    ImportanceMask::from_bits(h, w, bits)
}

/// Positions sorted by descending score, ties by ascending index.
pub fn ranking<T: Real>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .f64()
            .total_cmp(&scores[a].f64())
            .then(a.cmp(&b))
    });
    order
}

/// Standard logistic noise `ln U − ln(1 − U)`.
pub fn logistic_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            u.ln() - (-u).ln_1p()
        })
        .collect()
}

/// How a training-time mask passes gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskGrad {
    /// Hard 0/1 forward, soft-sigmoid gradient backward.
    StraightThrough,
    /// Soft sigmoid forward and backward; used for finite-difference checks.
    Soft,
}

/// Gumbel-Sigmoid sample of `u′ + b[level]` with threshold `tau` and unit
/// temperature. `bias` is the per-level bias table node.
pub fn sample_mask_train<T: Real, R: Rng>(
    g: &Graph<T>,
    scores: Var,
    bias: Var,
    level: usize,
    tau: f64,
    grad: MaskGrad,
    rng: &mut R,
) -> Result<Var> {
    let levels = g.value(bias).len();
    if level >= levels {
        return Err(Error::domain(format!("level index {level} outside 0..{levels}")));
    }
    let shape = g.shape(scores);
    let noise = logistic_noise(rng, shape.iter().product());
    let noise = g.constant(Tensor::new(shape, noise.into_iter().map(T::of).collect())?);
    let b = g.slice_channels(bias, level, level + 1)?;
    let logits = g.add(g.add_channels(scores, b)?, noise)?;
    Ok(match grad {
        MaskGrad::StraightThrough => g.threshold_ste(logits, T::of(tau)),
        MaskGrad::Soft => g.sigmoid(logits),
    })
}

/// The mask consumed by every block of a stage.
#[derive(Clone, Debug)]
pub enum StageMask {
    /// Inference: exact partition of positions.
    Hard(Arc<ImportanceMask>),
    /// Training: per-position weights on the tape (`[H, W, 1]`).
    Soft(Var),
}
