//! Discretised probability tables with 16-bit precision.

use crate::error::{Error, Result};
use crate::model::SIGMA_MIN;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;

/// Largest half-width of a table around its centre.
const MAX_HALF_WIDTH: i64 = 1 << 12;
/// Tail mass left outside a table, below `2⁻¹⁶`.
const TAIL: f64 = 1.0 / (1u64 << 17) as f64;

/// Cumulative frequencies over symbols `[min, min + n)` followed by one
/// escape symbol standing for everything outside that range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    min: i32,
    /// `n + 2` entries: `cdf[0] = 0`, `cdf[n + 1] = TOTAL`.
    cdf: Vec<u32>,
}

impl CdfTable {
    /// Quantises a probability mass function (with the tail mass as the last
    /// entry) to frequencies summing to `2¹⁶`, each at least 1.
    pub fn from_pmf(min: i32, pmf: &[f64]) -> Result<Self> {
        let n = pmf.len();
        if n < 2 || n as u32 >= TOTAL {
            return Err(Error::Invariant(format!("table of {n} symbols")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Invariant("probabilities must be finite and non-negative".into()));
        }
        let mass: f64 = pmf.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::Invariant("empty probability mass".into()));
        }
        let budget = (TOTAL - n as u32) as f64;
        let mut freq: Vec<u32> = pmf.iter().map(|p| 1 + (p / mass * budget).floor() as u32).collect();
        let sum: u32 = freq.iter().sum();
        // hand the rounding remainder to the most probable symbol
        let top = (0..n).fold(0, |b, i| if freq[i] > freq[b] { i } else { b });
        freq[top] += TOTAL - sum;
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        Ok(Self { min, cdf })
    }

    /// Uniform table over `[min, min + n)` with a minimal escape.
    pub fn uniform(min: i32, n: usize) -> Result<Self> {
        let mut pmf = vec![1.0; n];
        pmf.push(0.0);
        Self::from_pmf(min, &pmf)
    }

    pub fn min_symbol(&self) -> i32 {
        self.min
    }

    /// Number of in-range symbols (the escape excluded).
    pub fn len(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_symbol(&self) -> i32 {
        self.min + self.len() as i32 - 1
    }

    pub fn escape_index(&self) -> usize {
        self.len()
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    /// `(start, frequency)` of slot `i` (the escape is slot `len()`).
    pub fn range(&self, i: usize) -> (u32, u32) {
        (self.cdf[i], self.cdf[i + 1] - self.cdf[i])
    }

    pub fn frequency(&self, symbol: i32) -> Option<u32> {
        self.slot(symbol).map(|i| self.range(i).1)
    }

    /// Slot of an in-range symbol.
    pub fn slot(&self, symbol: i32) -> Option<usize> {
        let i = symbol as i64 - self.min as i64;
        (0..self.len() as i64).contains(&i).then_some(i as usize)
    }

    /// Slot whose interval contains the target value `v < 2¹⁶`.
    pub fn find(&self, v: u32) -> usize {
        self.cdf.partition_point(|&c| c <= v) - 1
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Table for an integer-binned `N(μ, σ²)`, centred on `⌊μ⌋`.
pub fn build_gaussian_cdf(mu: f64, sigma: f64) -> Result<CdfTable> {
    if !(sigma >= SIGMA_MIN * (1.0 - 1e-6)) || !mu.is_finite() || !sigma.is_finite() {
        return Err(Error::Invariant(format!("gaussian table needs sigma >= {SIGMA_MIN}, got {sigma}")));
    }
    // 2·Φ(−4.42) < 2⁻¹⁶ ; one extra bin covers the offset of ⌊μ⌋
    let half = ((4.5 * sigma).ceil() as i64 + 1).min(MAX_HALF_WIDTH);
    build(mu, half, |k| {
        normal_cdf((k as f64 + 0.5 - mu) / sigma) - normal_cdf((k as f64 - 0.5 - mu) / sigma)
    })
}

/// Table for an integer-binned logistic with location `loc` and `scale`.
pub fn build_logistic_cdf(loc: f64, scale: f64) -> Result<CdfTable> {
    if !(scale > 0.0) || !scale.is_finite() || !loc.is_finite() {
        return Err(Error::Invariant(format!("logistic table needs a positive scale, got {scale}")));
    }
    let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
    let half = ((scale * (2.0 / TAIL).ln()).ceil() as i64 + 1).min(MAX_HALF_WIDTH);
    build(loc, half, |k| sig((k as f64 + 0.5 - loc) / scale) - sig((k as f64 - 0.5 - loc) / scale))
}

fn build(center: f64, half: i64, mass: impl Fn(i64) -> f64) -> Result<CdfTable> {
    let c = center.floor() as i64;
    let (lo, hi) = (c - half, c + half);
    let mut pmf: Vec<f64> = (lo..=hi).map(|k| mass(k).max(0.0)).collect();
    let tail = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
    pmf.push(tail);
    let min = i32::try_from(lo).map_err(|_| Error::Invariant(format!("table origin {lo} out of range")))?;
    CdfTable::from_pmf(min, &pmf)
}
