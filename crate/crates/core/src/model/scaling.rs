//! Per-quality channel gains stored as log-values in a `[Q, C]` table.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Splits `q ∈ [1, Q]` into the lower table row and the interpolation weight.
pub fn quality_split(q: f64, levels: usize) -> Result<(usize, f64)> {
    let qmax = levels as f64;
    if !(1.0..=qmax).contains(&q) {
        return Err(Error::domain(format!("quality {q} outside [1, {qmax}]")));
    }
    let lo = q.floor();
    let frac = q - lo;
    Ok((lo as usize - 1, frac))
}

/// Gain vector for quality `q`: the stored row for integer `q`, otherwise
/// `s_⌊q⌋^(1−f) ⊙ s_⌈q⌉^f` elementwise.
pub fn sf_interpolate<T: Real>(q: f64, log_table: &Tensor<T>) -> Result<Vec<T>> {
    let (levels, c) = table_dims(log_table)?;
    let (row, frac) = quality_split(q, levels)?;
    let d = log_table.data();
    let lo = &d[row * c..(row + 1) * c];
    if frac == 0.0 {
        return Ok(lo.iter().map(|&l| l.exp()).collect());
    }
    let hi = &d[(row + 1) * c..(row + 2) * c];
    let (a, b) = (T::of(1.0 - frac), T::of(frac));
    Ok(lo.iter().zip(hi).map(|(&l, &h)| (a * l + b * h).exp()).collect())
}

/// Differentiable counterpart of [`sf_interpolate`] on a table node.
pub fn sf_vector<T: Real>(g: &Graph<T>, log_table: Var, q: f64) -> Result<Var> {
    let (levels, _) = table_dims(&g.value(log_table))?;
    let (row, frac) = quality_split(q, levels)?;
    let lo = g.take_row(log_table, row)?;
    if frac == 0.0 {
        return Ok(g.exp(lo));
    }
    let hi = g.take_row(log_table, row + 1)?;
    let mixed = g.add(g.scale(lo, T::of(1.0 - frac)), g.scale(hi, T::of(frac)))?;
    Ok(g.exp(mixed))
}

/// `x ⊙ s` per channel.
pub fn sf_modulate<T: Real>(g: &Graph<T>, x: Var, s: Var) -> Result<Var> {
    check_positive(g, s)?;
    g.mul_channels(x, s)
}

/// `x ⊘ s` per channel.
pub fn isf_modulate<T: Real>(g: &Graph<T>, x: Var, s: Var) -> Result<Var> {
    check_positive(g, s)?;
    g.div_channels(x, s)
}

fn check_positive<T: Real>(g: &Graph<T>, s: Var) -> Result<()> {
    if g.value(s).data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::Invariant("scaling factors must be strictly positive".into()));
    }
    Ok(())
}

fn table_dims<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [q, c] if q >= 1 => Ok((q, c)),
        ref s => Err(Error::dim(format!("scaling table must be [Q, C], got {s:?}"))),
    }
}
