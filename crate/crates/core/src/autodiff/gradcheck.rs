//! Central-difference verification of reverse-mode gradients (64-bit only).

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};

/// Largest relative discrepancy found and where.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Every scalar entry of every trainable parameter.
pub fn all_entries(store: &ParameterStore<f64>) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect()
}

/// Compares the reverse-mode gradient of the scalar `f` against central
/// differences at each listed entry. The error per entry is
/// `|analytic − numeric| / max(1, |numeric|)`.
///
/// `f` must be a deterministic function of the store (reseed any noise
/// inside it on every call).
pub fn grad_check<F>(
    store: &mut ParameterStore<f64>,
    entries: &[(ParamId, usize)],
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::domain(format!("finite-difference step {eps} outside [1e-6, 1e-4]")));
    }
    let g = Graph::new();
    let loss = f(&g, store)?;
    let base = g.item(loss);
    if !base.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite: {base}")));
    }
    let grads = g.backward(loss)?;
    let analytic: std::collections::HashMap<ParamId, Vec<f64>> =
        grads.params().map(|(id, gr)| (id, gr.to_vec())).collect();
    drop(g);

    let eval = |store: &ParameterStore<f64>| -> Result<f64> {
        let g = Graph::inference();
        let v = f(&g, store)?;
        let y = g.item(v);
        if !y.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite: {y}")));
        }
        Ok(y)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for &(id, i) in entries {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + eps;
        let up = eval(store);
        store.value_mut(id).data_mut()[i] = orig - eps;
        let down = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (up? - down?) / (2.0 * eps);
        let a = analytic.get(&id).map_or(0.0, |g| g[i]);
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((store.name(id).to_string(), i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn square_at_one() {
        let mut s = ParameterStore::new();
        let id = s.insert("t", Tensor::scalar(1.0), true).unwrap();
        let r = grad_check(&mut s, &[(id, 0)], 1e-5, |g, s| Ok(g.square(g.param(s, id)))).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn step_outside_range_rejected() {
        let mut s = ParameterStore::new();
        let id = s.insert("t", Tensor::scalar(1.0), true).unwrap();
        let r = grad_check(&mut s, &[(id, 0)], 1e-2, |g, s| Ok(g.param(s, id)));
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut s = ParameterStore::new();
        let id = s.insert("t", Tensor::scalar(-1.0), true).unwrap();
        let r = grad_check(&mut s, &[(id, 0)], 1e-5, |g, s| Ok(g.ln(g.param(s, id))));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
