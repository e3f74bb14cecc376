use std::collections::HashMap;

use super::params::{ParamId, ParameterStore};
use super::real::Real;
use crate::error::{Error, Result};

/// Per-parameter gradient accumulator. Contributions are summed in call
/// order, so a fixed batch order gives bit-identical totals.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer<T> {
    grads: HashMap<ParamId, Vec<T>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn new() -> Self {
        Self {
            grads: HashMap::new(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => {
                self.grads.insert(id, g.to_vec());
            }
        }
    }

    pub fn accumulate_all<'a>(&mut self, grads: impl Iterator<Item = (ParamId, &'a [T])>) {
        for (id, g) in grads {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v = *v * c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(&id).map(|g| g.as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>, u64)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every trainable parameter that has a gradient
    /// in `grads` and satisfies `select`. Returns the number of parameters touched.
    pub fn step<T: Real>(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &GradBuffer<T>,
        lr: f64,
        select: impl Fn(&str) -> bool,
    ) -> Result<usize> {
        let mut ids: Vec<ParamId> = grads.ids().collect();
        ids.sort();
        let mut touched = 0;
        for id in ids {
            if !store.is_trainable(id) || !select(store.name(id)) {
                continue;
            }
            let g = grads.get(id).expect("listed id");
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}",
                    store.name(id)
                )));
            }
            let name = store.name(id).to_string();
            let n = g.len();
            let (m, v, t) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n], 0));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let p = store.value_mut(id);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i].f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w = T::of(w.f64() - lr * mh / (vh.sqrt() + self.eps));
            }
            touched += 1;
        }
        Ok(touched)
    }
}

/// Learning rate that drops from `base` to `base/10` for the last quarter of `total` steps.
pub fn step_lr(base: f64, step: usize, total: usize) -> f64 {
    if total > 0 && step * 4 >= total * 3 {
        base * 0.1
    } else {
        base
    }
}
