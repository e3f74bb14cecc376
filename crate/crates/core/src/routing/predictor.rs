use rand::Rng;

use crate::autodiff::{Graph, ParameterStore, Real, Var};
use crate::error::{Error, Result};
use crate::init;

/// Number of discrete training levels the bias table covers.
pub const BIAS_LEVELS: usize = 8;

/// Importance score predictor: `linear(C→C/2) → partial average →
/// linear(C/2→C/2) → GELU → linear(C/2→1)`, plus a per-level bias table that
/// only the training-time sampler reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Predictor {
    pub channels: usize,
    pub prefix: String,
}

impl Predictor {
    pub fn new(channels: usize, prefix: impl Into<String>) -> Result<Self> {
        if channels < 4 || channels % 4 != 0 {
            return Err(Error::config(format!(
                "predictor width must be a multiple of 4, got {channels}"
            )));
        }
        Ok(Self {
            channels,
            prefix: prefix.into(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / 2
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        self.name("bias")
    }

    /// Names of the three linear layers (weights and biases).
    pub fn layer_names(&self) -> Vec<String> {
        ["l1.w", "l1.b", "l2.w", "l2.b", "l3.w", "l3.b"]
            .iter()
            .map(|p| self.name(p))
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = self.layer_names();
        v.push(self.bias_name());
        v
    }

    pub fn param_count(&self) -> usize {
        let (c, h) = (self.channels, self.hidden());
        c * h + h + h * h + h + h + 1 + BIAS_LEVELS
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        let (c, h) = (self.channels, self.hidden());
        store.insert(&self.name("l1.w"), init::uniform(rng, &[c, h], c), true)?;
        store.insert(&self.name("l1.b"), init::zeros(&[h]), true)?;
        store.insert(&self.name("l2.w"), init::uniform(rng, &[h, h], h), true)?;
        store.insert(&self.name("l2.b"), init::zeros(&[h]), true)?;
        store.insert(&self.name("l3.w"), init::uniform(rng, &[h, 1], h), true)?;
        store.insert(&self.name("l3.b"), init::zeros(&[1]), true)?;
        store.insert(&self.bias_name(), init::zeros(&[BIAS_LEVELS]), true)?;
        Ok(())
    }

    pub fn is_registered<T: Real>(&self, store: &ParameterStore<T>) -> bool {
        self.param_names().iter().all(|n| store.contains(n))
    }

    /// Pre-bias score map `[H, W, 1]` of a stage input `[H, W, C]`.
    pub fn scores<T: Real>(&self, g: &Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::dim(format!(
                "predictor {} expects [H, W, {}], got {:?}",
                self.prefix, self.channels, shape
            )));
        }
        let p = |n: &str| g.named(store, &self.name(n));
        let h = g.linear(x, p("l1.w")?, Some(p("l1.b")?))?;
        let h = g.partial_average(h)?;
        let h = g.gelu(g.linear(h, p("l2.w")?, Some(p("l2.b")?))?);
        g.linear(h, p("l3.w")?, Some(p("l3.b")?))
    }

    pub fn bias<T: Real>(&self, g: &Graph<T>, store: &ParameterStore<T>) -> Result<Var> {
        g.named(store, &self.bias_name())
    }
}
