use rand::Rng;

use crate::autodiff::{Graph, ParameterStore, Real, Var};
use crate::error::{Error, Result};
use crate::init;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PathKind {
    /// `C → C/2 → C`
    Bottleneck,
    /// `C → 2C → C`
    InvertedBottleneck,
}

impl PathKind {
    pub fn hidden(self, c: usize) -> usize {
        match self {
            Self::Bottleneck => c / 2,
            Self::InvertedBottleneck => 2 * c,
        }
    }

    /// Closed-form parameter count of a path at width `c`.
    pub fn param_count(self, c: usize) -> usize {
        let h = self.hidden(c);
        c * h + h + h * c + c
    }
}

/// One MLP path: `linear(C→hidden) → GELU → linear(hidden→C)`, stored under `prefix`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathSpec {
    pub kind: PathKind,
    pub channels: usize,
    pub prefix: String,
}

impl PathSpec {
    pub fn new(kind: PathKind, channels: usize, prefix: impl Into<String>) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::config(format!("path width must be even, got {channels}")));
        }
        Ok(Self {
            kind,
            channels,
            prefix: prefix.into(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.kind.hidden(self.channels)
    }

    pub fn param_names(&self) -> [String; 4] {
        let p = &self.prefix;
        [
            format!("{p}.l1.w"),
            format!("{p}.l1.b"),
            format!("{p}.l2.w"),
            format!("{p}.l2.b"),
        ]
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        let (c, h) = (self.channels, self.hidden());
        let [w1, b1, w2, b2] = self.param_names();
        store.insert(&w1, init::uniform(rng, &[c, h], c), true)?;
        store.insert(&b1, init::zeros(&[h]), true)?;
        store.insert(&w2, init::uniform(rng, &[h, c], h), true)?;
        store.insert(&b2, init::zeros(&[c]), true)?;
        Ok(())
    }

    /// Copies the weights of a same-shaped path into this one.
    pub fn init_from<T: Real>(&self, store: &mut ParameterStore<T>, src: &PathSpec) -> Result<()> {
        if src.kind != self.kind || src.channels != self.channels {
            return Err(Error::config("path shapes differ"));
        }
        for (dst, from) in self.param_names().iter().zip(src.param_names()) {
            let v = store.get(&from)?.clone();
            store.insert(dst, v, true)?;
        }
        Ok(())
    }

    pub fn is_registered<T: Real>(&self, store: &ParameterStore<T>) -> bool {
        self.param_names().iter().all(|n| store.contains(n))
    }

    /// Applies the path to every position of `x` (`[..., C]`).
    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.last() != Some(&self.channels) {
            return Err(Error::dim(format!(
                "path {} expects {} channels, got {:?}",
                self.prefix, self.channels, shape
            )));
        }
        let [w1, b1, w2, b2] = self.param_names();
        let h = g.linear(x, g.named(store, &w1)?, Some(g.named(store, &b1)?))?;
        let h = g.gelu(h);
        g.linear(h, g.named(store, &w2)?, Some(g.named(store, &b2)?))
    }
}
