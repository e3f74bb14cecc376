//! Split / transform / aggregate over an importance mask.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::mask::StageMask;
use super::path::PathSpec;
use crate::autodiff::{Graph, ParameterStore, Real, Var};
use crate::error::{Error, Result};

/// Number of positions each path has processed.
#[derive(Debug, Default)]
pub struct PathCounters {
    main: AtomicUsize,
    side: AtomicUsize,
}

impl PathCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn main(&self) -> usize {
        self.main.load(Ordering::Relaxed)
    }

    pub fn side(&self) -> usize {
        self.side.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.main.store(0, Ordering::Relaxed);
        self.side.store(0, Ordering::Relaxed);
    }

    fn add(&self, main: usize, side: usize) {
        self.main.fetch_add(main, Ordering::Relaxed);
        self.side.fetch_add(side, Ordering::Relaxed);
    }
}

/// Routes each position of `x` (`[H, W, C]`) through `main` where the mask is
/// set and through `side` elsewhere.
///
/// A hard mask gathers each group, runs only the paths that receive
/// positions, and scatters the results back. A soft mask evaluates both paths
/// densely and blends them, which keeps the tape differentiable in the mask.
pub fn mpa_apply<T: Real>(
    g: &Graph<T>,
    store: &ParameterStore<T>,
    x: Var,
    mask: &StageMask,
    main: &PathSpec,
    side: &PathSpec,
    counters: Option<&PathCounters>,
) -> Result<Var> {
    let shape = g.shape(x);
    let (h, w) = match shape.as_slice() {
        &[h, w, _] => (h, w),
        s => return Err(Error::dim(format!("routing expects [H, W, C], got {s:?}"))),
    };
    match mask {
        StageMask::Hard(m) => {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::dim(format!(
                    "mask {}x{} vs features {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
            let ones = Arc::new(m.ones());
            let zeros = Arc::new(m.zeros());
            if let Some(c) = counters {
                c.add(ones.len(), zeros.len());
            }
            if zeros.is_empty() {
                return main.forward(g, store, x);
            }
            if ones.is_empty() {
                return side.forward(g, store, x);
            }
            let a = main.forward(g, store, g.gather_rows(x, ones.clone())?)?;
            let b = side.forward(g, store, g.gather_rows(x, zeros.clone())?)?;
            g.scatter_rows(&shape, &[(a, ones), (b, zeros)])
        }
        StageMask::Soft(m) => {
            let ms = g.shape(*m);
            if ms.len() < 2 || ms[0] != h || ms[1] != w || ms.iter().product::<usize>() != h * w {
                return Err(Error::dim(format!("mask {ms:?} vs features {h}x{w}")));
            }
            if let Some(c) = counters {
                c.add(h * w, h * w);
            }
            dense_oracle(g, store, x, *m, main, side)
        }
    }
}

/// `M⊙main(x) + (1−M)⊙side(x)` with both paths evaluated at every position.
pub fn dense_oracle<T: Real>(
    g: &Graph<T>,
    store: &ParameterStore<T>,
    x: Var,
    m: Var,
    main: &PathSpec,
    side: &PathSpec,
) -> Result<Var> {
    let a = main.forward(g, store, x)?;
    let b = side.forward(g, store, x)?;
    g.blend(m, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::routing::{ImportanceMask, PathKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize) -> (ParameterStore<f64>, PathSpec, PathSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::new();
        let main = PathSpec::new(PathKind::InvertedBottleneck, c, "main").unwrap();
        let side = PathSpec::new(PathKind::Bottleneck, c, "side").unwrap();
        main.init(&mut s, &mut rng).unwrap();
        side.init(&mut s, &mut rng).unwrap();
        (s, main, side)
    }

    fn input(g: &Graph<f64>, rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Var {
        let d = (0..h * w * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        g.constant(Tensor::new(vec![h, w, c], d).unwrap())
    }

    #[test]
    fn degenerate_masks_match_single_paths() {
        let (s, main, side) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::inference();
        let x = input(&g, &mut rng, 4, 4, 8);
        let all = StageMask::Hard(Arc::new(ImportanceMask::filled(4, 4, true)));
        let none = StageMask::Hard(Arc::new(ImportanceMask::filled(4, 4, false)));
        let c = PathCounters::new();
        let y1 = mpa_apply(&g, &s, x, &all, &main, &side, Some(&c)).unwrap();
        assert_eq!(*g.value(y1), *g.value(main.forward(&g, &s, x).unwrap()));
        assert_eq!((c.main(), c.side()), (16, 0));
        let y0 = mpa_apply(&g, &s, x, &none, &main, &side, Some(&c)).unwrap();
        assert_eq!(*g.value(y0), *g.value(side.forward(&g, &s, x).unwrap()));
        assert_eq!((c.main(), c.side()), (16, 16));
    }

    #[test]
    fn random_mask_equals_dense_oracle_exactly() {
        let (s, main, side) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::inference();
        let x = input(&g, &mut rng, 4, 4, 8);
        let bits: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.5)).collect();
        let m = ImportanceMask::from_bits(4, 4, bits).unwrap();
        let routed = mpa_apply(&g, &s, x, &StageMask::Hard(Arc::new(m.clone())), &main, &side, None).unwrap();
        let dense = dense_oracle(&g, &s, x, g.constant(m.to_tensor()), &main, &side).unwrap();
        assert_eq!(g.value(routed).max_abs_diff(&g.value(dense)), 0.0);
    }

    #[test]
    fn spatial_mismatch_is_a_dimension_error() {
        let (s, main, side) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Graph::inference();
        let x = input(&g, &mut rng, 4, 4, 8);
        let m = StageMask::Hard(Arc::new(ImportanceMask::filled(2, 8, true)));
        assert!(matches!(mpa_apply(&g, &s, x, &m, &main, &side, None), Err(Error::Dimension(_))));
    }
}
