mod common;

#[test]
fn primitive_gradients_match_finite_differences() {
    for o in common::primitive_suite(20, 1) {
        assert!(o.max_rel_err < 1e-6, "{}: {:e}", o.name, o.max_rel_err);
    }
}

#[test]
fn objective_gradients_match_finite_differences() {
    for o in common::composite_suite(2) {
        assert!(o.checked > 0, "{}", o.name);
        assert!(o.max_rel_err < 1e-4, "{}: {:e} at {:?}", o.name, o.max_rel_err, o.worst);
    }
}

// Straight-through ops are piecewise constant, so their surrogate gradients
// are checked against closed forms rather than finite differences.
mod straight_through {
    use mpa_codec::autodiff::{Graph, Tensor};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rounding_passes_gradient_through(v in proptest::collection::vec(-20.0f64..20.0, 1..16), w in -3.0f64..3.0) {
            let g = Graph::<f64>::new();
            let x = g.leaf(Tensor::new(vec![v.len()], v.clone()).unwrap());
            let y = g.round_ste(x);
            let out = g.value(y);
            for (a, b) in out.data().iter().zip(&v) {
                prop_assert_eq!(*a, b.round());
            }
            let gr = g.backward(g.scale(g.sum(y), w)).unwrap();
            prop_assert!(gr.wrt(x).unwrap().iter().all(|&d| d == w));
        }

        #[test]
        fn threshold_uses_sigmoid_slope(v in proptest::collection::vec(-6.0f64..6.0, 1..16), tau in 0.1f64..0.9) {
            let g = Graph::<f64>::new();
            let x = g.leaf(Tensor::new(vec![v.len()], v.clone()).unwrap());
            let y = g.threshold_ste(x, tau);
            let gr = g.backward(g.sum(y)).unwrap();
            for ((o, d), &xv) in g.value(y).data().iter().zip(gr.wrt(x).unwrap()).zip(&v) {
                let s = 1.0 / (1.0 + (-xv).exp());
                prop_assert_eq!(*o, if s > tau { 1.0 } else { 0.0 });
                prop_assert!((d - s * (1.0 - s)).abs() < 1e-12);
            }
        }
    }
}
