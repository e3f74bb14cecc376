use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, ParameterStore, Tensor};
use crate::error::Error;
use crate::routing::PathCounters;

fn tiny() -> (Codec, ParameterStore<f64>) {
    let codec = Codec::new(ModelConfig::tiny()).unwrap();
    let mut s = ParameterStore::new();
    codec.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (codec, s)
}

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn shapes_through_the_codec() {
    let (codec, mut s) = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    codec.register_task(&mut s, Task::Cls, &mut rng).unwrap();
    let g = Graph::inference();
    let x = g.constant(image(&mut rng, 64, 32));
    let a = codec.encode(&g, &s, x, 4.5, &mut Masking::Infer, None).unwrap();
    assert_eq!(g.shape(a.y), vec![4, 2, 8]);
    assert_eq!(a.stages.len(), 3);
    let y_hat = g.round(a.y);
    let d = codec.decode(&g, &s, y_hat, 4.5, 0.5, Task::Cls, &mut Masking::Infer, None).unwrap();
    assert_eq!(g.shape(d.x), vec![64, 32, 3]);
    let dims: Vec<_> = d.stages.iter().map(|r| (r.hard().unwrap().height(), r.hard().unwrap().width())).collect();
    assert_eq!(dims, vec![(8, 4), (16, 8), (32, 16)]);
}

#[test]
fn unpadded_input_is_a_dimension_error() {
    let (codec, s) = tiny();
    let g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[24, 32, 3]));
    let r = codec.encode(&g, &s, x, 2.0, &mut Masking::Infer, None);
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn quality_endpoints_use_one_path_only() {
    let (codec, s) = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Graph::inference();
    let x = g.constant(image(&mut rng, 32, 32));
    let c = PathCounters::new();
    codec.encode(&g, &s, x, 8.0, &mut Masking::Infer, Some(&c)).unwrap();
    assert_eq!(c.side(), 0);
    assert_eq!(c.main(), 16 * 16 + 8 * 8 + 4 * 4);
    c.reset();
    codec.encode(&g, &s, x, 1.0, &mut Masking::Infer, Some(&c)).unwrap();
    assert_eq!(c.main(), 0);
    c.reset();
    let a = codec.encode(&g, &s, x, 3.3, &mut Masking::Infer, Some(&c)).unwrap();
    let ones: usize = a.stages.iter().map(|r| r.hard().unwrap().popcount()).sum();
    assert_eq!(c.main(), ones);
    assert_eq!(c.main() + c.side(), 16 * 16 + 8 * 8 + 4 * 4);
}

#[test]
fn decoder_alpha_endpoints() {
    let (codec, mut s) = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::inference();
    let y = g.constant(Tensor::new(vec![2, 2, 8], (0..32).map(|_| rng.gen_range(-3.0..3.0f64).round()).collect()).unwrap());
    let before = codec.decode(&g, &s, y, 2.0, 0.0, Task::Seg, &mut Masking::Infer, None).unwrap();
    assert!(matches!(
        codec.decode(&g, &s, y, 2.0, 0.5, Task::Seg, &mut Masking::Infer, None),
        Err(Error::Domain(_))
    ));
    codec.register_task(&mut s, Task::Seg, &mut rng).unwrap();
    let c = PathCounters::new();
    let after = codec.decode(&g, &s, y, 2.0, 0.0, Task::Seg, &mut Masking::Infer, Some(&c)).unwrap();
    assert_eq!(c.side(), 0);
    assert_eq!(*g.value(before.x), *g.value(after.x));
    c.reset();
    codec.decode(&g, &s, y, 2.0, 1.0, Task::Seg, &mut Masking::Infer, Some(&c)).unwrap();
    assert_eq!(c.main(), 0);
}

#[test]
fn mse_side_path_starts_as_copy_of_main() {
    let (codec, mut s) = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    codec.register_task(&mut s, Task::Mse, &mut rng).unwrap();
    let g = Graph::inference();
    let y = g.constant(Tensor::new(vec![2, 2, 8], (0..32).map(|_| rng.gen_range(-3.0..3.0f64).round()).collect()).unwrap());
    let a0 = codec.decode(&g, &s, y, 5.0, 0.0, Task::Mse, &mut Masking::Infer, None).unwrap();
    let a1 = codec.decode(&g, &s, y, 5.0, 1.0, Task::Mse, &mut Masking::Infer, None).unwrap();
    assert_eq!(*g.value(a0.x), *g.value(a1.x));
}

#[test]
fn config_is_recovered_from_parameters() {
    let (codec, s) = tiny();
    assert_eq!(Codec::from_store(&s).unwrap(), codec);
    let full = Codec::new(ModelConfig::default()).unwrap();
    let mut s = ParameterStore::<f32>::new();
    full.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(Codec::from_store(&s).unwrap(), full);
}

#[test]
fn quantizer_modes() {
    let g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = g.leaf(Tensor::from_f64(&[4], &[0.4, -1.5, 2.5, -0.2]).unwrap());
    assert_eq!(g.value(quantize(&g, y, Quant::Round, &mut rng).unwrap()).data(), &[0.0, -2.0, 3.0, -0.0]);
    let n = quantize(&g, y, Quant::Noise, &mut rng).unwrap();
    for (a, b) in g.value(n).data().iter().zip(g.value(y).data()) {
        assert!((a - b).abs() <= 0.5);
    }
    let r = quantize(&g, y, Quant::RoundSte, &mut rng).unwrap();
    let grads = g.backward(g.sum(r)).unwrap();
    assert_eq!(grads.wrt(y).unwrap(), &[1.0; 4]);
}

#[test]
fn rate_examples() {
    let g = Graph::<f64>::inference();
    let half = g.constant(Tensor::full(&[6], 0.5));
    assert!((g.item(estimate_rate(&g, &[half], 6).unwrap()) - 1.0).abs() < 1e-15);
    let one = g.constant(Tensor::full(&[6], 1.0));
    assert_eq!(g.item(estimate_rate(&g, &[one], 6).unwrap()), 0.0);
    let mixed = g.constant(Tensor::from_f64(&[2], &[0.5, 0.25]).unwrap());
    assert!((g.item(estimate_rate(&g, &[mixed], 1).unwrap()) - 3.0).abs() < 1e-15);
    let zero = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(estimate_rate(&g, &[zero], 1), Err(Error::Numeric(_))));
}

#[test]
fn gaussian_bins_sum_to_one_and_peak_at_mean() {
    let g = Graph::<f64>::inference();
    let bins: Vec<f64> = (-50..=50).map(|v| v as f64).collect();
    for &(mu, sigma) in &[(0.0, SIGMA_MIN), (0.3, 1.0), (-2.7, 5.0)] {
        let y = g.constant(Tensor::from_f64(&[101], &bins).unwrap());
        let m = g.constant(Tensor::full(&[101], mu));
        let s = g.constant(Tensor::full(&[101], sigma));
        let floored = g.value(y_likelihood(&g, y, m, s).unwrap());
        assert!(floored.data().iter().all(|&v| v >= LIKELIHOOD_FLOOR && v <= 1.0));
        // the floor only lifts far-tail bins; the raw bin masses sum to one
        let p = g.value(g.gaussian_likelihood(y, m, s).unwrap());
        assert!((p.sum() - 1.0).abs() < 1e-9, "{mu} {sigma}: {}", p.sum());
    }
    let y = g.constant(Tensor::scalar(0.0));
    let s = g.constant(Tensor::scalar(100.0));
    let p = g.item(y_likelihood(&g, y, y, s).unwrap());
    assert!((p - 0.003_989_4).abs() < 1e-6, "{p}");
}
