//! Finite-difference gradient suites shared by the integration and
//! acceptance targets.

#![allow(dead_code)]

use std::sync::Arc;

use mpa_codec::autodiff::{all_entries, grad_check, Graph, ParamId, ParameterStore, Tensor, Var};
use mpa_codec::model::{Codec, ModelConfig, Task};
use mpa_codec::train::{
    distortion_d, gan_losses, init_stage1, prepare_stage2, ratio_loss, texture_set, Discriminator, Estimators,
    LossWeights, Objective, PerceptualProxy, TextureKind,
};
use mpa_codec::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<(String, usize)>,
}

fn rt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn n(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rt(rng, shape, -1.5, 1.5)
}

type Op = dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>;

/// Checks `Σ R ⊙ op(inputs)` for a random fixed `R`, every input trainable.
fn check_op(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, op: &Op) -> (f64, usize) {
    let mut s = ParameterStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| s.insert(&format!("in{i}"), t, true).unwrap())
        .collect();
    let shape = {
        let g = Graph::inference();
        let v: Vec<Var> = ids.iter().map(|&id| g.param(&s, id)).collect();
        g.shape(op(&g, &v).unwrap())
    };
    let r = rt(rng, &shape, -1.0, 1.0);
    let entries = all_entries(&s);
    let rep = grad_check(&mut s, &entries, EPS, |g, s| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let y = op(g, &v)?;
        Ok(g.sum(g.mul(y, g.constant(r.clone()))?))
    })
    .unwrap();
    (rep.max_rel_err, rep.checked)
}

fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, bounds: &[f64]) -> Tensor<f64> {
    let cnt: usize = shape.iter().product();
    let data = (0..cnt)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if bounds.iter().all(|b| (v - b).abs() > 1e-3) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Op>);

fn primitives() -> Vec<(&'static str, Build)> {
    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
        (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4))
    }
    vec![
        ("add", |r| {
            let (a, b, c) = dims(r);
            (vec![n(r, &[a, b, c]), n(r, &[a, b, c])], Box::new(|g, v| g.add(v[0], v[1])))
        }),
        ("sub", |r| {
            let (a, b, c) = dims(r);
            (vec![n(r, &[a, b, c]), n(r, &[a, b, c])], Box::new(|g, v| g.sub(v[0], v[1])))
        }),
        ("mul", |r| {
            let (a, b, c) = dims(r);
            (vec![n(r, &[a, b, c]), n(r, &[a, b, c])], Box::new(|g, v| g.mul(v[0], v[1])))
        }),
        ("scale", |r| {
            let c: f64 = r.gen_range(-2.0..2.0);
            (vec![n(r, &[3, 2])], Box::new(move |g, v| Ok(g.scale(v[0], c))))
        }),
        ("add_scalar", |r| {
            let c: f64 = r.gen_range(-2.0..2.0);
            (vec![n(r, &[3, 2])], Box::new(move |g, v| Ok(g.add_scalar(v[0], c))))
        }),
        ("square", |r| (vec![n(r, &[4, 3])], Box::new(|g, v| Ok(g.square(v[0]))))),
        ("exp", |r| (vec![n(r, &[4, 3])], Box::new(|g, v| Ok(g.exp(v[0]))))),
        ("ln", |r| (vec![rt(r, &[4, 3], 0.3, 3.0)], Box::new(|g, v| Ok(g.ln(v[0]))))),
        ("sigmoid", |r| (vec![rt(r, &[4, 3], -4.0, 4.0)], Box::new(|g, v| Ok(g.sigmoid(v[0]))))),
        ("softplus", |r| (vec![rt(r, &[4, 3], -4.0, 4.0)], Box::new(|g, v| Ok(g.softplus(v[0]))))),
        ("gelu", |r| (vec![rt(r, &[4, 3], -4.0, 4.0)], Box::new(|g, v| Ok(g.gelu(v[0]))))),
        ("clamp", |r| {
            (
                vec![away_from(r, &[4, 3], -1.5, 1.5, &[-0.5, 0.7])],
                Box::new(|g, v| Ok(g.clamp(v[0], -0.5, 0.7))),
            )
        }),
        ("sum", |r| (vec![n(r, &[3, 2, 2])], Box::new(|g, v| Ok(g.sum(v[0]))))),
        ("mean", |r| (vec![n(r, &[3, 2, 2])], Box::new(|g, v| Ok(g.mean(v[0]))))),
        ("reshape", |r| (vec![n(r, &[2, 3, 2])], Box::new(|g, v| g.reshape(v[0], &[6, 2])))),
        ("slice_channels", |r| {
            let c = r.gen_range(2..6);
            let a = r.gen_range(0..c - 1);
            let b = r.gen_range(a + 1..=c);
            (vec![n(r, &[2, 2, c])], Box::new(move |g, v| g.slice_channels(v[0], a, b)))
        }),
        ("take_row", |r| {
            let rows = r.gen_range(1..6);
            let i = r.gen_range(0..rows);
            (vec![n(r, &[rows, 3])], Box::new(move |g, v| g.take_row(v[0], i)))
        }),
        ("concat_channels", |r| {
            let (a, b) = (r.gen_range(1..4), r.gen_range(1..4));
            (vec![n(r, &[2, 3, a]), n(r, &[2, 3, b])], Box::new(|g, v| g.concat_channels(v[0], v[1])))
        }),
        ("mean_positions", |r| {
            let (a, b, c) = dims(r);
            (vec![n(r, &[a, b, c])], Box::new(|g, v| Ok(g.mean_positions(v[0]))))
        }),
        ("partial_average", |r| {
            let c = 2 * r.gen_range(1..4);
            (vec![n(r, &[3, 2, c])], Box::new(|g, v| g.partial_average(v[0])))
        }),
        ("mul_channels", |r| {
            let c = r.gen_range(1..5);
            (vec![n(r, &[2, 3, c]), n(r, &[c])], Box::new(|g, v| g.mul_channels(v[0], v[1])))
        }),
        ("div_channels", |r| {
            let c = r.gen_range(1..5);
            (vec![n(r, &[2, 3, c]), rt(r, &[c], 0.5, 2.0)], Box::new(|g, v| g.div_channels(v[0], v[1])))
        }),
        ("add_channels", |r| {
            let c = r.gen_range(1..5);
            (vec![n(r, &[2, 3, c]), n(r, &[c])], Box::new(|g, v| g.add_channels(v[0], v[1])))
        }),
        ("blend", |r| {
            let c = r.gen_range(1..4);
            (
                vec![rt(r, &[3, 3, 1], 0.0, 1.0), n(r, &[3, 3, c]), n(r, &[3, 3, c])],
                Box::new(|g, v| g.blend(v[0], v[1], v[2])),
            )
        }),
        ("gather_scatter_rows", |r| {
            let (h, w) = (3usize, 3usize);
            let mut idx: Vec<usize> = (0..h * w).collect();
            idx.shuffle(r);
            let k = r.gen_range(1..h * w);
            let (mut a, mut b) = (idx[..k].to_vec(), idx[k..].to_vec());
            a.sort();
            b.sort();
            let (a, b) = (Arc::new(a), Arc::new(b));
            (
                vec![n(r, &[h, w, 2])],
                Box::new(move |g, v| {
                    let pa = g.scale(g.gather_rows(v[0], a.clone())?, 2.0);
                    let pb = g.square(g.gather_rows(v[0], b.clone())?);
                    g.scatter_rows(&[h, w, 2], &[(pa, a.clone()), (pb, b.clone())])
                }),
            )
        }),
        ("upsample_nearest", |r| {
            let f = r.gen_range(1..4);
            (vec![n(r, &[2, 3, 2])], Box::new(move |g, v| g.upsample_nearest(v[0], f)))
        }),
        ("linear", |r| {
            let (ci, co) = (r.gen_range(1..5), r.gen_range(1..5));
            (
                vec![n(r, &[3, ci]), n(r, &[ci, co]), n(r, &[co])],
                Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
            )
        }),
        ("layer_norm", |r| {
            let c = r.gen_range(2..6);
            (
                vec![rt(r, &[3, c], -2.0, 2.0), n(r, &[c]), n(r, &[c])],
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
            )
        }),
        ("conv2d", |r| {
            let (ci, co) = (r.gen_range(1..4), r.gen_range(1..4));
            let k = [1usize, 3, 5][r.gen_range(0..3)];
            let s = r.gen_range(1..3);
            (
                vec![n(r, &[4, 4, ci]), n(r, &[k, k, ci, co]), n(r, &[co])],
                Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), s)),
            )
        }),
        ("conv_transpose2d", |r| {
            let (ci, co) = (r.gen_range(1..4), r.gen_range(1..4));
            let k = [2usize, 3, 5][r.gen_range(0..3)];
            let s = r.gen_range(1..3);
            (
                vec![n(r, &[2, 3, ci]), n(r, &[k, k, ci, co]), n(r, &[co])],
                Box::new(move |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), s)),
            )
        }),
        ("depthwise_conv2d", |r| {
            let c = r.gen_range(1..4);
            (
                vec![n(r, &[4, 3, c]), n(r, &[3, 3, c]), n(r, &[c])],
                Box::new(|g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]))),
            )
        }),
        ("gaussian_likelihood", |r| {
            let c = r.gen_range(1..4);
            (
                vec![rt(r, &[2, 2, c], -2.0, 2.0), rt(r, &[2, 2, c], -1.0, 1.0), rt(r, &[2, 2, c], 0.2, 2.0)],
                Box::new(|g, v| g.gaussian_likelihood(v[0], v[1], v[2])),
            )
        }),
        ("logistic_likelihood", |r| {
            let c = r.gen_range(1..4);
            (
                vec![rt(r, &[2, 2, c], -2.0, 2.0), rt(r, &[c], -1.0, 1.0), rt(r, &[c], -1.0, 1.0)],
                Box::new(|g, v| g.logistic_likelihood(v[0], v[1], v[2])),
            )
        }),
        ("cross_entropy", |r| {
            let (rows, k) = (r.gen_range(1..5), r.gen_range(2..5));
            let labels: Vec<usize> = (0..rows).map(|_| r.gen_range(0..k)).collect();
            (vec![rt(r, &[rows, k], -3.0, 3.0)], Box::new(move |g, v| g.cross_entropy(v[0], &labels)))
        }),
    ]
}

/// `trials` randomized checks of every differentiable primitive.
pub fn primitive_suite(trials: usize, seed: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitives()
        .into_iter()
        .map(|(name, build)| {
            let (mut worst, mut checked) = (0.0f64, 0);
            for _ in 0..trials {
                let (inputs, op) = build(&mut rng);
                let (e, c) = check_op(&mut rng, inputs, op.as_ref());
                worst = worst.max(e);
                checked += c;
            }
            Outcome {
                name,
                max_rel_err: worst,
                checked,
                worst: None,
            }
        })
        .collect()
}

/// Up to `per` random entries of every trainable tensor.
fn sampled_entries(store: &ParameterStore<f64>, per: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let len = store.value(id).len();
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(rng);
        out.extend(idx.into_iter().take(per).map(|i| (id, i)));
    }
    out
}

fn outcome(name: &'static str, store: &mut ParameterStore<f64>, entries: &[(ParamId, usize)], f: impl Fn(&Graph<f64>, &ParameterStore<f64>) -> Result<Var>) -> Outcome {
    let r = grad_check(store, entries, EPS, f).unwrap();
    Outcome {
        name,
        max_rel_err: r.max_rel_err,
        checked: r.checked,
        worst: r.worst,
    }
}

/// Tiny stage-1 model in 64-bit with every task registered.
pub fn tiny_model(seed: u64) -> (Codec, ParameterStore<f64>) {
    let (codec, mut s) = init_stage1(ModelConfig::tiny(), seed).unwrap();
    for t in Task::ALL {
        prepare_stage2(&codec, &mut s, t, seed, 0).unwrap();
    }
    let mut s = s.cast::<f64>();
    // Zero biases on a zero latent leave layer norms at zero variance, a
    // degenerate point; a small jitter moves the check somewhere generic.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for id in s.ids().collect::<Vec<_>>() {
        let codec_param = !s.name(id).starts_with("task.");
        s.set_trainable(id, codec_param);
        if codec_param {
            for v in s.value_mut(id).data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
    }
    (codec, s)
}

/// Every loss term and both full objectives on the tiny model.
pub fn composite_suite(seed: u64) -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = rt(&mut rng, &[8, 8, 3], 0.05, 0.95);

    // distortion and perceptual proxy with the reconstruction as the parameter
    let mut s = ParameterStore::new();
    let xh = s.insert("xh", rt(&mut rng, &[8, 8, 3], 0.0, 1.0), true).unwrap();
    let e = all_entries(&s);
    out.push(outcome("distortion", &mut s, &e, |g, s| distortion_d(g, g.constant(x.clone()), g.param(s, xh))));
    let proxy = PerceptualProxy::<f64>::new();
    out.push(outcome("perceptual_proxy", &mut s, &e, |g, s| {
        proxy.distance(g, g.constant(x.clone()), g.param(s, xh))
    }));

    // ratio over three soft masks
    let mut s = ParameterStore::new();
    let ms: Vec<ParamId> = (0..3)
        .map(|i| s.insert(&format!("m{i}"), rt(&mut rng, &[4 >> i.min(1), 4, 1], 0.0, 1.0), true).unwrap())
        .collect();
    let e = all_entries(&s);
    out.push(outcome("ratio", &mut s, &e, |g, s| {
        let v: Vec<Var> = ms.iter().map(|&m| g.param(s, m)).collect();
        ratio_loss(g, &v, 0.3)
    }));

    // adversarial terms w.r.t. the reconstruction and the discriminator
    let d = Discriminator { latent_channels: 4 };
    let mut s = ParameterStore::new();
    d.init(&mut s, &mut rng).unwrap();
    let x16 = rt(&mut rng, &[16, 16, 3], 0.0, 1.0);
    let xh16 = s.insert("xh", rt(&mut rng, &[16, 16, 3], 0.0, 1.0), true).unwrap();
    let (yh, y) = (rt(&mut rng, &[1, 1, 4], -2.0, 2.0), rt(&mut rng, &[1, 1, 4], -2.0, 2.0));
    let e = all_entries(&s);
    let gan = |which: usize| {
        let (x16, yh, y) = (x16.clone(), yh.clone(), y.clone());
        let d = d.clone();
        move |g: &Graph<f64>, s: &ParameterStore<f64>| {
            let (lg, ld) = gan_losses(g, s, &d, g.constant(yh.clone()), g.constant(y.clone()), g.constant(x16.clone()), g.param(s, xh16))?;
            Ok(if which == 0 { lg } else { ld })
        }
    };
    out.push(outcome("gan_generator", &mut s, &e, gan(0)));
    // the discriminator objective sees a detached reconstruction
    let ed: Vec<_> = e.iter().copied().filter(|&(id, _)| id != xh16).collect();
    out.push(outcome("gan_discriminator", &mut s, &ed, gan(1)));

    // full objectives on the tiny codec
    let (codec, mut s) = tiny_model(seed);
    let weights = LossWeights::default();
    let proxy = PerceptualProxy::<f64>::new();
    let obj = Objective::new(&codec, &weights, &proxy);
    let img = texture_set(seed, TextureKind::Mixed, 16, 1).remove(0);
    let xt: Tensor<f64> = img.image.to_tensor();
    let e = sampled_entries(&s, 2, &mut rng);
    // With the adversarial term on, the discriminator condition is detached
    // on purpose, so only parameters downstream of the latent are compared.
    let downstream: Vec<_> = e.iter().copied().filter(|&(id, _)| !s.name(id).starts_with("enc.")).collect();
    for (name, level, gan, ent) in [
        ("stage1_loss_q3", 2usize, false, &e),
        ("stage1_loss_q6_adversarial", 5, true, &downstream),
    ] {
        out.push(outcome(name, &mut s, ent, |g, s| {
            let mut r = ChaCha8Rng::seed_from_u64(17);
            Ok(obj.stage1(g, s, &xt, level, gan, Estimators::SMOOTH, &mut r)?.loss)
        }));
    }
    for (name, task, kind) in [
        ("stage2_loss_mse", Task::Mse, TextureKind::Mixed),
        ("stage2_loss_cls", Task::Cls, TextureKind::Grating),
        ("stage2_loss_seg", Task::Seg, TextureKind::Regions),
    ] {
        let smp = texture_set(seed + 1, kind, 16, 1).remove(0);
        let names: std::collections::HashSet<String> = codec.task_param_names(task).into_iter().collect();
        s.train_only(|n| names.contains(n));
        let e = sampled_entries(&s, 4, &mut rng);
        out.push(outcome(name, &mut s, &e, |g, s| {
            let mut r = ChaCha8Rng::seed_from_u64(23);
            Ok(obj.stage2(g, s, &smp, 3, 4, task, Estimators::SMOOTH, &mut r)?.loss)
        }));
    }
    out
}
