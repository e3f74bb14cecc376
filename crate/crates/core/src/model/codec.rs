//! Four-stage analysis/synthesis transforms with routed blocks, gain
//! modulation and a mean-scale hyperprior.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Task, DOWNSCALE, ROUTED_STAGES, STAGES};
use super::scaling::{isf_modulate, sf_modulate, sf_vector};
use crate::autodiff::{Graph, ParameterStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::routing::{
    binarize_mask_infer, mpa_apply, ratio_decoder, sample_mask_train, ImportanceMask, MaskGrad,
    PathCounters, PathKind, PathSpec, Predictor, RatioSchedule, StageMask,
};

/// Lower bound on the predicted scale of latent elements.
pub const SIGMA_MIN: f64 = 0.11;
/// Lower bound on any modelled likelihood.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
/// Threshold of the training-time mask sampler.
pub const MASK_THRESHOLD: f64 = 0.5;

/// How stage masks are produced.
pub enum Masking<'a> {
    /// Top-k binarisation of the predicted scores.
    Infer,
    /// Gumbel-Sigmoid samples with the bias of `level`.
    Train {
        rng: &'a mut ChaCha8Rng,
        grad: MaskGrad,
        level: usize,
    },
}

/// Quantiser behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quant {
    /// Additive `U(−0.5, 0.5)` noise.
    Noise,
    /// Rounding forward, identity gradient.
    RoundSte,
    /// Rounding, no gradient.
    Round,
    /// Pass-through (smooth surrogate for finite-difference checks).
    Identity,
}

/// Routing record of one stage.
#[derive(Clone, Debug)]
pub struct StageRouting {
    pub target: f64,
    pub mask: StageMask,
}

impl StageRouting {
    pub fn hard(&self) -> Option<&ImportanceMask> {
        match &self.mask {
            StageMask::Hard(m) => Some(m),
            StageMask::Soft(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub y: Var,
    pub stages: Vec<StageRouting>,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    /// Reconstruction before clamping.
    pub x: Var,
    pub stages: Vec<StageRouting>,
}

enum Gain {
    Scale,
    Unscale,
}

enum Mlp<'a> {
    Plain(PathSpec),
    Routed {
        main: PathSpec,
        side: Option<PathSpec>,
        mask: &'a StageMask,
    },
}

/// Stateless view of the network; parameters live in a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub config: ModelConfig,
    pub schedule: RatioSchedule,
}

fn conv_init<T: Real>(
    store: &mut ParameterStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.w"), init::uniform(rng, &[k, k, cin, cout], k * k * cin), true)?;
    store.insert(&format!("{prefix}.b"), init::zeros(&[cout]), true)?;
    Ok(())
}

fn enc_block(i: usize, j: usize) -> String {
    format!("enc.s{i}.b{j}")
}

fn dec_block(i: usize, j: usize) -> String {
    format!("dec.s{i}.b{j}")
}

impl Codec {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let schedule = RatioSchedule::new(5.0, config.levels as f64)?;
        Ok(Self { config, schedule })
    }

    /// Infers the configuration from a populated store.
    pub fn from_store<T: Real>(store: &ParameterStore<T>) -> Result<Self> {
        Self::new(ModelConfig::infer(store)?)
    }

    fn c(&self, stage: usize) -> usize {
        self.config.channels[stage - 1]
    }

    fn nblocks(&self, stage: usize) -> usize {
        self.config.blocks[stage - 1]
    }

    pub fn enc_predictor(&self, stage: usize) -> Predictor {
        Predictor::new(self.c(stage), format!("enc.s{stage}.pred")).expect("validated width")
    }

    pub fn dec_predictor(&self, stage: usize, task: Task) -> Predictor {
        Predictor::new(self.c(stage), format!("dec.s{stage}.pred.{}", task.name())).expect("validated width")
    }

    fn path(&self, kind: PathKind, stage: usize, prefix: String) -> PathSpec {
        PathSpec::new(kind, self.c(stage), prefix).expect("validated width")
    }

    pub fn enc_main(&self, stage: usize, block: usize) -> PathSpec {
        self.path(PathKind::InvertedBottleneck, stage, format!("{}.main", enc_block(stage, block)))
    }

    pub fn enc_side(&self, stage: usize, block: usize) -> PathSpec {
        self.path(PathKind::Bottleneck, stage, format!("{}.side", enc_block(stage, block)))
    }

    pub fn dec_main(&self, stage: usize, block: usize) -> PathSpec {
        self.path(PathKind::InvertedBottleneck, stage, format!("{}.main", dec_block(stage, block)))
    }

    pub fn dec_side(&self, stage: usize, block: usize, task: Task) -> PathSpec {
        self.path(task.path_kind(), stage, format!("{}.side.{}", dec_block(stage, block), task.name()))
    }

    fn deep_mlp(&self, prefix: String) -> PathSpec {
        self.path(PathKind::InvertedBottleneck, STAGES, format!("{prefix}.mlp"))
    }

    /// Registers every parameter of the base model (no decoder side paths).
    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let levels = self.config.levels;
        let mut cin = 3;
        for i in 1..=STAGES {
            let c = self.c(i);
            conv_init(store, rng, &format!("enc.s{i}.down"), if i == 1 { 5 } else { 3 }, cin, c)?;
            if i <= ROUTED_STAGES {
                self.enc_predictor(i).init(store, rng)?;
            }
            for j in 1..=self.nblocks(i) {
                let p = enc_block(i, j);
                self.block_common_init(store, rng, &p, c, "sf")?;
                if i <= ROUTED_STAGES {
                    self.enc_main(i, j).init(store, rng)?;
                    self.enc_side(i, j).init(store, rng)?;
                } else {
                    self.deep_mlp(p).init(store, rng)?;
                }
            }
            cin = c;
        }
        let cl = self.config.latent_channels();
        store.insert("enc.latent_sf", latent_gain_table(levels, cl), true)?;

        let hc = self.config.hyper;
        conv_init(store, rng, "hyper.ha.c1", 3, cl, hc)?;
        conv_init(store, rng, "hyper.ha.c2", 3, hc, hc)?;
        conv_init(store, rng, "hyper.hs.c1", 3, hc, hc)?;
        conv_init(store, rng, "hyper.hs.c2", 3, hc, 2 * cl)?;
        store.insert("hyper.prior.loc", init::zeros(&[hc]), true)?;
        store.insert("hyper.prior.log_scale", init::zeros(&[hc]), true)?;

        store.insert("dec.latent_isf", latent_gain_table(levels, cl), true)?;
        for j in 1..=self.nblocks(STAGES) {
            let p = dec_block(STAGES, j);
            self.block_common_init(store, rng, &p, cl, "isf")?;
            self.deep_mlp(p).init(store, rng)?;
        }
        for i in (1..=ROUTED_STAGES).rev() {
            let c = self.c(i);
            conv_init(store, rng, &format!("dec.s{i}.up"), 3, self.c(i + 1), c)?;
            for j in 1..=self.nblocks(i) {
                self.block_common_init(store, rng, &dec_block(i, j), c, "isf")?;
                self.dec_main(i, j).init(store, rng)?;
            }
        }
        conv_init(store, rng, "dec.out", 5, self.c(1), 3)?;
        Ok(())
    }

    fn block_common_init<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        p: &str,
        c: usize,
        gain: &str,
    ) -> Result<()> {
        store.insert(&format!("{p}.{gain}"), init::zeros(&[self.config.levels, c]), true)?;
        store.insert(&format!("{p}.ln1.g"), init::ones(&[c]), true)?;
        store.insert(&format!("{p}.ln1.b"), init::zeros(&[c]), true)?;
        store.insert(&format!("{p}.mix.w"), init::uniform(rng, &[3, 3, c], 9), true)?;
        store.insert(&format!("{p}.mix.b"), init::zeros(&[c]), true)?;
        store.insert(&format!("{p}.ln2.g"), init::ones(&[c]), true)?;
        store.insert(&format!("{p}.ln2.b"), init::zeros(&[c]), true)?;
        Ok(())
    }

    /// Names of the parameters a task adds to the decoder.
    pub fn task_param_names(&self, task: Task) -> Vec<String> {
        let mut names = Vec::new();
        for i in 1..=ROUTED_STAGES {
            names.extend(self.dec_predictor(i, task).param_names());
            for j in 1..=self.nblocks(i) {
                names.extend(self.dec_side(i, j, task).param_names());
            }
        }
        names
    }

    pub fn is_task_registered<T: Real>(&self, store: &ParameterStore<T>, task: Task) -> bool {
        self.task_param_names(task).iter().all(|n| store.contains(n))
    }

    /// Adds the side paths and predictors of `task` to every routed decoder
    /// stage. Side paths shaped like the main path start as copies of it.
    pub fn register_task<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        task: Task,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if self.is_task_registered(store, task) {
            return Err(Error::config(format!("task {task} is already registered")));
        }
        for i in 1..=ROUTED_STAGES {
            self.dec_predictor(i, task).init(store, rng)?;
            for j in 1..=self.nblocks(i) {
                let side = self.dec_side(i, j, task);
                let main = self.dec_main(i, j);
                if side.kind == main.kind {
                    side.init_from(store, &main)?;
                } else {
                    side.init(store, rng)?;
                }
            }
        }
        Ok(())
    }

    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("dec.")
    }

    // ------------------------------------------------------------------
    // Forward passes
    // ------------------------------------------------------------------

    fn stage_mask<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        pred: &Predictor,
        x: Var,
        rho: f64,
        masking: &mut Masking<'_>,
    ) -> Result<StageRouting> {
        let shape = g.shape(x);
        let (h, w) = (shape[0], shape[1]);
        let mask = match masking {
            Masking::Infer => {
                let m = if rho <= 0.0 || rho >= 1.0 {
                    ImportanceMask::filled(h, w, rho >= 1.0)
                } else {
                    let u = pred.scores(g, store, x)?;
                    binarize_mask_infer(&g.value(u), rho)?
                };
                StageMask::Hard(Arc::new(m))
            }
            Masking::Train { rng, grad, level } => {
                let u = pred.scores(g, store, x)?;
                let bias = pred.bias(g, store)?;
                StageMask::Soft(sample_mask_train(g, u, bias, *level, MASK_THRESHOLD, *grad, *rng)?)
            }
        };
        Ok(StageRouting { target: rho, mask })
    }

    #[allow(clippy::too_many_arguments)]
    fn block<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        prefix: &str,
        x: Var,
        q: f64,
        gain: Gain,
        mlp: Mlp<'_>,
        counters: Option<&PathCounters>,
    ) -> Result<Var> {
        let p = |n: &str| g.named(store, &format!("{prefix}.{n}"));
        let h = match gain {
            Gain::Scale => sf_modulate(g, x, sf_vector(g, p("sf")?, q)?)?,
            Gain::Unscale => isf_modulate(g, x, sf_vector(g, p("isf")?, q)?)?,
        };
        let n1 = g.layer_norm(h, p("ln1.g")?, p("ln1.b")?)?;
        let h = g.add(h, g.depthwise_conv2d(n1, p("mix.w")?, Some(p("mix.b")?))?)?;
        let n2 = g.layer_norm(h, p("ln2.g")?, p("ln2.b")?)?;
        let m = match mlp {
            Mlp::Plain(spec) => spec.forward(g, store, n2)?,
            Mlp::Routed { main, side, mask } => match side {
                Some(side) => mpa_apply(g, store, n2, mask, &main, &side, counters)?,
                None => {
                    // a model without this side path may only run all-main
                    match mask {
                        StageMask::Hard(m) if m.popcount() == m.bits().len() => {
                            mpa_apply(g, store, n2, mask, &main, &main, counters)?
                        }
                        _ => return Err(Error::domain("side path is not registered")),
                    }
                }
            },
        };
        g.add(h, m)
    }

    fn conv<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        prefix: &str,
        x: Var,
        transposed: bool,
    ) -> Result<Var> {
        let w = g.named(store, &format!("{prefix}.w"))?;
        let b = g.named(store, &format!("{prefix}.b"))?;
        if transposed {
            g.conv_transpose2d(x, w, Some(b), 2)
        } else {
            g.conv2d(x, w, Some(b), 2)
        }
    }

    /// Analysis transform of an image `[H, W, 3]` in `[0, 1]` with `H`, `W`
    /// multiples of 16.
    pub fn encode<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        q: f64,
        masking: &mut Masking<'_>,
        counters: Option<&PathCounters>,
    ) -> Result<Analysis> {
        let shape = g.shape(x);
        match shape.as_slice() {
            &[h, w, 3] if h % DOWNSCALE == 0 && w % DOWNSCALE == 0 && h > 0 && w > 0 => {}
            s => {
                return Err(Error::dim(format!(
                    "encoder input must be [H, W, 3] with H, W multiples of {DOWNSCALE}, got {s:?}"
                )))
            }
        }
        let rho = self.schedule.ratio_from_quality(q)?;
        let mut h = g.add_scalar(x, T::of(-0.5));
        let mut stages = Vec::with_capacity(ROUTED_STAGES);
        for i in 1..=STAGES {
            h = self.conv(g, store, &format!("enc.s{i}.down"), h, false)?;
            let routing = if i <= ROUTED_STAGES {
                Some(self.stage_mask(g, store, &self.enc_predictor(i), h, rho, masking)?)
            } else {
                None
            };
            for j in 1..=self.nblocks(i) {
                let mlp = match &routing {
                    Some(r) => Mlp::Routed {
                        main: self.enc_main(i, j),
                        side: Some(self.enc_side(i, j)),
                        mask: &r.mask,
                    },
                    None => Mlp::Plain(self.deep_mlp(enc_block(i, j))),
                };
                h = self.block(g, store, &enc_block(i, j), h, q, Gain::Scale, mlp, counters)?;
            }
            stages.extend(routing);
        }
        let s = sf_vector(g, g.named(store, "enc.latent_sf")?, q)?;
        let y = sf_modulate(g, h, s)?;
        Ok(Analysis { y, stages })
    }

    /// Synthesis transform. Stages run deepest first; the three
    /// highest-resolution stages route between the perceptual main path and
    /// the side path of `task` with main-path share `1 − α`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        y_hat: Var,
        q: f64,
        alpha: f64,
        task: Task,
        masking: &mut Masking<'_>,
        counters: Option<&PathCounters>,
    ) -> Result<Synthesis> {
        let cl = self.config.latent_channels();
        let shape = g.shape(y_hat);
        if shape.len() != 3 || shape[2] != cl {
            return Err(Error::dim(format!("latent must be [h, w, {cl}], got {shape:?}")));
        }
        let rho = ratio_decoder(alpha)?;
        let registered = self.is_task_registered(store, task);
        if !registered && rho < 1.0 {
            return Err(Error::domain(format!(
                "task {task} has no side path in this model; only alpha = 0 is available"
            )));
        }
        let s = sf_vector(g, g.named(store, "dec.latent_isf")?, q)?;
        let mut h = isf_modulate(g, y_hat, s)?;
        for j in 1..=self.nblocks(STAGES) {
            let p = dec_block(STAGES, j);
            h = self.block(g, store, &p, h, q, Gain::Unscale, Mlp::Plain(self.deep_mlp(p.clone())), None)?;
        }
        let mut stages = Vec::with_capacity(ROUTED_STAGES);
        for i in (1..=ROUTED_STAGES).rev() {
            h = self.conv(g, store, &format!("dec.s{i}.up"), h, true)?;
            let routing = if registered {
                self.stage_mask(g, store, &self.dec_predictor(i, task), h, rho, masking)?
            } else {
                let shape = g.shape(h);
                StageRouting {
                    target: 1.0,
                    mask: StageMask::Hard(Arc::new(ImportanceMask::filled(shape[0], shape[1], true))),
                }
            };
            for j in 1..=self.nblocks(i) {
                let mlp = Mlp::Routed {
                    main: self.dec_main(i, j),
                    side: registered.then(|| self.dec_side(i, j, task)),
                    mask: &routing.mask,
                };
                h = self.block(g, store, &dec_block(i, j), h, q, Gain::Unscale, mlp, counters)?;
            }
            stages.push(routing);
        }
        let out = self.conv(g, store, "dec.out", h, true)?;
        Ok(Synthesis {
            x: g.add_scalar(out, T::of(0.5)),
            stages,
        })
    }

    /// Hyper-analysis `z = h_a(y)`.
    pub fn hyper_analysis<T: Real>(&self, g: &Graph<T>, store: &ParameterStore<T>, y: Var) -> Result<Var> {
        let h = self.conv1(g, store, "hyper.ha.c1", y)?;
        self.conv1(g, store, "hyper.ha.c2", g.gelu(h))
    }

    /// Hyper-synthesis: per-element mean and scale of the latent.
    pub fn hyper_synthesis<T: Real>(
        &self,
        g: &Graph<T>,
        store: &ParameterStore<T>,
        z_hat: Var,
    ) -> Result<(Var, Var)> {
        let cl = self.config.latent_channels();
        let h = self.conv1(g, store, "hyper.hs.c1", z_hat)?;
        let out = self.conv1(g, store, "hyper.hs.c2", g.gelu(h))?;
        let mu = g.slice_channels(out, 0, cl)?;
        let raw = g.slice_channels(out, cl, 2 * cl)?;
        let sigma = g.clamp(g.softplus(raw), T::of(SIGMA_MIN), T::infinity());
        Ok((mu, sigma))
    }

    fn conv1<T: Real>(&self, g: &Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = g.named(store, &format!("{prefix}.w"))?;
        let b = g.named(store, &format!("{prefix}.b"))?;
        g.conv2d(x, w, Some(b), 1)
    }

    /// Floored likelihoods of the hyper-latent under the learned logistic prior.
    pub fn z_likelihood<T: Real>(&self, g: &Graph<T>, store: &ParameterStore<T>, z: Var) -> Result<Var> {
        let loc = g.named(store, "hyper.prior.loc")?;
        let ls = g.named(store, "hyper.prior.log_scale")?;
        Ok(floor_likelihood(g, g.logistic_likelihood(z, loc, ls)?))
    }
}

/// Floored Gaussian unit-bin likelihoods of the latent.
pub fn y_likelihood<T: Real>(g: &Graph<T>, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    Ok(floor_likelihood(g, g.gaussian_likelihood(y, mu, sigma)?))
}

fn floor_likelihood<T: Real>(g: &Graph<T>, p: Var) -> Var {
    g.clamp(p, T::of(LIKELIHOOD_FLOOR), T::one())
}

/// Bits per source pixel implied by a set of likelihood tensors.
pub fn estimate_rate<T: Real>(g: &Graph<T>, likelihoods: &[Var], pixels: usize) -> Result<Var> {
    if pixels == 0 || likelihoods.is_empty() {
        return Err(Error::domain("rate needs at least one pixel and one likelihood tensor"));
    }
    let mut total = None;
    for &p in likelihoods {
        if g.value(p).data().iter().any(|&v| !(v > T::zero())) {
            return Err(Error::Numeric("zero likelihood in rate estimate".into()));
        }
        let s = g.sum(g.ln(p));
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let scale = -1.0 / (std::f64::consts::LN_2 * pixels as f64);
    Ok(g.scale(total.expect("non-empty"), T::of(scale)))
}

/// Applies the quantiser `mode` to `y`.
pub fn quantize<T: Real>(g: &Graph<T>, y: Var, mode: Quant, rng: &mut ChaCha8Rng) -> Result<Var> {
    Ok(match mode {
        Quant::Noise => {
            let shape = g.shape(y);
            let n = shape.iter().product();
            let noise: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(-0.5..0.5))).collect();
            g.add(y, g.constant(Tensor::new(shape, noise)?))?
        }
        Quant::RoundSte => g.round_ste(y),
        Quant::Round => g.round(y),
        Quant::Identity => y,
    })
}

/// Log-gains ramping linearly from `e^-1.5` at the lowest quality to `e^0.5`
/// at the highest.
fn latent_gain_table<T: Real>(levels: usize, c: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(levels * c);
    for l in 0..levels {
        let v = -1.5 + 2.0 * l as f64 / (levels - 1) as f64;
        data.extend(std::iter::repeat(T::of(v)).take(c));
    }
    Tensor::new(vec![levels, c], data).expect("extents")
}
