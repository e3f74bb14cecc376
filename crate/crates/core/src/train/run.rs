//! Training runs: flat key=value configuration, the two stage loops, and
//! the metrics log.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{DataSource, TextureKind};
use super::losses::{Discriminator, LossWeights, PerceptualProxy};
use super::objective::{Estimators, Objective, Terms};
use super::task_model::{accuracy, TaskModel};
use crate::autodiff::{step_lr, Adam, GradBuffer, Graph, ParameterStore};
use crate::error::{Error, Result};
use crate::model::{Codec, ModelConfig, Task};
use crate::routing::BIAS_LEVELS;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub stage: u8,
    /// Side path trained in stage 2.
    pub task: Task,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch: usize,
    /// Square training crop size (multiple of 16).
    pub crop: usize,
    pub eval_every: usize,
    /// `synthetic`, `grating`, `regions`, or a directory of PPMs.
    pub dataset: String,
    /// `default` or `tiny` (stage 1 only).
    pub model: String,
    /// Enables the adversarial term for the second half of stage 1.
    pub gan: bool,
    /// Steps used to fit a missing frozen task model before stage 2.
    pub task_steps: usize,
    /// Input checkpoint (required for stage 2).
    pub base: Option<PathBuf>,
    pub output: PathBuf,
    pub metrics: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            stage: 1,
            task: Task::Mse,
            steps: 20_000,
            lr: 1e-3,
            seed: 0,
            batch: 2,
            crop: 32,
            eval_every: 500,
            dataset: "synthetic".into(),
            model: "default".into(),
            gan: true,
            task_steps: 600,
            base: None,
            output: PathBuf::from("model.mpaw"),
            metrics: None,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::config(format!("key '{key}': cannot parse '{value}' as {want}"))
}

fn num<V: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<V> {
    value.parse().map_err(|_| bad(key, value, want))
}

impl TrainRun {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut run = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected key = value", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "stage" => {
                    run.stage = num(k, v, "1 or 2")?;
                    if !(1..=2).contains(&run.stage) {
                        return Err(bad(k, v, "1 or 2"));
                    }
                }
                "task" => run.task = v.parse().map_err(|_| bad(k, v, "mse|cls|seg"))?,
                "steps" => run.steps = num(k, v, "a step count")?,
                "lr" => run.lr = num(k, v, "a learning rate")?,
                "seed" => run.seed = num(k, v, "an integer seed")?,
                "batch" => run.batch = num(k, v, "a batch size")?,
                "crop" => run.crop = num(k, v, "a crop size")?,
                "eval_every" => run.eval_every = num(k, v, "a step count")?,
                "dataset" => run.dataset = v.to_string(),
                "model" => run.model = v.to_string(),
                "gan" => run.gan = num(k, v, "true or false")?,
                "task_steps" => run.task_steps = num(k, v, "a step count")?,
                "base" => run.base = Some(PathBuf::from(v)),
                "output" => run.output = PathBuf::from(v),
                "metrics" => run.metrics = Some(PathBuf::from(v)),
                other => return Err(Error::config(format!("unknown key '{other}'"))),
            }
        }
        run.validate()?;
        Ok(run)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("key 'batch': must be positive"));
        }
        if self.crop == 0 || self.crop % crate::model::DOWNSCALE != 0 {
            return Err(Error::config("key 'crop': must be a positive multiple of 16"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("key 'lr': must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("key 'eval_every': must be positive"));
        }
        if self.stage == 2 && self.base.is_none() {
            return Err(Error::config("key 'base': stage 2 needs a stage-1 checkpoint"));
        }
        Ok(())
    }

    fn model_config(&self) -> Result<ModelConfig> {
        match self.model.as_str() {
            "default" => Ok(ModelConfig::default()),
            "tiny" => Ok(ModelConfig::tiny()),
            m => Err(Error::config(format!("key 'model': unknown model '{m}' (default|tiny)"))),
        }
    }
}

/// One line of the metrics log: interval means of the training terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub bpp: f64,
    /// Mean squared error in 8-bit units.
    pub mse: f64,
    pub proxy_perc: f64,
    pub ratio_loss: f64,
    /// PSNR (stage 1 and the mse path) or task accuracy.
    pub task_metric: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step,bpp,mse,proxy_perc,ratio_loss,task_metric";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.bpp, self.mse, self.proxy_perc, self.ratio_loss, self.task_metric
        )
    }
}

pub fn psnr_from_mse255(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

#[derive(Default)]
struct Interval {
    n: usize,
    sum: Terms,
    metric: f64,
}

impl Interval {
    fn add(&mut self, t: &Terms, metric: f64) {
        self.n += 1;
        self.sum.rate += t.rate;
        self.sum.distortion += t.distortion;
        self.sum.perceptual += t.perceptual;
        self.sum.ratio += t.ratio;
        self.metric += metric;
    }

    fn flush(&mut self, step: usize) -> MetricsRow {
        let n = self.n.max(1) as f64;
        let mse = self.sum.distortion / n / 0.01;
        let row = MetricsRow {
            step,
            bpp: self.sum.rate / n,
            mse,
            proxy_perc: self.sum.perceptual / n,
            ratio_loss: self.sum.ratio / n,
            task_metric: self.metric / n,
        };
        *self = Self::default();
        row
    }
}

/// Fresh stage-1 parameters (codec and discriminator).
pub fn init_stage1(config: ModelConfig, seed: u64) -> Result<(Codec, ParameterStore<f32>)> {
    let codec = Codec::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    codec.init(&mut store, &mut rng)?;
    Discriminator {
        latent_channels: codec.config.latent_channels(),
    }
    .init(&mut store, &mut rng)?;
    Ok((codec, store))
}

/// Joint optimisation of analysis, synthesis, entropy model and
/// discriminator; the adversarial term is on for the second half when
/// `run.gan` is set. Discriminator steps use only the discriminator loss and
/// generator steps never touch discriminator parameters.
pub fn train_stage1(
    codec: &Codec,
    store: &mut ParameterStore<f32>,
    run: &TrainRun,
    log: &mut dyn FnMut(&MetricsRow),
) -> Result<()> {
    run.validate()?;
    let weights = LossWeights::default();
    let proxy = PerceptualProxy::new();
    let obj = Objective::new(codec, &weights, &proxy);
    if !Discriminator::is_registered(store) {
        return Err(Error::config("store has no discriminator"));
    }
    let data = DataSource::from_spec(&run.dataset)?;
    let levels = codec.config.levels.min(weights.rate.len());
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5741_4745_0001);
    let (mut opt_g, mut opt_d) = (Adam::new(), Adam::new());
    let mut acc = Interval::default();
    for step in 0..run.steps {
        let gan = run.gan && step * 2 >= run.steps;
        let lr = step_lr(run.lr, step, run.steps);
        let (mut gg, mut gd) = (GradBuffer::new(), GradBuffer::new());
        for _ in 0..run.batch {
            let level = rng.gen_range(0..levels);
            let sample = data.draw(&mut rng, run.crop)?;
            let x = sample.image.to_tensor();
            let g = Graph::new();
            let out = obj.stage1(&g, store, &x, level, gan, Estimators::TRAIN, &mut rng)?;
            gg.accumulate_all(g.backward(out.loss)?.params());
            if let Some(ld) = out.disc_loss {
                gd.accumulate_all(g.backward(ld)?.params());
            }
            acc.add(&out.terms, psnr_from_mse255(out.terms.distortion / 0.01));
        }
        let inv = 1.0 / run.batch as f32;
        gg.scale(inv);
        opt_g.step(store, &gg, lr, |n| !Discriminator::is_param(n))?;
        if !gd.is_empty() {
            gd.scale(inv);
            opt_d.step(store, &gd, lr, Discriminator::is_param)?;
        }
        if (step + 1) % run.eval_every == 0 || step + 1 == run.steps {
            log(&acc.flush(step + 1));
        }
    }
    Ok(())
}

/// Outcome of a stage-2 run.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Report {
    pub trainable_decoder: usize,
    pub total_decoder: usize,
    pub digest_before: [u8; 32],
    pub digest_after: [u8; 32],
}

impl Stage2Report {
    pub fn fraction(&self) -> f64 {
        self.trainable_decoder as f64 / self.total_decoder.max(1) as f64
    }
}

/// Adds the side path, predictors and (for analysis tasks) a frozen task
/// model, then marks only the new routing parameters trainable.
pub fn prepare_stage2(
    codec: &Codec,
    store: &mut ParameterStore<f32>,
    task: Task,
    seed: u64,
    task_steps: usize,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5349_4445);
    if !codec.is_task_registered(store, task) {
        codec.register_task(store, task, &mut rng)?;
    }
    if task != Task::Mse {
        let model = TaskModel::new(task)?;
        if !model.is_registered(store) {
            let fitted = model.pretrain(task_steps, 32, seed ^ 0x7461_736b)?;
            store.merge_from(&fitted)?;
        }
    }
    let names: std::collections::HashSet<String> = codec.task_param_names(task).into_iter().collect();
    store.train_only(|n| names.contains(n));
    Ok(())
}

fn stage2_source(run: &TrainRun) -> Result<DataSource> {
    if run.dataset == "synthetic" {
        return Ok(DataSource::Synthetic(match run.task {
            Task::Mse => TextureKind::Mixed,
            Task::Cls => TextureKind::Grating,
            Task::Seg => TextureKind::Regions,
        }));
    }
    DataSource::from_spec(&run.dataset)
}

/// Trains the side path of `run.task`; everything else stays bit-identical.
pub fn train_stage2(
    codec: &Codec,
    store: &mut ParameterStore<f32>,
    run: &TrainRun,
    log: &mut dyn FnMut(&MetricsRow),
) -> Result<Stage2Report> {
    run.validate()?;
    let task = run.task;
    prepare_stage2(codec, store, task, run.seed, run.task_steps)?;
    let weights = LossWeights::default();
    let proxy = PerceptualProxy::new();
    let obj = Objective::new(codec, &weights, &proxy);
    let data = stage2_source(run)?;
    let levels = codec.config.levels.min(weights.rate.len());
    let model = (task != Task::Mse).then(|| TaskModel::new(task)).transpose()?;
    let digest_before = store.frozen_digest();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5741_4745_0002);
    let mut opt = Adam::new();
    let mut acc = Interval::default();
    for step in 0..run.steps {
        let lr = step_lr(run.lr, step, run.steps);
        let mut grads = GradBuffer::new();
        for _ in 0..run.batch {
            let q_level = rng.gen_range(0..levels);
            let a_level = rng.gen_range(0..BIAS_LEVELS);
            let sample = data.draw(&mut rng, run.crop)?;
            let g = Graph::new();
            let out = obj.stage2(&g, store, &sample, q_level, a_level, task, Estimators::TRAIN, &mut rng)?;
            grads.accumulate_all(g.backward(out.loss)?.params());
            let metric = match &model {
                None => psnr_from_mse255(out.terms.distortion / 0.01),
                Some(m) => {
                    let gi = Graph::inference();
                    let xh = g.value(out.x_hat).map(|v| v.clamp(0.0, 1.0));
                    accuracy(&m.predict(&gi, store, gi.constant(xh))?, &m.targets(&sample)?)
                }
            };
            acc.add(&out.terms, metric);
        }
        grads.scale(1.0 / run.batch as f32);
        opt.step(store, &grads, lr, |_| true)?;
        if (step + 1) % run.eval_every == 0 || step + 1 == run.steps {
            log(&acc.flush(step + 1));
        }
    }
    Ok(Stage2Report {
        trainable_decoder: store.count_trainable(Codec::is_decoder_param),
        total_decoder: store.count(Codec::is_decoder_param),
        digest_before,
        digest_after: store.frozen_digest(),
    })
}

/// Human-readable result of [`execute`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub lines: Vec<String>,
    pub report: Option<Stage2Report>,
}

/// Runs a configured stage end to end: loads/initialises parameters, trains,
/// writes the checkpoint and the metrics CSV.
pub fn execute(run: &TrainRun) -> Result<RunSummary> {
    run.validate()?;
    let mut csv = String::new();
    writeln!(csv, "{}", MetricsRow::HEADER).expect("string write");
    let mut log = |r: &MetricsRow| {
        writeln!(csv, "{}", r.csv()).expect("string write");
    };
    let mut lines = Vec::new();
    let (store, report) = if run.stage == 1 {
        let (codec, mut store) = match &run.base {
            Some(p) => {
                let store = load_base(p)?;
                (Codec::from_store(&store)?, store)
            }
            None => init_stage1(run.model_config()?, run.seed)?,
        };
        train_stage1(&codec, &mut store, run, &mut log)?;
        lines.push(format!("stage 1: {} steps", run.steps));
        (store, None)
    } else {
        let base = run.base.as_ref().expect("validated");
        let mut store = load_base(base)?;
        let codec = Codec::from_store(&store)?;
        let rep = train_stage2(&codec, &mut store, run, &mut log)?;
        lines.push(format!("stage 2 ({}): {} steps", run.task, run.steps));
        lines.push(format!(
            "trainable decoder parameters: {} / {} ({:.4}%)",
            rep.trainable_decoder,
            rep.total_decoder,
            100.0 * rep.fraction()
        ));
        if rep.digest_before != rep.digest_after {
            return Err(Error::Invariant("frozen parameters changed during stage 2".into()));
        }
        (store, Some(rep))
    };
    store.save(&run.output)?;
    lines.push(format!("checkpoint: {}", run.output.display()));
    if let Some(m) = &run.metrics {
        let mut f = fs::File::create(m)?;
        f.write_all(csv.as_bytes())?;
        lines.push(format!("metrics: {}", m.display()));
    }
    Ok(RunSummary { lines, report })
}

fn load_base(p: &Path) -> Result<ParameterStore<f32>> {
    if !p.exists() {
        return Err(Error::config(format!("key 'base': checkpoint {} does not exist", p.display())));
    }
    let mut store = ParameterStore::load(p)?;
    for id in store.ids().collect::<Vec<_>>() {
        let trainable = !TaskModel::is_param(store.name(id));
        store.set_trainable(id, trainable);
    }
    Ok(store)
}
