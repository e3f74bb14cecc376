//! Tiny frozen analysis models: a 2-class orientation classifier and a
//! 3-class per-pixel pattern segmenter, with input normalisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{texture, DataSource, Sample, TextureKind, CLS_CLASSES, SEG_CLASSES};
use crate::autodiff::{Adam, GradBuffer, Graph, ParameterStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::model::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskModel {
    pub task: Task,
}

impl TaskModel {
    pub fn new(task: Task) -> Result<Self> {
        match task {
            Task::Cls | Task::Seg => Ok(Self { task }),
            Task::Mse => Err(Error::config("the mse task has no analysis model")),
        }
    }

    fn name(&self, n: &str) -> String {
        format!("task.{}.{n}", self.task.name())
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with("task.")
    }

    pub fn classes(&self) -> usize {
        match self.task {
            Task::Cls => CLS_CLASSES,
            _ => SEG_CLASSES,
        }
    }

    pub fn is_registered<T: Real>(&self, store: &ParameterStore<T>) -> bool {
        store.contains(&self.name("head.w"))
    }

    fn kind(&self) -> TextureKind {
        match self.task {
            Task::Cls => TextureKind::Grating,
            _ => TextureKind::Regions,
        }
    }

    fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng, stats: [Vec<f64>; 2]) -> Result<()> {
        let (k, widths) = match self.task {
            Task::Cls => (3, [8, 16]),
            _ => (5, [8, 8]),
        };
        let mut cin = 3;
        for (i, &c) in widths.iter().enumerate() {
            store.insert(&self.name(&format!("c{}.w", i + 1)), init::uniform(rng, &[k, k, cin, c], k * k * cin), true)?;
            store.insert(&self.name(&format!("c{}.b", i + 1)), init::zeros(&[c]), true)?;
            cin = c;
        }
        store.insert(&self.name("head.w"), init::uniform(rng, &[cin, self.classes()], cin), true)?;
        store.insert(&self.name("head.b"), init::zeros(&[self.classes()]), true)?;
        let [mean, std] = stats;
        let shift: Vec<T> = mean.iter().map(|&m| T::of(-m)).collect();
        let gain: Vec<T> = std.iter().map(|&s| T::of(1.0 / s)).collect();
        store.insert(&self.name("norm.shift"), Tensor::new(vec![3], shift)?, false)?;
        store.insert(&self.name("norm.gain"), Tensor::new(vec![3], gain)?, false)?;
        Ok(())
    }

    /// Logits for an image `[H, W, 3]` in `[0, 1]`: `[1, 2]` for
    /// classification, `[H·W, 3]` for segmentation.
    pub fn logits<T: Real>(&self, g: &Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let p = |n: &str| g.named(store, &self.name(n));
        let h = g.mul_channels(g.add_channels(x, p("norm.shift")?)?, p("norm.gain")?)?;
        let stride = if self.task == Task::Cls { 2 } else { 1 };
        let h = g.gelu(g.conv2d(h, p("c1.w")?, Some(p("c1.b")?), stride)?);
        let h = g.gelu(g.conv2d(h, p("c2.w")?, Some(p("c2.b")?), stride)?);
        match self.task {
            Task::Cls => {
                let v = g.mean_positions(h);
                let l = g.linear(v, p("head.w")?, Some(p("head.b")?))?;
                g.reshape(l, &[1, self.classes()])
            }
            _ => {
                let shape = g.shape(h);
                let l = g.linear(h, p("head.w")?, Some(p("head.b")?))?;
                g.reshape(l, &[shape[0] * shape[1], self.classes()])
            }
        }
    }

    /// Class targets of `s` in the row order of [`TaskModel::logits`].
    pub fn targets(&self, s: &Sample) -> Result<Vec<usize>> {
        match self.task {
            Task::Cls => s
                .cls
                .map(|c| vec![c])
                .ok_or_else(|| Error::config("sample has no class label")),
            _ => s
                .seg
                .as_ref()
                .map(|m| m.iter().map(|&c| c as usize).collect())
                .ok_or_else(|| Error::config("sample has no segmentation map")),
        }
    }

    pub fn loss<T: Real>(&self, g: &Graph<T>, store: &ParameterStore<T>, x: Var, s: &Sample) -> Result<Var> {
        g.cross_entropy(self.logits(g, store, x)?, &self.targets(s)?)
    }

    /// Predicted class per logit row.
    pub fn predict<T: Real>(&self, g: &Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Vec<usize>> {
        let l = g.value(self.logits(g, store, x)?);
        let k = self.classes();
        Ok(l.data()
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Trains a fresh model on clean synthetic samples and returns its
    /// parameters, all frozen.
    pub fn pretrain(&self, steps: usize, size: usize, seed: u64) -> Result<ParameterStore<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = DataSource::Synthetic(self.kind());
        let stats = channel_stats(&(0..64).map(|_| texture(&mut rng, self.kind(), size)).collect::<Vec<_>>());
        let mut store = ParameterStore::new();
        self.init(&mut store, &mut rng, stats)?;
        let mut opt = Adam::new();
        let batch = 8;
        for step in 0..steps {
            let mut grads = GradBuffer::new();
            for _ in 0..batch {
                let s = source.draw(&mut rng, size)?;
                let g = Graph::new();
                let x = g.constant(s.image.to_tensor());
                let l = self.loss(&g, &store, x, &s)?;
                grads.accumulate_all(g.backward(l)?.params());
            }
            grads.scale(1.0 / batch as f32);
            let lr = if step * 4 >= steps * 3 { 3e-4 } else { 3e-3 };
            opt.step(&mut store, &grads, lr, |_| true)?;
        }
        store.freeze_all();
        Ok(store)
    }
}

/// Per-channel mean and standard deviation over a set of images.
pub fn channel_stats(samples: &[Sample]) -> [Vec<f64>; 2] {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for s in samples {
        for px in s.image.data.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(1e-6).sqrt())
        .collect();
    [mean, std]
}

/// Fraction of matching entries.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Mean intersection-over-union over classes present in either map.
pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut iou = Vec::new();
    for c in 0..classes {
        let inter = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count();
        let union = pred.iter().zip(truth).filter(|(p, t)| **p == c || **t == c).count();
        if union > 0 {
            iou.push(inter as f64 / union as f64);
        }
    }
    if iou.is_empty() {
        1.0
    } else {
        iou.iter().sum::<f64>() / iou.len() as f64
    }
}
