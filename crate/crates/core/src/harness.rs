//! Rate/distortion/task sweeps over an image set and mask dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{Graph, ParameterStore, Tensor};
use crate::entropy::{compress, decompress, Decompressed};
use crate::error::{Error, Result};
use crate::model::{Codec, Image, Task, DOWNSCALE};
use crate::train::{accuracy, mean_iou, psnr_from_mse255, Entry, PerceptualProxy, TaskModel};

/// Fixed column order of the sweep CSV.
pub const EVAL_HEADER: &str = "image,q,alpha,task,bpp_est,bpp_act,psnr,proxy_perc,task_metric";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub q: f64,
    pub alpha: f64,
    pub task: Task,
    pub bpp_est: f64,
    pub bpp_act: f64,
    pub psnr: f64,
    pub proxy_perc: f64,
    /// PSNR (mse), top-1 accuracy (cls) or mean IoU (seg).
    pub task_metric: f64,
}

impl EvalRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.4},{:.6},{:.6}",
            self.image, self.q, self.alpha, self.task, self.bpp_est, self.bpp_act, self.psnr, self.proxy_perc,
            self.task_metric
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{EVAL_HEADER}").expect("string write");
        for r in &self.rows {
            writeln!(s, "{}", r.csv()).expect("string write");
        }
        s
    }

    /// Mean of `f` over rows at `(q, alpha)`.
    pub fn mean_at(&self, q: f64, alpha: f64, f: impl Fn(&EvalRow) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.q == q && r.alpha == alpha).map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Mean squared error between two 8-bit images of equal extent.
pub fn mse_u8(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::Dimension("images differ in extent".into()));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.data.len() as f64)
}

/// PSNR of `b` against `a`, 8-bit peak.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse255(mse_u8(a, b)?))
}

fn task_metric(store: &ParameterStore<f32>, task: Task, entry: &Entry, dec: &Decompressed, psnr: f64) -> Result<f64> {
    if task == Task::Mse {
        return Ok(psnr);
    }
    let model = TaskModel::new(task)?;
    let g = Graph::inference();
    let pred = model.predict(&g, store, g.constant(dec.image.to_tensor()))?;
    let truth = model.targets(&entry.sample)?;
    Ok(match task {
        Task::Cls => accuracy(&pred, &truth),
        _ => mean_iou(&pred, &truth, model.classes()),
    })
}

/// Encodes every image once per `q` and decodes each container at every
/// `α`. Rows are ordered image, then q, then α.
pub fn evaluate(
    codec: &Codec,
    store: &ParameterStore<f32>,
    entries: &[Entry],
    q_grid: &[f64],
    alpha_grid: &[f64],
    task: Task,
) -> Result<EvalReport> {
    if task != Task::Mse {
        let model = TaskModel::new(task)?;
        if !model.is_registered(store) {
            return Err(Error::Config(format!("checkpoint has no frozen {task} model")));
        }
        for e in entries {
            if model.targets(&e.sample).is_err() {
                return Err(Error::Config(format!("image {} has no {task} labels", e.name)));
            }
        }
    }
    let proxy = PerceptualProxy::<f32>::new();
    let mut rows = Vec::with_capacity(entries.len() * q_grid.len() * alpha_grid.len());
    for e in entries {
        let src = &e.sample.image;
        let padded: Tensor<f32> = src.pad_to_multiple(DOWNSCALE).to_tensor();
        for &q in q_grid {
            let c = compress(codec, store, src, q)?;
            for &alpha in alpha_grid {
                let d = decompress(codec, store, &c.bytes, alpha, task, None)?;
                let p = psnr(src, &d.image)?;
                let g = Graph::inference();
                let rec = Image::from_tensor(&d.x_hat)?.to_tensor::<f32>();
                let perc = g.item(proxy.distance(&g, g.constant(padded.clone()), g.constant(rec))?) as f64;
                rows.push(EvalRow {
                    image: e.name.clone(),
                    q: d.quality,
                    alpha,
                    task,
                    bpp_est: c.bpp_estimated,
                    bpp_act: c.bpp_actual,
                    psnr: p,
                    proxy_perc: perc,
                    task_metric: task_metric(store, task, e, &d, p)?,
                });
            }
        }
    }
    Ok(EvalReport { rows })
}

/// Writes one PGM per routed decoder stage (shallowest first); white marks
/// main-path positions.
pub fn dump_masks(dec: &Decompressed, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(dec.masks.len());
    for (i, m) in dec.masks.iter().enumerate() {
        let p = dir.join(format!("mask_stage{}.pgm", i + 1));
        Image::new(m.width(), m.height(), 1, m.to_gray())?.save(&p)?;
        out.push(p);
    }
    Ok(out)
}

/// Parses a comma-separated list of reals.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let v: Result<Vec<f64>> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad grid value '{t}'")))
        })
        .collect();
    let v = v?;
    if v.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{init_stage1, texture_set, TextureKind};
    use crate::model::ModelConfig;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("1, 4.5,8").unwrap(), vec![1.0, 4.5, 8.0]);
        assert!(parse_grid("1,x").is_err());
    }

    #[test]
    fn sweep_cardinality_and_order() {
        let (codec, store) = init_stage1(ModelConfig::tiny(), 0).unwrap();
        let entries: Vec<Entry> = texture_set(1, TextureKind::Mixed, 24, 2)
            .into_iter()
            .enumerate()
            .map(|(i, sample)| Entry { name: format!("i{i}"), sample })
            .collect();
        let r = evaluate(&codec, &store, &entries, &[1.0, 8.0], &[0.0], Task::Mse).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.rows[1].image, "i0");
        assert_eq!(r.rows[1].q, 8.0);
        assert!(r.rows.iter().all(|row| row.psnr.is_finite() && row.bpp_act > 0.0));
        assert_eq!(r.to_csv().lines().next().unwrap(), EVAL_HEADER);
    }

    #[test]
    fn missing_labels_are_config_errors() {
        let (codec, store) = init_stage1(ModelConfig::tiny(), 0).unwrap();
        let entries = vec![Entry {
            name: "a".into(),
            sample: texture_set(1, TextureKind::Regions, 16, 1).remove(0),
        }];
        assert!(matches!(
            evaluate(&codec, &store, &entries, &[1.0], &[0.0], Task::Cls),
            Err(Error::Config(_))
        ));
    }
}
