use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ParameterStore, Real};
use crate::error::{Error, Result};
use crate::routing::PathKind;

/// Number of resolution stages; each halves the spatial extent.
pub const STAGES: usize = 4;
/// Stages (1-based) that route through main/side paths.
pub const ROUTED_STAGES: usize = 3;
/// Total downsampling factor.
pub const DOWNSCALE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature width per stage, shallow to deep.
    pub channels: [usize; STAGES],
    /// Blocks per stage, shallow to deep.
    pub blocks: [usize; STAGES],
    /// Width of the hyper-latent.
    pub hyper: usize,
    /// Discrete quality levels (`Q_max`).
    pub levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [32, 48, 64, 96],
            blocks: [1, 1, 2, 2],
            hyper: 48,
            levels: 8,
        }
    }
}

impl ModelConfig {
    /// Small configuration for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            channels: [4, 4, 4, 8],
            blocks: [1, 1, 1, 1],
            hyper: 4,
            levels: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c < 4 || c % 4 != 0) {
            return Err(Error::config(format!(
                "stage widths must be positive multiples of 4, got {:?}",
                self.channels
            )));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        if self.hyper == 0 || self.levels < 2 {
            return Err(Error::config("hyper width must be positive and levels >= 2"));
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        self.channels[STAGES - 1]
    }

    /// Recovers the configuration from parameter shapes.
    pub fn infer<T: Real>(store: &ParameterStore<T>) -> Result<Self> {
        let mut cfg = Self::default();
        for i in 0..STAGES {
            let w = store
                .get(&format!("enc.s{}.down.w", i + 1))
                .map_err(|_| Error::config("checkpoint is missing encoder stage weights"))?;
            cfg.channels[i] = w.shape()[3];
            let mut n = 0;
            while store.contains(&format!("enc.s{}.b{}.sf", i + 1, n + 1)) {
                n += 1;
            }
            cfg.blocks[i] = n;
        }
        cfg.hyper = store
            .get("hyper.ha.c1.w")
            .map_err(|_| Error::config("checkpoint is missing hyperprior weights"))?
            .shape()[3];
        cfg.levels = store
            .get("enc.latent_sf")
            .map_err(|_| Error::config("checkpoint is missing latent scaling table"))?
            .shape()[0];
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Decoder side-path selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Mse,
    Cls,
    Seg,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Mse, Task::Cls, Task::Seg];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mse => "mse",
            Task::Cls => "cls",
            Task::Seg => "seg",
        }
    }

    /// Inverted paths for human viewing, bottlenecks for analysis tasks.
    pub fn path_kind(self) -> PathKind {
        match self {
            Task::Mse => PathKind::InvertedBottleneck,
            Task::Cls | Task::Seg => PathKind::Bottleneck,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::domain(format!("unknown task index {i}")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Task::Mse),
            "cls" => Ok(Task::Cls),
            "seg" => Ok(Task::Seg),
            _ => Err(Error::domain(format!("unknown task {s:?} (expected mse, cls or seg)"))),
        }
    }
}
