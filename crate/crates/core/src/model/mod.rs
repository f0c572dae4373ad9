//! Video classifiers: the hierarchical attention network, shared layer
//! plumbing and the checkpoint container.

mod checkpoint;
mod config;
mod params;
mod stan;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{StageKind, StanConfig, STAGE_KINDS};
pub use params::{
    init_tensor, BatchNorm, Builder, Conv, Ctx, Init, LayerNorm, Linear, Params, RunningStats,
    BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use stan::{
    grid_to_tokens, tokens_to_grid, Block, Dpe, Ffn, GlobalMhra, LocalMhra, Mixer, StanModel,
    StanTrace,
};

use crate::baseline::{CnnConfig, CnnModel};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Stan,
    Cnn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Stan => "stan",
            ModelKind::Cnn => "cnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stan" => Ok(ModelKind::Stan),
            "cnn" => Ok(ModelKind::Cnn),
            _ => Err(Error::UnknownModel(s.to_string())),
        }
    }
}

/// Logits plus the activation grid used as the class-activation target.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[num_classes]`
    pub logits: Var,
    /// `[C, a, b, c]`; channels first, then a 3D map that
    /// [`VideoModel::project_cam`] can bring to input resolution.
    pub cam: Var,
}

/// A differentiable classifier over `[3, T, H, W]` clips.
pub trait VideoModel<S: Scalar>: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> [usize; 4];
    fn params(&self) -> &Params<S>;
    fn params_mut(&mut self) -> &mut Params<S>;
    fn running(&self) -> &[RunningStats<S>];
    fn running_mut(&mut self) -> &mut [RunningStats<S>];
    fn forward(&self, ctx: &mut Ctx<S>, clip: Var) -> Result<Forward>;
    /// Maps a `[a, b, c]` activation map to a `[T, H, W]` per-pixel map.
    fn project_cam(&self, map: &[f64], map_shape: [usize; 3]) -> Result<Vec<f64>>;

    /// Checks that `shape` is this model's input shape.
    fn check_clip(&self, shape: &[usize]) -> Result<()> {
        let want = self.input_shape();
        if shape != want {
            return Err(Error::ShapeMismatch(format!(
                "model expects clip {want:?}, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Eval-mode logits without recording parameter gradients.
    fn predict(&self, clip: &Tensor<S>) -> Result<Vec<S>> {
        self.check_clip(clip.shape())?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, self.params(), self.running(), false, false);
        let x = ctx.tape.constant(clip.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    /// Folds training-mode batch statistics into the running averages.
    fn update_running(&mut self, stats: &[Option<crate::tensor::BatchStats<S>>]) {
        for (r, s) in self.running_mut().iter_mut().zip(stats) {
            if let Some(s) = s {
                r.update(s, BN_MOMENTUM);
            }
        }
    }
}

/// Architecture description of either model kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelConfig {
    Stan(StanConfig),
    Cnn(CnnConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Stan(_) => ModelKind::Stan,
            ModelConfig::Cnn(_) => ModelKind::Cnn,
        }
    }

    pub fn input_shape(&self) -> [usize; 4] {
        match self {
            ModelConfig::Stan(c) => c.input_shape(),
            ModelConfig::Cnn(c) => c.input_shape(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::Stan(c) => c.num_classes,
            ModelConfig::Cnn(c) => c.num_classes,
        }
    }
}

/// Either model kind behind one type, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel<S: Scalar = f32> {
    Stan(StanModel<S>),
    Cnn(CnnModel<S>),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Stan($m) => $e,
            AnyModel::Cnn($m) => $e,
        }
    };
}

impl<S: Scalar> AnyModel<S> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Stan(c) => AnyModel::Stan(StanModel::build(c, seed)?),
            ModelConfig::Cnn(c) => AnyModel::Cnn(CnnModel::build(c, seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            AnyModel::Stan(m) => ModelConfig::Stan(m.config().clone()),
            AnyModel::Cnn(m) => ModelConfig::Cnn(m.config().clone()),
        }
    }

    pub fn seed(&self) -> u64 {
        dispatch!(self, m => m.seed())
    }

    pub fn cast<T: Scalar>(&self) -> AnyModel<T> {
        match self {
            AnyModel::Stan(m) => AnyModel::Stan(m.cast()),
            AnyModel::Cnn(m) => AnyModel::Cnn(m.cast()),
        }
    }
}

impl<S: Scalar> VideoModel<S> for AnyModel<S> {
    fn kind(&self) -> ModelKind {
        dispatch!(self, m => m.kind())
    }
    fn num_classes(&self) -> usize {
        dispatch!(self, m => m.num_classes())
    }
    fn input_shape(&self) -> [usize; 4] {
        dispatch!(self, m => m.input_shape())
    }
    fn params(&self) -> &Params<S> {
        dispatch!(self, m => m.params())
    }
    fn params_mut(&mut self) -> &mut Params<S> {
        dispatch!(self, m => m.params_mut())
    }
    fn running(&self) -> &[RunningStats<S>] {
        dispatch!(self, m => m.running())
    }
    fn running_mut(&mut self) -> &mut [RunningStats<S>] {
        dispatch!(self, m => m.running_mut())
    }
    fn forward(&self, ctx: &mut Ctx<S>, clip: Var) -> Result<Forward> {
        dispatch!(self, m => m.forward(ctx, clip))
    }
    fn project_cam(&self, map: &[f64], map_shape: [usize; 3]) -> Result<Vec<f64>> {
        dispatch!(self, m => m.project_cam(map, map_shape))
    }
}

/// Separable linear resampling of a `[a, b, c]` grid to `to`, sampling at
/// pixel centers with edge clamping.
pub fn upsample_linear(src: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let mut cur = src.to_vec();
    let mut shape = from;
    for axis in 0..3 {
        let (n_in, n_out) = (shape[axis], to[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let taps: Vec<(usize, usize, f64)> = (0..n_out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, x - lo as f64)
            })
            .collect();
        let mut next = vec![0.0; outer * n_out * inner];
        for a in 0..outer {
            for (o, &(lo, hi, f)) in taps.iter().enumerate() {
                let dst = (a * n_out + o) * inner;
                let s_lo = (a * n_in + lo) * inner;
                let s_hi = (a * n_in + hi) * inner;
                for i in 0..inner {
                    next[dst + i] = cur[s_lo + i] * (1.0 - f) + cur[s_hi + i] * f;
                }
            }
        }
        cur = next;
        shape[axis] = n_out;
    }
    cur
}
