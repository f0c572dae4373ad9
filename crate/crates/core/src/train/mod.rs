//! Training loop, cross-validation and the experiment grid.

mod experiment;
mod metrics;
mod optim;
mod split;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use experiment::{
    cell_report, check_fits, evaluate_holdout, evaluate_split, metrics_report, model_config, prepare_clip, prepare_clips,
    run_experiment_grid, train_fold, train_holdout, ExperimentOutput, FoldOutput, GridConfig, Prepared, TrainRecord,
};
pub use metrics::{
    cell_csv, f1, frame_f1, from_csv, render_tables, to_csv, video_f1, CellReport, Counts, F1Summary, FoldAudit,
    FrameMethodReport, FrameRecord, MetricsReport, VideoRecord, REPORT_FORMAT, REPORT_VERSION,
};
pub use optim::{adamw_step, clip_grad_norm, AdamState, AdamW, CosineSchedule};
pub use split::{kfold, leave_one_group_out, SplitPlan, SplitSpec};

use crate::model::{AnyModel, Ctx, ModelKind, VideoModel};
use crate::tensor::{BatchStats, Tape, Tensor};
use crate::views::{View, ViewParams};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub view: View,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: AdamW,
    pub grad_clip: f64,
    pub seed: u64,
    /// Frames the attention model sees; longer clips are sampled uniformly.
    pub stan_frames: usize,
    pub view_params: ViewParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Stan,
            view: View::GlobalLocal,
            epochs: 30,
            warmup_epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: AdamW::default(),
            grad_clip: 1.0,
            seed: 0,
            stan_frames: 20,
            view_params: ViewParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup of {} epochs exceeds {} total",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return bad("learning_rate and grad_clip must be positive".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if self.stan_frames < 2 || self.stan_frames % 2 != 0 {
            return bad(format!("stan_frames {} must be even and >= 2", self.stan_frames));
        }
        let v = &self.view_params;
        if !(v.alpha > 0.0 && v.alpha < 1.0) || v.roi_margin < 0.0 {
            return bad(format!("invalid view parameters {v:?}"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base: self.learning_rate,
            warmup: self.warmup_epochs as f64,
            total: self.epochs as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    }
}

/// Loss, parameter gradients and BN statistics of one training clip.
pub struct SampleGrad {
    pub loss: f64,
    pub correct: bool,
    pub grads: Vec<Tensor<f32>>,
    pub stats: Vec<Option<BatchStats<f32>>>,
}

pub fn sample_grad(model: &AnyModel<f32>, clip: &Tensor<f32>, label: usize) -> Result<SampleGrad> {
    model.check_clip(clip.shape())?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, model.params(), model.running(), true, true);
    let x = ctx.tape.constant(clip.clone());
    let out = model.forward(&mut ctx, x)?;
    let vars = ctx.param_vars().to_vec();
    let stats = ctx.take_stats();
    let k = tape.shape(out.logits)[0];
    let logits = tape.value(out.logits).data().to_vec();
    let row = tape.reshape(out.logits, &[1, k])?;
    let loss = tape.cross_entropy(row, &[label])?;
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params().values())
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(SampleGrad {
        loss: tape.value(loss).item() as f64,
        correct: argmax(&logits) == label,
        grads,
        stats,
    })
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax<S: PartialOrd + Copy>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Minibatch AdamW training. Per-clip gradients are computed in parallel
/// and summed in batch order, so results do not depend on thread count.
pub fn train_model(
    model: &mut AnyModel<f32>,
    inputs: &[Tensor<f32>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::Argument(format!(
            "{} training clips with {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let schedule = cfg.schedule();
    let mut state = AdamState::new(model.params());
    let steps_per_epoch = inputs.len().div_ceil(cfg.batch_size);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let m = &*model;
            let results: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&i| sample_grad(m, &inputs[i], labels[i]))
                .collect::<Result<_>>()?;
            let mut grads = results[0].grads.clone();
            for r in &results[1..] {
                for (g, s) in grads.iter_mut().zip(&r.grads) {
                    g.data_mut().iter_mut().zip(s.data()).for_each(|(a, &b)| *a += b);
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let pos = epoch as f64 + (step as f64 + 0.5) / steps_per_epoch as f64;
            lr = schedule.at(pos);
            adamw_step(model.params_mut(), &grads, &mut state, &cfg.optimizer, lr);
            for r in &results {
                model.update_running(&r.stats);
                loss_sum += r.loss;
                correct += r.correct as usize;
            }
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / inputs.len() as f64,
            accuracy: correct as f64 / inputs.len() as f64,
            learning_rate: lr,
        });
    }
    Ok(log)
}
