//! Cross-validated training, threshold calibration and evaluation over a
//! grid of model kinds, views and explanation methods.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    frame_f1, video_f1, CellReport, Counts, FoldAudit, FrameMethodReport, FrameRecord, MetricsReport, VideoRecord,
    REPORT_FORMAT, REPORT_VERSION,
};
use super::split::SplitSpec;
use super::{argmax, train_model, TrainConfig, TrainLog};
use crate::baseline::CnnConfig;
use crate::manifest::{load_clip, ClipEntry, Manifest, Split};
use crate::model::{AnyModel, ModelConfig, ModelKind, StanConfig, VideoModel};
use crate::saliency::{
    calibrate_threshold, classify_frames, explain, extend_scores, frame_scores, ExplainConfig, Method, SaliencyVolume,
    SampleMap,
};
use crate::tensor::Tensor;
use crate::video::sample_frames;
use crate::views::{apply_view, View};
use crate::{Error, Result};

/// A clip turned into model input: view applied and, for the attention
/// model on long clips, uniformly sampled.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub label: usize,
    pub input: Tensor<f32>,
    pub sampled: Option<SampleMap>,
    /// Ground truth for every frame of the original clip.
    pub importance: Vec<bool>,
}

/// Architecture for `kind` on clips of `frames` frames.
pub fn model_config(kind: ModelKind, manifest: &Manifest, frames: usize, cfg: &TrainConfig) -> Result<ModelConfig> {
    let k = manifest.num_classes;
    let c = match kind {
        ModelKind::Stan => ModelConfig::Stan(StanConfig {
            height: manifest.height,
            width: manifest.width,
            ..StanConfig::desk(k, frames.min(cfg.stan_frames))
        }),
        ModelKind::Cnn => ModelConfig::Cnn(CnnConfig {
            height: manifest.height,
            width: manifest.width,
            ..CnnConfig::desk(k, frames)
        }),
    };
    match &c {
        ModelConfig::Stan(s) => s.validate()?,
        ModelConfig::Cnn(s) => s.validate()?,
    }
    Ok(c)
}

pub fn prepare_clip(
    entry: &ClipEntry,
    clip: &Tensor<f32>,
    config: &ModelConfig,
    view: View,
    cfg: &TrainConfig,
) -> Result<Prepared> {
    let v = apply_view(view, clip, &entry.keypoints, &cfg.view_params)?;
    let want = config.input_shape()[1];
    let (input, sampled) = if entry.frames > want {
        let (short, indices) = sample_frames(&v, want)?;
        (
            short,
            Some(SampleMap {
                indices,
                length: entry.frames,
            }),
        )
    } else {
        (v, None)
    };
    Ok(Prepared {
        id: entry.id.clone(),
        label: entry.label,
        input,
        sampled,
        importance: entry.importance_mask(),
    })
}

impl Prepared {
    /// Explains the prepared model input.
    pub fn explain(&self, model: &AnyModel<f32>, class: usize, method: Method, cfg: &ExplainConfig) -> Result<SaliencyVolume> {
        explain(model, &self.input, class, method, cfg)
    }
}

/// Loads and prepares the clips at `indices` in parallel, preserving order.
pub fn prepare_clips(
    manifest: &Manifest,
    base: &Path,
    indices: &[usize],
    config: &ModelConfig,
    view: View,
    cfg: &TrainConfig,
) -> Result<Vec<Prepared>> {
    indices
        .par_iter()
        .map(|&i| {
            let e = &manifest.clips[i];
            prepare_clip(e, &load_clip(base, e)?, config, view, cfg)
        })
        .collect()
}

/// Common clip length of the manifest.
fn clip_frames(manifest: &Manifest) -> Result<usize> {
    let f = manifest
        .clips
        .first()
        .ok_or_else(|| Error::Manifest("manifest lists no clips".into()))?
        .frames;
    if manifest.clips.iter().any(|c| c.frames != f) {
        return Err(Error::Manifest("clips differ in length".into()));
    }
    Ok(f)
}

/// Rejects a model whose input cannot be fed from the manifest's clips:
/// frame size must match, and the clips must be at least as long as the
/// model input (exactly as long for the CNN, which never samples).
pub fn check_fits(config: &ModelConfig, manifest: &Manifest) -> Result<()> {
    let [_, t, h, w] = config.input_shape();
    let frames = clip_frames(manifest)?;
    let length_ok = match config.kind() {
        ModelKind::Stan => frames >= t,
        ModelKind::Cnn => frames == t,
    };
    if h != manifest.height || w != manifest.width || !length_ok {
        return Err(Error::ShapeMismatch(format!(
            "{} model takes {t} frames of {h}x{w}, manifest clips are {frames} frames of {}x{}",
            config.kind(),
            manifest.height,
            manifest.width
        )));
    }
    if config.num_classes() != manifest.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "model has {} classes, manifest {}",
            config.num_classes(),
            manifest.num_classes
        )));
    }
    Ok(())
}

/// Settings and outcome of a train-split run, stored beside its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecord {
    pub dataset_id: String,
    pub train: TrainConfig,
    pub train_clips: Vec<String>,
    pub log: TrainLog,
}

/// Trains on the manifest's train split.
pub fn train_holdout(manifest: &Manifest, base: &Path, cfg: &TrainConfig) -> Result<(AnyModel<f32>, TrainRecord)> {
    cfg.validate()?;
    let config = model_config(cfg.model, manifest, clip_frames(manifest)?, cfg)?;
    let idx = manifest.indices_in(Split::Train);
    if idx.is_empty() {
        return Err(Error::Manifest("no clips in the train split".into()));
    }
    let prepared = prepare_clips(manifest, base, &idx, &config, cfg.view, cfg)?;
    let refs: Vec<&Prepared> = prepared.iter().collect();
    let (model, log) = train_fold(&config, &refs, cfg, cfg.seed)?;
    let record = TrainRecord {
        dataset_id: manifest.dataset_id.clone(),
        train: cfg.clone(),
        train_clips: prepared.into_iter().map(|p| p.id).collect(),
        log,
    };
    Ok((model, record))
}

/// Evaluates a train-split model on the test split, calibrating frame
/// thresholds on the train split.
pub fn evaluate_holdout(
    model: &AnyModel<f32>,
    record: &TrainRecord,
    manifest: &Manifest,
    base: &Path,
    methods: &[Method],
    explain_cfg: &ExplainConfig,
) -> Result<(CellReport, FoldOutput)> {
    let config = model.config();
    check_fits(&config, manifest)?;
    let cfg = &record.train;
    let (train_idx, test_idx) = (manifest.indices_in(Split::Train), manifest.indices_in(Split::Test));
    if test_idx.is_empty() {
        return Err(Error::Manifest("no clips in the test split".into()));
    }
    let train = prepare_clips(manifest, base, &train_idx, &config, cfg.view, cfg)?;
    let test = prepare_clips(manifest, base, &test_idx, &config, cfg.view, cfg)?;
    let (tr, te): (Vec<&Prepared>, Vec<&Prepared>) = (train.iter().collect(), test.iter().collect());
    let mut out = evaluate_split(model, cfg.view, 0, &tr, &te, methods, explain_cfg)?;
    out.audit.final_loss = Some(record.log.final_loss());
    let cell = cell_report(
        model.kind(),
        cfg.view,
        config.input_shape()[1],
        manifest.num_classes,
        methods,
        std::slice::from_ref(&out),
    );
    Ok((cell, out))
}

pub fn train_fold(
    config: &ModelConfig,
    train: &[&Prepared],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(AnyModel<f32>, TrainLog)> {
    let mut model = AnyModel::build(config, seed)?;
    let inputs: Vec<Tensor<f32>> = train.iter().map(|p| p.input.clone()).collect();
    let labels: Vec<usize> = train.iter().map(|p| p.label).collect();
    let log = train_model(&mut model, &inputs, &labels, cfg)?;
    Ok((model, log))
}

/// Predicted class and full-length frame scores of one clip.
fn score_clip(model: &AnyModel<f32>, p: &Prepared, method: Method, explain_cfg: &ExplainConfig) -> Result<(usize, Vec<f64>)> {
    let predicted = argmax(&model.predict(&p.input)?);
    let series = frame_scores(&p.explain(model, predicted, method, explain_cfg)?)?;
    let scores = match &p.sampled {
        Some(m) => extend_scores(&series.scores, &m.indices, m.length)?,
        None => series.scores,
    };
    Ok((predicted, scores))
}

/// Raw predictions of one trained model on one train/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldOutput {
    pub fold: usize,
    pub video: Vec<VideoRecord>,
    pub frames: Vec<FrameRecord>,
    pub thresholds: Vec<(Method, f64)>,
    pub audit: FoldAudit,
}

/// Classifies the test clips, then for each method calibrates the frame
/// threshold on the train clips and applies it to the test clips. The
/// explained class is the model's prediction.
pub fn evaluate_split(
    model: &AnyModel<f32>,
    view: View,
    fold: usize,
    train: &[&Prepared],
    test: &[&Prepared],
    methods: &[Method],
    explain_cfg: &ExplainConfig,
) -> Result<FoldOutput> {
    let kind = model.kind();
    let train_ids: HashSet<&str> = train.iter().map(|p| p.id.as_str()).collect();
    let overlap = test.iter().filter(|p| train_ids.contains(p.id.as_str())).count();
    let predicted: Vec<usize> = test
        .par_iter()
        .map(|p| Ok(argmax(&model.predict(&p.input)?)))
        .collect::<Result<_>>()?;
    let video = test
        .iter()
        .zip(&predicted)
        .map(|(p, &pred)| VideoRecord {
            model: kind,
            view,
            fold,
            clip: p.id.clone(),
            label: p.label,
            predicted: pred,
        })
        .collect();
    let mut frames = Vec::new();
    let mut thresholds = Vec::new();
    for &method in methods {
        let calib: Vec<(Vec<f64>, Vec<bool>)> = train
            .par_iter()
            .map(|p| Ok((score_clip(model, p, method, explain_cfg)?.1, p.importance.clone())))
            .collect::<Result<_>>()?;
        let theta = calibrate_threshold(&calib)?.threshold;
        thresholds.push((method, theta));
        let scored: Vec<Vec<f64>> = test
            .par_iter()
            .map(|p| Ok(score_clip(model, p, method, explain_cfg)?.1))
            .collect::<Result<_>>()?;
        for (p, scores) in test.iter().zip(scored) {
            let pred = classify_frames(&scores, theta);
            for (t, ((&score, &predicted), &important)) in scores.iter().zip(&pred).zip(&p.importance).enumerate() {
                frames.push(FrameRecord {
                    model: kind,
                    view,
                    method,
                    fold,
                    clip: p.id.clone(),
                    label: p.label,
                    frame: t,
                    important,
                    score,
                    threshold: theta,
                    predicted,
                });
            }
        }
    }
    Ok(FoldOutput {
        fold,
        video,
        frames,
        thresholds,
        audit: FoldAudit {
            fold,
            train_clips: train.len(),
            test_clips: test.len(),
            overlap,
            final_loss: None,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub models: Vec<ModelKind>,
    pub views: Vec<View>,
    pub methods: Vec<Method>,
    pub split: SplitSpec,
    /// Shared training settings; `model` and `view` are set per cell.
    pub train: TrainConfig,
    pub explain: ExplainConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::Stan],
            views: crate::views::VIEWS.to_vec(),
            methods: vec![Method::Vanilla, Method::SmoothGrad, Method::GradCam],
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.views.is_empty() {
            return Err(Error::Config("grid needs at least one model and one view".into()));
        }
        self.train.validate()
    }
}

/// Everything a grid run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub video: Vec<VideoRecord>,
    pub frames: Vec<FrameRecord>,
    pub logs: Vec<(ModelKind, View, usize, TrainLog)>,
}

/// Trains and evaluates every (model, view) cell on every fold. Folds run in
/// parallel; records are emitted in (cell, fold) order.
pub fn run_experiment_grid(manifest: &Manifest, base: &Path, grid: &GridConfig) -> Result<ExperimentOutput> {
    grid.validate()?;
    let frames = clip_frames(manifest)?;
    let plan = grid.split.plan(manifest)?;
    let all: Vec<usize> = (0..manifest.clips.len()).collect();
    let mut cells = Vec::new();
    let (mut video, mut frame_records, mut logs) = (Vec::new(), Vec::new(), Vec::new());
    for &kind in &grid.models {
        for &view in &grid.views {
            let cfg = TrainConfig {
                model: kind,
                view,
                ..grid.train.clone()
            };
            let config = model_config(kind, manifest, frames, &cfg)?;
            let prepared = prepare_clips(manifest, base, &all, &config, view, &cfg)?;
            let folds: Vec<(FoldOutput, TrainLog)> = (0..plan.num_folds)
                .into_par_iter()
                .map(|fold| {
                    let train: Vec<&Prepared> = plan.train_indices(fold).into_iter().map(|i| &prepared[i]).collect();
                    let test: Vec<&Prepared> = plan.test_indices(fold).into_iter().map(|i| &prepared[i]).collect();
                    let seed = cfg.seed.wrapping_add(fold as u64);
                    let (model, log) = train_fold(&config, &train, &cfg, seed)?;
                    log::info!(
                        "{kind} {view} fold {fold}: final loss {:.4}, train accuracy {:.3}",
                        log.final_loss(),
                        log.epochs.last().map_or(0.0, |e| e.accuracy)
                    );
                    let mut out = evaluate_split(&model, view, fold, &train, &test, &grid.methods, &grid.explain)?;
                    out.audit.final_loss = Some(log.final_loss());
                    Ok((out, log))
                })
                .collect::<Result<_>>()?;
            let (outs, fold_logs): (Vec<FoldOutput>, Vec<TrainLog>) = folds.into_iter().unzip();
            cells.push(cell_report(kind, view, config.input_shape()[1], manifest.num_classes, &grid.methods, &outs));
            for (out, log) in outs.into_iter().zip(fold_logs) {
                logs.push((kind, view, out.fold, log));
                video.extend(out.video);
                frame_records.extend(out.frames);
            }
        }
    }
    Ok(ExperimentOutput {
        report: metrics_report(manifest, frames, grid.split.describe(), cells),
        video,
        frames: frame_records,
        logs,
    })
}

pub fn metrics_report(manifest: &Manifest, sequence_length: usize, protocol: String, cells: Vec<CellReport>) -> MetricsReport {
    MetricsReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        dataset_id: manifest.dataset_id.clone(),
        sequence_length,
        num_classes: manifest.num_classes,
        protocol,
        cells,
    }
}

/// Pools the fold outputs of one (model, view) cell.
pub fn cell_report(
    model: ModelKind,
    view: View,
    input_frames: usize,
    num_classes: usize,
    methods: &[Method],
    folds: &[FoldOutput],
) -> CellReport {
    let video: Vec<VideoRecord> = folds.iter().flat_map(|f| f.video.iter().cloned()).collect();
    let frames = methods
        .iter()
        .map(|&m| {
            let recs: Vec<&FrameRecord> = folds
                .iter()
                .flat_map(|f| f.frames.iter())
                .filter(|r| r.method == m)
                .collect();
            let mut all_pos = Counts::default();
            recs.iter().for_each(|r| all_pos.add(true, r.important));
            FrameMethodReport {
                method: m,
                f1: frame_f1(recs.iter().copied(), num_classes),
                always_positive: all_pos.f1(),
                thresholds: folds
                    .iter()
                    .flat_map(|f| f.thresholds.iter().filter(|(mm, _)| *mm == m).map(|(_, t)| *t))
                    .collect(),
            }
        })
        .collect();
    CellReport {
        model,
        view,
        input_frames,
        video: video_f1(&video, num_classes),
        frames,
        folds: folds.iter().map(|f| f.audit.clone()).collect(),
    }
}
