//! Gradient explanations and frame-importance scoring.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Ctx, VideoModel};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    SmoothGrad,
    GradCam,
}

pub const METHODS: [Method; 3] = [Method::Vanilla, Method::SmoothGrad, Method::GradCam];

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::SmoothGrad => "smoothgrad",
            Method::GradCam => "gradcam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "smoothgrad" => Ok(Method::SmoothGrad),
            "gradcam" => Ok(Method::GradCam),
            _ => Err(Error::UnknownMethod(s.to_string())),
        }
    }
}

/// Scalar that the input-gradient explainers differentiate. Grad-CAM always
/// uses the class logit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradTarget {
    /// Pre-softmax logit of the explained class.
    Logit,
    /// Cross-entropy loss with the explained class as target. Its gradient
    /// contrasts the class against the competing logits.
    #[default]
    Loss,
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(GradTarget::Logit),
            "loss" => Ok(GradTarget::Loss),
            _ => Err(Error::Argument(format!("unknown gradient target `{s}` (expected loss or logit)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothGradParams {
    pub n_samples: usize,
    /// Noise std as a fraction of the clip's value range.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SmoothGradParams {
    fn default() -> Self {
        Self {
            n_samples: 25,
            sigma: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub target: GradTarget,
    pub smoothgrad: SmoothGradParams,
}

/// Attribution per input element.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyVolume {
    /// Same shape as the explained clip.
    pub values: Tensor<f64>,
    pub method: Method,
    pub class: usize,
}

fn check_class<S: Scalar, M: VideoModel<S> + ?Sized>(model: &M, class: usize) -> Result<()> {
    if class >= model.num_classes() {
        return Err(Error::Argument(format!(
            "class {class} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

fn target_var<S: Scalar>(tape: &mut Tape<S>, logits: Var, class: usize, target: GradTarget) -> Result<Var> {
    Ok(match target {
        GradTarget::Logit => tape.pick(logits, class)?,
        GradTarget::Loss => {
            let k = tape.shape(logits)[0];
            let row = tape.reshape(logits, &[1, k])?;
            tape.cross_entropy(row, &[class])?
        }
    })
}

/// Gradient of the target with respect to the clip, in model precision.
fn input_gradient<S: Scalar, M: VideoModel<S> + ?Sized>(
    model: &M,
    clip: &Tensor<S>,
    class: usize,
    target: GradTarget,
) -> Result<Tensor<S>> {
    model.check_clip(clip.shape())?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, model.params(), model.running(), false, false);
    let x = ctx.tape.leaf(clip.clone(), true);
    let out = model.forward(&mut ctx, x)?;
    let y = target_var(&mut tape, out.logits, class, target)?;
    tape.backward(y)?;
    Ok(tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(clip.shape())))
}

pub fn vanilla_grad<S: Scalar, M: VideoModel<S> + ?Sized>(
    model: &M,
    clip: &Tensor<S>,
    class: usize,
    target: GradTarget,
) -> Result<SaliencyVolume> {
    check_class(model, class)?;
    let g = input_gradient(model, clip, class, target)?;
    Ok(SaliencyVolume {
        values: g.cast(),
        method: Method::Vanilla,
        class,
    })
}

/// The clip plus noise sample `i`: `N(0, (sigma * range)^2)` drawn from a
/// generator seeded with `seed` on stream `i`.
pub fn noisy_clip<S: Scalar>(clip: &Tensor<S>, sigma: f64, seed: u64, i: usize) -> Tensor<S> {
    let range = (clip.max_value() - clip.min_value()).as_f64();
    let std = sigma * range;
    if std == 0.0 {
        return clip.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let d = Normal::new(0.0, std).expect("finite std");
    let mut out = clip.clone();
    for v in out.data_mut() {
        *v += S::cast(d.sample(&mut rng));
    }
    out
}

pub fn smoothgrad<S: Scalar, M: VideoModel<S> + ?Sized>(
    model: &M,
    clip: &Tensor<S>,
    class: usize,
    params: &SmoothGradParams,
    target: GradTarget,
) -> Result<SaliencyVolume> {
    check_class(model, class)?;
    if params.n_samples == 0 {
        return Err(Error::Argument("smoothgrad needs at least one sample".into()));
    }
    if !(params.sigma >= 0.0) {
        return Err(Error::Argument(format!("smoothgrad sigma {} must be >= 0", params.sigma)));
    }
    let grads: Vec<Tensor<S>> = (0..params.n_samples)
        .into_par_iter()
        .map(|i| {
            let noisy = noisy_clip(clip, params.sigma, params.seed, i);
            input_gradient(model, &noisy, class, target)
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0f64; clip.len()];
    for g in &grads {
        for (s, &v) in sum.iter_mut().zip(g.data()) {
            *s += v.as_f64();
        }
    }
    let n = params.n_samples as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    Ok(SaliencyVolume {
        values: Tensor::new(clip.shape().to_vec(), sum)?,
        method: Method::SmoothGrad,
        class,
    })
}

/// `ReLU(sum_c mean(G_c) * A_c)` for `[C, ...]` activations `a` and their
/// gradients `g`, both flattened with `spatial` positions per channel.
pub fn gradcam_map(a: &[f64], g: &[f64], channels: usize, spatial: usize) -> Vec<f64> {
    let mut map = vec![0.0; spatial];
    for c in 0..channels {
        let gc = &g[c * spatial..(c + 1) * spatial];
        let w = gc.iter().sum::<f64>() / spatial as f64;
        for (m, &v) in map.iter_mut().zip(&a[c * spatial..(c + 1) * spatial]) {
            *m += w * v;
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    map
}

pub fn gradcam<S: Scalar, M: VideoModel<S> + ?Sized>(
    model: &M,
    clip: &Tensor<S>,
    class: usize,
) -> Result<SaliencyVolume> {
    check_class(model, class)?;
    model.check_clip(clip.shape())?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, model.params(), model.running(), false, false);
    // the clip requires grad so that the activation grid is on the gradient path
    let x = ctx.tape.leaf(clip.clone(), true);
    let out = model.forward(&mut ctx, x)?;
    let y = tape.pick(out.logits, class)?;
    tape.backward(y)?;
    let a = tape.value(out.cam);
    let s = a.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!("activation grid must be rank 4, got {s:?}")));
    }
    let spatial = s[1] * s[2] * s[3];
    let av: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let gv: Vec<f64> = match tape.grad(out.cam) {
        Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; av.len()],
    };
    let map = gradcam_map(&av, &gv, s[0], spatial);
    let full = model.project_cam(&map, [s[1], s[2], s[3]])?;
    let mut values = Vec::with_capacity(3 * full.len());
    for _ in 0..3 {
        values.extend_from_slice(&full);
    }
    Ok(SaliencyVolume {
        values: Tensor::new(clip.shape().to_vec(), values)?,
        method: Method::GradCam,
        class,
    })
}

pub fn explain<S: Scalar, M: VideoModel<S> + ?Sized>(
    model: &M,
    clip: &Tensor<S>,
    class: usize,
    method: Method,
    cfg: &ExplainConfig,
) -> Result<SaliencyVolume> {
    match method {
        Method::Vanilla => vanilla_grad(model, clip, class, cfg.target),
        Method::SmoothGrad => smoothgrad(model, clip, class, &cfg.smoothgrad, cfg.target),
        Method::GradCam => gradcam(model, clip, class),
    }
}

/// Per-frame importance in `[0, 1]`, optionally tied to the frames of a
/// longer sequence it was sampled from.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScoreSeries {
    pub scores: Vec<f64>,
    pub sampled: Option<SampleMap>,
}

/// Positions of scored frames inside a sequence of `length` frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMap {
    pub indices: Vec<usize>,
    pub length: usize,
}

/// Mean absolute attribution of each frame of a `[C, T, H, W]` volume.
pub fn raw_frame_scores(values: &Tensor<f64>) -> Result<Vec<f64>> {
    let s = values.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!("saliency volume must be [C,T,H,W], got {s:?}")));
    }
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    let d = values.data();
    let mut raw = vec![0.0; t];
    for ch in 0..c {
        for (f, r) in raw.iter_mut().enumerate() {
            let o = (ch * t + f) * plane;
            *r += d[o..o + plane].iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let n = (c * plane) as f64;
    raw.iter_mut().for_each(|r| *r /= n);
    Ok(raw)
}

/// Per-video min-max normalization; a constant series maps to 0.5.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|&r| (r - lo) / (hi - lo)).collect()
}

pub fn frame_scores(volume: &SaliencyVolume) -> Result<FrameScoreSeries> {
    Ok(FrameScoreSeries {
        scores: normalize_scores(&raw_frame_scores(&volume.values)?),
        sampled: None,
    })
}

pub fn classify_frames(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub threshold: f64,
    /// Pooled frame F1 on the calibration data at `threshold`.
    pub f1: f64,
    pub step: f64,
}

pub const THRESHOLD_STEPS: usize = 100;

/// Binary F1 from counts; 0 when there is nothing to score.
pub fn f1_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let d = 2 * tp + fp + fn_;
    if d == 0 {
        0.0
    } else {
        2.0 * tp as f64 / d as f64
    }
}

/// Sweeps `theta = i / 100` and keeps the smallest threshold with the
/// highest pooled F1 over all frames of all series.
pub fn calibrate_threshold<A: AsRef<[f64]>, B: AsRef<[bool]>>(set: &[(A, B)]) -> Result<ThresholdModel> {
    for (s, l) in set {
        if s.as_ref().len() != l.as_ref().len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores but {} labels",
                s.as_ref().len(),
                l.as_ref().len()
            )));
        }
    }
    let mut best = ThresholdModel {
        threshold: 0.0,
        f1: f64::NEG_INFINITY,
        step: 1.0 / THRESHOLD_STEPS as f64,
    };
    for i in 0..=THRESHOLD_STEPS {
        let theta = i as f64 / THRESHOLD_STEPS as f64;
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (s, l) in set {
            for (&score, &label) in s.as_ref().iter().zip(l.as_ref()) {
                match (score > theta, label) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        let f = f1_counts(tp, fp, fn_);
        if f > best.f1 {
            best.f1 = f;
            best.threshold = theta;
        }
    }
    Ok(best)
}

/// Gives each of `length` frames the score of its nearest sampled frame,
/// ties going to the earlier sample.
pub fn extend_scores(scores: &[f64], indices: &[usize], length: usize) -> Result<Vec<f64>> {
    if scores.len() != indices.len() || indices.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} sampled indices",
            scores.len(),
            indices.len()
        )));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) || *indices.last().expect("non-empty") >= length {
        return Err(Error::Argument(format!(
            "sampled indices must be strictly increasing and below {length}"
        )));
    }
    let mut out = Vec::with_capacity(length);
    let mut k = 0;
    for j in 0..length {
        while k + 1 < indices.len() && indices[k + 1] <= j {
            k += 1;
        }
        // ties go to the earlier sample
        let later = k + 1 < indices.len() && j > indices[k] && j - indices[k] > indices[k + 1] - j;
        let pick = if later { k + 1 } else { k };
        out.push(scores[pick]);
    }
    Ok(out)
}

pub fn extend_to_long(series: &FrameScoreSeries) -> Result<FrameScoreSeries> {
    let map = series
        .sampled
        .as_ref()
        .ok_or_else(|| Error::Argument("series carries no sample map".into()))?;
    Ok(FrameScoreSeries {
        scores: extend_scores(&series.scores, &map.indices, map.length)?,
        sampled: None,
    })
}

/// Structured description written next to exported saliency tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub method: Method,
    pub class: usize,
    pub threshold: Option<f64>,
    pub sampled_indices: Option<Vec<usize>>,
    pub important_frames: Option<Vec<usize>>,
}

/// Binary PPM: for every frame, the RGB input next to its grayscale
/// saliency (mean |attribution| over channels, scaled by the clip maximum),
/// frames laid out row-major on a near-square grid.
pub fn render_overlay(clip: &Tensor<f32>, volume: &SaliencyVolume) -> Result<Vec<u8>> {
    let s = clip.shape();
    if s.len() != 4 || s[0] != 3 || volume.values.shape() != s {
        return Err(Error::ShapeMismatch(format!(
            "overlay needs a [3,T,H,W] clip and matching volume, got {s:?} and {:?}",
            volume.values.shape()
        )));
    }
    let (t, h, w) = (s[1], s[2], s[3]);
    let (rows, cols) = crate::baseline::grid_dims(t);
    let (cell_w, cell_h) = (2 * w + 1, h + 1);
    let (img_w, img_h) = (cols * cell_w, rows * cell_h);
    let plane = h * w;
    let v = volume.values.data();
    let gray: Vec<f64> = (0..t * plane)
        .map(|i| {
            let (f, p) = (i / plane, i % plane);
            (0..3).map(|c| v[(c * t + f) * plane + p].abs()).sum::<f64>() / 3.0
        })
        .collect();
    let peak = gray.iter().copied().fold(0.0, f64::max);
    let mut px = vec![0u8; img_w * img_h * 3];
    let to_u8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    for f in 0..t {
        let (r, c) = (f / cols, f % cols);
        for y in 0..h {
            for x in 0..w {
                let row = r * cell_h + y;
                let left = (row * img_w + c * cell_w + x) * 3;
                for ch in 0..3 {
                    px[left + ch] = to_u8(clip.data()[(ch * t + f) * plane + y * w + x] as f64);
                }
                let g = if peak > 0.0 { gray[f * plane + y * w + x] / peak } else { 0.0 };
                let right = left + w * 3;
                px[right..right + 3].fill(to_u8(g));
            }
        }
    }
    let mut out = format!("P6\n{img_w} {img_h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}
