//! Patched-image CNN: a per-frame convolutional encoder whose feature maps
//! are tiled into one plane and classified by a small conv head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    upsample_linear, Builder, Conv, Ctx, Forward, Init, Linear, ModelKind, Params, RunningStats,
    VideoModel,
};
use crate::tensor::{Scalar, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub num_classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Widths of the three stride-2 encoder convolutions; the last is the
    /// per-frame feature depth.
    pub encoder_channels: [usize; 3],
    pub head_channels: usize,
    pub hidden: usize,
}

impl CnnConfig {
    pub fn desk(num_classes: usize, frames: usize) -> Self {
        Self {
            num_classes,
            frames,
            height: 32,
            width: 32,
            encoder_channels: [8, 16, 16],
            head_channels: 8,
            hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.frames == 0 {
            return bad("num_classes and frames must be positive".into());
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 8 != 0 {
                return bad(format!("{name} {v} must be positive and divisible by 8"));
            }
        }
        if self.encoder_channels.contains(&0) || self.head_channels == 0 || self.hidden == 0 {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [3, self.frames, self.height, self.width]
    }

    /// Spatial extent of one encoded frame.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }

    pub fn grid(&self) -> (usize, usize) {
        grid_dims(self.frames)
    }

    /// `[F, 1, rows*h, cols*w]`
    pub fn plane_shape(&self) -> [usize; 4] {
        let (rows, cols) = self.grid();
        let (h, w) = self.feature_size();
        [self.encoder_channels[2], 1, rows * h, cols * w]
    }

    fn flat_features(&self) -> usize {
        let p = self.plane_shape();
        self.head_channels * (p[2] / 2) * (p[3] / 2)
    }
}

/// Smallest near-square grid holding `t` tiles: `cols = ceil(sqrt t)`,
/// `rows = ceil(t / cols)`.
pub fn grid_dims(t: usize) -> (usize, usize) {
    let mut cols = (t as f64).sqrt() as usize;
    while cols * cols < t {
        cols += 1;
    }
    let cols = cols.max(1);
    (t.div_ceil(cols), cols)
}

/// Tile origin (row offset, column offset) of frame `f` in units of tiles.
pub fn tile_of(f: usize, cols: usize) -> (usize, usize) {
    (f / cols, f % cols)
}

/// Lays `[F, T, h, w]` frame maps row-major into `[F, 1, rows*h, cols*w]`.
pub fn tile<S: Scalar>(frames: &Tensor<S>) -> Result<Tensor<S>> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!("tile expects [F,T,h,w], got {s:?}")));
    }
    let (f, t, h, w) = (s[0], s[1], s[2], s[3]);
    let (rows, cols) = grid_dims(t);
    let (ph, pw) = (rows * h, cols * w);
    let mut out = Tensor::zeros(&[f, 1, ph, pw]);
    let src = frames.data();
    let dst = out.data_mut();
    for c in 0..f {
        for fr in 0..t {
            let (tr, tc) = tile_of(fr, cols);
            for y in 0..h {
                let s0 = ((c * t + fr) * h + y) * w;
                let d0 = (c * ph + tr * h + y) * pw + tc * w;
                dst[d0..d0 + w].copy_from_slice(&src[s0..s0 + w]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`tile`] for a plane holding `t` frames of `h x w`.
pub fn untile<S: Scalar>(plane: &Tensor<S>, t: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    let s = plane.shape();
    let (rows, cols) = grid_dims(t);
    if s.len() != 4 || s[1] != 1 || s[2] != rows * h || s[3] != cols * w {
        return Err(Error::ShapeMismatch(format!(
            "plane {s:?} does not hold {t} tiles of {h}x{w}"
        )));
    }
    let (f, ph, pw) = (s[0], s[2], s[3]);
    let src = plane.data();
    let mut out = Tensor::zeros(&[f, t, h, w]);
    let dst = out.data_mut();
    for c in 0..f {
        for fr in 0..t {
            let (tr, tc) = tile_of(fr, cols);
            for y in 0..h {
                let d0 = ((c * t + fr) * h + y) * w;
                let s0 = (c * ph + tr * h + y) * pw + tc * w;
                dst[d0..d0 + w].copy_from_slice(&src[s0..s0 + w]);
            }
        }
    }
    Ok(out)
}

/// Mean absolute value of each frame's tile across all channels of a
/// `[F, 1, PH, PW]` plane.
pub fn tile_scores<S: Scalar>(plane: &Tensor<S>, t: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let frames = untile(plane, t, h, w)?;
    let f = frames.shape()[0];
    let per = h * w;
    let mut raw = vec![0.0; t];
    for c in 0..f {
        for (fr, r) in raw.iter_mut().enumerate() {
            let s0 = (c * t + fr) * per;
            *r += frames.data()[s0..s0 + per]
                .iter()
                .map(|v| v.as_f64().abs())
                .sum::<f64>();
        }
    }
    let n = (f * per) as f64;
    Ok(raw.into_iter().map(|v| v / n).collect())
}

#[derive(Clone, Debug, PartialEq)]
struct Arch {
    encoder: [Conv; 3],
    head_conv: Conv,
    fc1: Linear,
    fc2: Linear,
}

/// Traced activations of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CnnTrace {
    /// `[F, T, h, w]` per-frame features.
    pub features: Var,
    /// `[F, 1, PH, PW]` patched image.
    pub plane: Var,
    /// ReLU output of the head convolution, `[head_channels, 1, PH, PW]`.
    pub head: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel<S: Scalar = f32> {
    config: CnnConfig,
    seed: u64,
    arch: Arch,
    params: Params<S>,
    running: Vec<RunningStats<S>>,
}

impl<S: Scalar> CnnModel<S> {
    pub fn build(config: &CnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng);
        let e = config.encoder_channels;
        let (k, s, p) = ([1, 3, 3], [1, 2, 2], [0, 1, 1]);
        let encoder = [
            b.conv("encoder.conv1", 3, e[0], k, s, p, 1, Init::FanIn),
            b.conv("encoder.conv2", e[0], e[1], k, s, p, 1, Init::FanIn),
            b.conv("encoder.conv3", e[1], e[2], k, s, p, 1, Init::FanIn),
        ];
        let head_conv = b.conv("head.conv", e[2], config.head_channels, k, [1, 1, 1], p, 1, Init::FanIn);
        let fc1 = b.linear("head.fc1", config.flat_features(), config.hidden, Init::FanIn);
        let fc2 = b.linear("head.fc2", config.hidden, config.num_classes, Init::TruncNormal(0.02));
        let running = b.running_stats();
        Ok(Self {
            config: config.clone(),
            seed,
            arch: Arch {
                encoder,
                head_conv,
                fc1,
                fc2,
            },
            params: b.params,
            running,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cast<T: Scalar>(&self) -> CnnModel<T> {
        CnnModel {
            config: self.config.clone(),
            seed: self.seed,
            arch: self.arch.clone(),
            params: self.params.cast(),
            running: self.running.iter().map(RunningStats::cast).collect(),
        }
    }

    /// Per-frame encoder: temporal kernel 1, so frames never mix.
    pub fn frame_encoder(&self, ctx: &mut Ctx<S>, clip: Var) -> Result<Var> {
        let mut x = clip;
        for conv in &self.arch.encoder {
            x = ctx.conv(x, conv)?;
            x = ctx.tape.relu(x);
        }
        Ok(x)
    }

    pub fn trace(&self, ctx: &mut Ctx<S>, clip: Var) -> Result<CnnTrace> {
        self.check_clip(ctx.tape.shape(clip))?;
        let features = self.frame_encoder(ctx, clip)?;
        let (rows, cols) = self.config.grid();
        let plane = ctx.tape.tile_frames(features, rows, cols)?;
        let h = ctx.conv(plane, &self.arch.head_conv)?;
        let head = ctx.tape.relu(h);
        let pooled = ctx.tape.max_pool3d(head, [1, 2, 2], [1, 2, 2])?;
        let n = ctx.tape.value(pooled).len();
        let flat = ctx.tape.reshape(pooled, &[1, n])?;
        let z = ctx.linear(flat, &self.arch.fc1)?;
        let z = ctx.tape.relu(z);
        let z = ctx.linear(z, &self.arch.fc2)?;
        let logits = ctx.tape.reshape(z, &[self.config.num_classes])?;
        Ok(CnnTrace {
            features,
            plane,
            head,
            logits,
        })
    }
}

impl<S: Scalar> VideoModel<S> for CnnModel<S> {
    fn kind(&self) -> ModelKind {
        ModelKind::Cnn
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_shape(&self) -> [usize; 4] {
        self.config.input_shape()
    }

    fn params(&self) -> &Params<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params<S> {
        &mut self.params
    }

    fn running(&self) -> &[RunningStats<S>] {
        &self.running
    }

    fn running_mut(&mut self) -> &mut [RunningStats<S>] {
        &mut self.running
    }

    fn forward(&self, ctx: &mut Ctx<S>, clip: Var) -> Result<Forward> {
        let t = self.trace(ctx, clip)?;
        Ok(Forward {
            logits: t.logits,
            cam: t.head,
        })
    }

    /// The map lives on the patched plane: cut it back into frames, then
    /// resample each frame to input resolution.
    fn project_cam(&self, map: &[f64], map_shape: [usize; 3]) -> Result<Vec<f64>> {
        let c = &self.config;
        let (h, w) = c.feature_size();
        let plane = Tensor::<f64>::new(vec![1, map_shape[0], map_shape[1], map_shape[2]], map.to_vec())?;
        let frames = untile(&plane, c.frames, h, w)?;
        Ok(upsample_linear(
            frames.data(),
            [c.frames, h, w],
            [c.frames, c.height, c.width],
        ))
    }
}

/// Full-length frame scores from the plain input gradient.
pub fn frame_scores_cnn<S: Scalar>(
    model: &CnnModel<S>,
    clip: &Tensor<S>,
    class: usize,
) -> Result<crate::saliency::FrameScoreSeries> {
    let v = crate::saliency::vanilla_grad(model, clip, class, Default::default())?;
    crate::saliency::frame_scores(&v)
}
