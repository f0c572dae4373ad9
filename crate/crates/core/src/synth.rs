//! Deterministic planted-signal video datasets.
//!
//! Each clip shows one yellow sprite over static clutter. Outside the active
//! window the sprite drifts inside a central box regardless of class; inside
//! the window it leaves the box and performs a class-specific motion. Frame
//! labels mark exactly the window.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::manifest::{encode_mask, ClipEntry, Manifest, Split};
use crate::tensor::Tensor;
use crate::video::write_clip;
use crate::views::{Joint, KeypointTrack};
use crate::{Error, Result};

pub const SPRITE_COLOR: [f32; 3] = [0.95, 0.9, 0.1];
const BACKGROUND: f32 = 0.15;
const CLUTTER_MAX: f64 = 0.6;
/// Sprite centers stay inside `[NEUTRAL_LO, NEUTRAL_HI]` (scaled to the frame)
/// outside the active window.
const NEUTRAL_LO: f64 = 13.0 / 32.0;
const NEUTRAL_HI: f64 = 19.0 / 32.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Upright sprite `(width, height)` in pixels.
    pub sprite_size: [usize; 2],
    /// Fraction of the frame covered by clutter blobs.
    pub clutter_density: f64,
    pub noise_sigma: f64,
    /// Active-window length range as a fraction of `frames`.
    pub window_fraction: [f64; 2],
    pub groups: usize,
    /// Fraction of each class assigned to the test split.
    pub holdout_fraction: f64,
    /// Probability that a frame's keypoints all fall below confidence 0.3.
    pub keypoint_dropout: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            clips_per_class: 50,
            frames: 20,
            height: 32,
            width: 32,
            sprite_size: [3, 6],
            clutter_density: 0.15,
            noise_sigma: 0.03,
            window_fraction: [0.25, 0.5],
            groups: 15,
            holdout_fraction: 0.2,
            keypoint_dropout: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Long-sequence preset.
    pub fn long() -> Self {
        Self {
            frames: 394,
            ..Self::default()
        }
    }

    pub fn total_clips(&self) -> usize {
        self.num_classes * self.clips_per_class
    }

    /// Inclusive window length bounds in frames.
    pub fn window_bounds(&self) -> (usize, usize) {
        let [lo, hi] = self.window_fraction;
        let t = self.frames as f64;
        (((lo * t).ceil() as usize).max(1), (hi * t).floor() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > 4 {
            return bad(format!("num_classes {} must be in 1..=4", self.num_classes));
        }
        if self.clips_per_class == 0 || self.frames == 0 || self.groups == 0 {
            return bad("clips_per_class, frames and groups must be positive".into());
        }
        if self.height < 16 || self.width < 16 {
            return bad("frames must be at least 16x16".into());
        }
        if self.sprite_size.contains(&0) || self.sprite_size.iter().any(|&s| s * 4 > self.height.min(self.width)) {
            return bad(format!("sprite size {:?} does not fit the frame", self.sprite_size));
        }
        let [lo, hi] = self.window_fraction;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("window_fraction {:?} must satisfy 0 < lo <= hi", self.window_fraction));
        }
        if hi > 1.0 {
            return bad(format!(
                "window of up to {hi} x {} frames is longer than the clip",
                self.frames
            ));
        }
        let (a, b) = self.window_bounds();
        if a > b || b > self.frames {
            return bad(format!(
                "window_fraction {:?} admits no window length within {} frames",
                self.window_fraction, self.frames
            ));
        }
        for (name, v) in [
            ("clutter_density", self.clutter_density),
            ("holdout_fraction", self.holdout_fraction),
            ("keypoint_dropout", self.keypoint_dropout),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} must lie in [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// One generated clip with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub index: usize,
    pub clip: Tensor<f32>,
    pub label: usize,
    pub importance: Vec<bool>,
    pub group: usize,
    pub keypoints: KeypointTrack,
    /// First active frame and window length.
    pub window: (usize, usize),
}

pub fn clip_id(index: usize) -> String {
    format!("clip-{index:04}")
}

fn clip_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Sprite center for frame `t` of an active window starting at `start`.
fn active_center(class: usize, t: usize, start: usize, phase: f64, neutral: (f64, f64), w: f64, h: f64) -> (f64, f64, bool) {
    let k = (t - start) as f64;
    let osc = (2.0 * PI * k / 6.0 + phase).sin();
    match class {
        // drop to the floor and lie down
        0 => (neutral.0, 0.82 * h, true),
        // wave near the top
        1 => (0.5 * w + 0.1 * w * osc, 0.17 * h, false),
        // bounce at the right edge
        2 => (0.81 * w, 0.5 * h + 0.1 * h * osc, false),
        // lean back to the left
        _ => (0.19 * w, 0.5 * h + 0.03 * h * osc, false),
    }
}

/// Generates clip `index` of the dataset. The clip's randomness depends only
/// on `(config.seed, index)`.
pub fn generate_clip(cfg: &SynthConfig, index: usize) -> SynthClip {
    let mut rng = clip_rng(cfg.seed, index as u64);
    let (t_len, h, w) = (cfg.frames, cfg.height, cfg.width);
    let label = index % cfg.num_classes;
    let group = index % cfg.groups;
    let (wmin, wmax) = cfg.window_bounds();
    let len = rng.random_range(wmin..=wmax);
    let start = rng.random_range(0..=t_len - len);
    let phase = rng.random_range(0.0..2.0 * PI);

    // static background with clutter blobs
    let plane = h * w;
    let mut bg = vec![[BACKGROUND; 3]; plane];
    let blobs = (cfg.clutter_density * plane as f64 / 9.0).round() as usize;
    for _ in 0..blobs {
        let color = [0; 3].map(|_| rng.random_range(0.0..CLUTTER_MAX) as f32);
        let (bx, by) = (rng.random_range(0..w - 2), rng.random_range(0..h - 2));
        for y in by..by + 3 {
            for x in bx..bx + 3 {
                bg[y * w + x] = color;
            }
        }
    }

    let (wf, hf) = (w as f64, h as f64);
    let (lo_x, hi_x) = (NEUTRAL_LO * wf, NEUTRAL_HI * wf);
    let (lo_y, hi_y) = (NEUTRAL_LO * hf, NEUTRAL_HI * hf);
    let mut pos = (rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y));
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut data = vec![0f32; 3 * t_len * plane];
    let mut frames = Vec::with_capacity(t_len);
    let mut importance = vec![false; t_len];
    for t in 0..t_len {
        pos.0 = (pos.0 + rng.random_range(-1.0..=1.0)).clamp(lo_x, hi_x);
        pos.1 = (pos.1 + rng.random_range(-1.0..=1.0)).clamp(lo_y, hi_y);
        let active = (start..start + len).contains(&t);
        importance[t] = active;
        let (cx, cy, lying) = if active {
            active_center(label, t, start, phase, pos, wf, hf)
        } else {
            (pos.0, pos.1, false)
        };
        let [sw, sh] = if lying {
            [cfg.sprite_size[1], cfg.sprite_size[0]]
        } else {
            cfg.sprite_size
        };
        let x0 = (cx.floor() as isize - (sw / 2) as isize).clamp(0, (w - sw) as isize) as usize;
        let y0 = (cy.floor() as isize - (sh / 2) as isize).clamp(0, (h - sh) as isize) as usize;
        let (x1, y1) = (x0 + sw - 1, y0 + sh - 1);

        for y in 0..h {
            for x in 0..w {
                let sprite = (x0..=x1).contains(&x) && (y0..=y1).contains(&y);
                let base = if sprite { SPRITE_COLOR } else { bg[y * w + x] };
                for (c, &v) in base.iter().enumerate() {
                    let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data[(c * t_len + t) * plane + y * w + x] = (v as f64 + n).clamp(0.0, 1.0) as f32;
                }
            }
        }

        let dropped = rng.random::<f64>() < cfg.keypoint_dropout;
        let conf = |r: &mut ChaCha8Rng| {
            if dropped {
                r.random_range(0.0..0.2)
            } else {
                r.random_range(0.8..1.0)
            }
        };
        let (mx, my) = ((x0 + x1) as f32 / 2.0, (y0 + y1) as f32 / 2.0);
        let pts = [
            (mx, my),
            (mx, y0 as f32),
            (mx, y1 as f32),
            (x0 as f32, my),
            (x1 as f32, my),
        ];
        frames.push(
            pts.iter()
                .enumerate()
                .map(|(id, &(x, y))| Joint {
                    id: id as u32,
                    x,
                    y,
                    confidence: conf(&mut rng),
                })
                .collect(),
        );
    }

    SynthClip {
        index,
        clip: Tensor::new(vec![3, t_len, h, w], data).expect("clip shape"),
        label,
        importance,
        group,
        keypoints: KeypointTrack { frames },
        window: (start, len),
    }
}

/// Every clip of the dataset, generated in parallel.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthClip>> {
    cfg.validate()?;
    Ok((0..cfg.total_clips())
        .into_par_iter()
        .map(|i| generate_clip(cfg, i))
        .collect())
}

/// Stratified train/test assignment: per class, a seeded shuffle sends
/// `round(holdout * n)` clips to the test split.
pub fn assign_splits(labels: &[usize], num_classes: usize, holdout: f64, seed: u64) -> Vec<Split> {
    let mut out = vec![Split::Train; labels.len()];
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let mut r = clip_rng(seed, u64::MAX - class as u64);
        idx.shuffle(&mut r);
        let n_test = (holdout * idx.len() as f64).round() as usize;
        for &i in &idx[..n_test] {
            out[i] = Split::Test;
        }
    }
    out
}

/// Manifest entries for generated clips (clip files under `clips/`).
pub fn manifest_for(cfg: &SynthConfig, clips: &[SynthClip]) -> Manifest {
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let splits = assign_splits(&labels, cfg.num_classes, cfg.holdout_fraction, cfg.seed);
    let mut m = Manifest::new(
        format!("synth-s{}-t{}-n{}", cfg.seed, cfg.frames, clips.len()),
        cfg.num_classes,
        cfg.height,
        cfg.width,
    );
    m.clips = clips
        .iter()
        .zip(splits)
        .map(|(c, split)| ClipEntry {
            id: clip_id(c.index),
            path: format!("clips/{}.stnv", clip_id(c.index)),
            label: c.label,
            importance: encode_mask(&c.importance),
            group: c.group,
            frames: cfg.frames,
            split,
            keypoints: c.keypoints.clone(),
        })
        .collect();
    m
}

/// Generates the dataset into `out`: `manifest.json` plus `clips/*.stnv`.
pub fn write_dataset(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    let clips = generate(cfg)?;
    let manifest = manifest_for(cfg, &clips);
    clips
        .par_iter()
        .zip(&manifest.clips)
        .try_for_each(|(c, e)| write_clip(&out.join(&e.path), &c.clip))?;
    manifest.write(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Reads the planted signal straight from pixels: a frame is active when
/// the centroid of sprite-colored pixels lies outside the neutral box.
pub fn planted_detector(clip: &Tensor<f32>) -> Vec<bool> {
    let s = clip.shape();
    let (t_len, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    let d = clip.data();
    let margin = 1.5;
    (0..t_len)
        .map(|t| {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let px = |c: usize| d[(c * t_len + t) * plane + y * w + x];
                    if px(0) > 0.75 && px(1) > 0.7 && px(2) < 0.35 {
                        sx += x as f64;
                        sy += y as f64;
                        n += 1.0;
                    }
                }
            }
            if n == 0.0 {
                return false;
            }
            let (cx, cy) = (sx / n, sy / n);
            let out = |v: f64, size: usize| {
                let s = size as f64;
                v < NEUTRAL_LO * s - margin || v > NEUTRAL_HI * s + margin
            };
            out(cx, w) || out(cy, h)
        })
        .collect()
}
