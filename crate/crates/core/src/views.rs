//! Global, local (ROI-masked) and blended input views built from keypoint
//! tracks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// One detected body joint in pixel coordinates (origin top-left).
/// Serialized as `[id, x, y, confidence]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(u32, f32, f32, f32)", into = "(u32, f32, f32, f32)")]
pub struct Joint {
    pub id: u32,
    pub x: f32,
    pub y: f32,
    pub confidence: f32,
}

impl From<(u32, f32, f32, f32)> for Joint {
    fn from((id, x, y, confidence): (u32, f32, f32, f32)) -> Self {
        Self { id, x, y, confidence }
    }
}

impl From<Joint> for (u32, f32, f32, f32) {
    fn from(j: Joint) -> Self {
        (j.id, j.x, j.y, j.confidence)
    }
}

/// Joints per frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointTrack {
    pub frames: Vec<Vec<Joint>>,
}

impl KeypointTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The track restricted to `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
        }
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

/// Per-frame rectangular region of interest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiMask {
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<Rect>,
}

impl RoiMask {
    pub fn full(frames: usize, height: usize, width: usize) -> Self {
        let r = Rect {
            x0: 0,
            y0: 0,
            x1: width - 1,
            y1: height - 1,
        };
        Self {
            height,
            width,
            boxes: vec![r; frames],
        }
    }

    pub fn contains(&self, frame: usize, x: usize, y: usize) -> bool {
        self.boxes[frame].contains(x, y)
    }
}

/// Bounding box of the confident joints of each frame, dilated by `margin`
/// times the box extent on every side and clamped to the frame. Frames
/// without a confident joint reuse the previous frame's box, or the first
/// valid box at the start of the sequence.
pub fn roi_mask(
    track: &KeypointTrack,
    height: usize,
    width: usize,
    margin: f64,
    confidence_floor: f64,
) -> Result<RoiMask> {
    if track.is_empty() {
        return Err(Error::Argument("keypoint track is empty".into()));
    }
    if margin < 0.0 || !margin.is_finite() {
        return Err(Error::Argument(format!("ROI margin {margin} must be >= 0")));
    }
    let raw: Vec<Option<Rect>> = track
        .frames
        .iter()
        .map(|joints| frame_box(joints, height, width, margin, confidence_floor))
        .collect();
    let first = raw
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or_else(|| Error::Argument("no frame has a joint above the confidence floor".into()))?;
    let mut prev = first;
    let boxes = raw
        .into_iter()
        .map(|b| {
            if let Some(b) = b {
                prev = b;
            }
            prev
        })
        .collect();
    Ok(RoiMask {
        height,
        width,
        boxes,
    })
}

fn frame_box(joints: &[Joint], height: usize, width: usize, margin: f64, floor: f64) -> Option<Rect> {
    let ok: Vec<&Joint> = joints
        .iter()
        .filter(|j| j.confidence as f64 >= floor)
        .collect();
    if ok.is_empty() {
        return None;
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&Joint) -> f32| {
        ok.iter().map(|j| g(j) as f64).fold(init, f)
    };
    let (min_x, max_x) = (fold(f64::min, f64::INFINITY, |j| j.x), fold(f64::max, f64::NEG_INFINITY, |j| j.x));
    let (min_y, max_y) = (fold(f64::min, f64::INFINITY, |j| j.y), fold(f64::max, f64::NEG_INFINITY, |j| j.y));
    let (dx, dy) = ((max_x - min_x) * margin, (max_y - min_y) * margin);
    let clamp = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64) as usize;
    Some(Rect {
        x0: clamp((min_x - dx).floor(), width),
        y0: clamp((min_y - dy).floor(), height),
        x1: clamp((max_x + dx).ceil(), width),
        y1: clamp((max_y + dy).ceil(), height),
    })
}

fn check_mask<S: Scalar>(clip: &Tensor<S>, mask: &RoiMask) -> Result<()> {
    let s = clip.shape();
    if s.len() != 4 || s[1] != mask.boxes.len() || s[2] != mask.height || s[3] != mask.width {
        return Err(Error::ShapeMismatch(format!(
            "mask for {} frames of {}x{} does not fit clip {s:?}",
            mask.boxes.len(),
            mask.height,
            mask.width
        )));
    }
    Ok(())
}

/// Copies ROI pixels and sets every other pixel to exactly zero.
pub fn make_local<S: Scalar>(clip: &Tensor<S>, mask: &RoiMask) -> Result<Tensor<S>> {
    check_mask(clip, mask)?;
    let s = clip.shape();
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = clip.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for f in 0..t {
            let r = mask.boxes[f];
            for y in 0..h {
                for x in 0..w {
                    if !r.contains(x, y) {
                        d[((ch * t + f) * h + y) * w + x] = S::zero();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `alpha * clip + (1 - alpha) * local`. Where `local` equals `clip` (the
/// ROI) the pixel is copied, so ROI pixels stay bit-identical for any alpha.
pub fn make_global_local<S: Scalar>(clip: &Tensor<S>, local: &Tensor<S>, alpha: f64) -> Result<Tensor<S>> {
    if clip.shape() != local.shape() {
        return Err(Error::ShapeMismatch(format!(
            "global {:?} and local {:?} clips differ",
            clip.shape(),
            local.shape()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!("blend weight {alpha} must lie in (0, 1)")));
    }
    let a = S::cast(alpha);
    let b = S::cast(1.0 - alpha);
    let mut out = clip.clone();
    for (o, &l) in out.data_mut().iter_mut().zip(local.data()) {
        if *o != l {
            *o = a * *o + b * l;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "global")]
    Global,
    #[serde(rename = "local")]
    Local,
    #[serde(rename = "global-local")]
    GlobalLocal,
}

pub const VIEWS: [View; 3] = [View::Global, View::Local, View::GlobalLocal];

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Global => "global",
            View::Local => "local",
            View::GlobalLocal => "global-local",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(View::Global),
            "local" => Ok(View::Local),
            "global-local" | "global+local" => Ok(View::GlobalLocal),
            _ => Err(Error::UnknownView(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewParams {
    pub roi_margin: f64,
    pub confidence_floor: f64,
    pub alpha: f64,
}

impl Default for ViewParams {
    fn default() -> Self {
        Self {
            roi_margin: 0.1,
            confidence_floor: 0.3,
            alpha: 0.5,
        }
    }
}

/// Builds the requested view of `clip` (the track is ignored for
/// [`View::Global`]).
pub fn apply_view<S: Scalar>(
    view: View,
    clip: &Tensor<S>,
    track: &KeypointTrack,
    params: &ViewParams,
) -> Result<Tensor<S>> {
    if view == View::Global {
        return Ok(clip.clone());
    }
    let s = clip.shape();
    if s.len() != 4 || track.len() != s[1] {
        return Err(Error::ShapeMismatch(format!(
            "keypoint track has {} frames, clip {s:?}",
            track.len()
        )));
    }
    let mask = roi_mask(track, s[2], s[3], params.roi_margin, params.confidence_floor)?;
    let local = make_local(clip, &mask)?;
    match view {
        View::Local => Ok(local),
        _ => make_global_local(clip, &local, params.alpha),
    }
}

