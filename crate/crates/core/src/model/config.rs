use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Token mixer used by the blocks of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Local,
    Global,
}

pub const STAGE_KINDS: [StageKind; 4] = [
    StageKind::Local,
    StageKind::Local,
    StageKind::Global,
    StageKind::Global,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StanConfig {
    pub num_classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub stage_channels: [usize; 4],
    pub stage_blocks: [usize; 4],
    /// Attention heads per stage; only the global stages use them.
    pub heads: [usize; 4],
    pub local_neighborhood: [usize; 3],
    pub dpe_kernel: [usize; 3],
    pub ffn_expansion: usize,
}

impl StanConfig {
    /// Reduced widths and depths for CPU-scale experiments.
    pub fn desk(num_classes: usize, frames: usize) -> Self {
        Self::with_widths(num_classes, frames, 32, 32, [16, 32, 64, 128], [1, 1, 2, 1])
    }

    pub fn paper(num_classes: usize) -> Self {
        Self::with_widths(num_classes, 16, 224, 224, [64, 128, 320, 512], [3, 4, 8, 3])
    }

    pub fn with_widths(
        num_classes: usize,
        frames: usize,
        height: usize,
        width: usize,
        stage_channels: [usize; 4],
        stage_blocks: [usize; 4],
    ) -> Self {
        Self {
            num_classes,
            frames,
            height,
            width,
            stage_channels,
            stage_blocks,
            heads: stage_channels.map(|c| (c / 32).max(1)),
            local_neighborhood: [5, 5, 5],
            dpe_kernel: [3, 3, 3],
            ffn_expansion: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.frames == 0 || self.frames % 2 != 0 {
            return bad(format!("frames {} must be positive and divisible by 2", self.frames));
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 32 != 0 {
                return bad(format!("{name} {v} must be positive and divisible by 32"));
            }
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "stage_channels {:?} must be positive and strictly increasing",
                self.stage_channels
            ));
        }
        if self.stage_blocks.contains(&0) {
            return bad("stage_blocks must be positive".into());
        }
        for (s, kind) in STAGE_KINDS.iter().enumerate() {
            let (c, h) = (self.stage_channels[s], self.heads[s]);
            if h == 0 {
                return bad(format!("stage {} head count must be positive", s + 1));
            }
            if *kind == StageKind::Global && c % h != 0 {
                return bad(format!(
                    "stage {} channels {c} not divisible by {h} heads",
                    s + 1
                ));
            }
        }
        for (name, k) in [
            ("local_neighborhood", self.local_neighborhood),
            ("dpe_kernel", self.dpe_kernel),
        ] {
            if k.iter().any(|&v| v % 2 == 0) {
                return bad(format!("{name} {k:?} must have odd extents"));
            }
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion must be positive".into());
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [3, self.frames, self.height, self.width]
    }

    /// `[C, T/2, H/2^(s+2), W/2^(s+2)]` for stage `s` in `0..4`.
    pub fn stage_shape(&self, s: usize) -> [usize; 4] {
        let f = 1 << (s + 2);
        [
            self.stage_channels[s],
            self.frames / 2,
            self.height / f,
            self.width / f,
        ]
    }
}
