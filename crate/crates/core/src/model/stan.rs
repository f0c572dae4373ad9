//! Four-stage UniFormer-style classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{StageKind, StanConfig, STAGE_KINDS};
use super::params::{BatchNorm, Builder, Conv, Ctx, Init, LayerNorm, Linear, Params, RunningStats};
use super::{Forward, ModelKind, VideoModel};
use crate::tensor::{Scalar, Var};
use crate::Result;

const LINEAR_STD: f64 = 0.02;

/// `[C, t, h, w]` grid to `[N, C]` tokens.
pub fn grid_to_tokens<S: Scalar>(ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    let n: usize = s[1..].iter().product();
    let flat = ctx.tape.reshape(x, &[s[0], n])?;
    Ok(ctx.tape.permute(flat, &[1, 0])?)
}

/// Inverse of [`grid_to_tokens`] for the grid shape `shape`.
pub fn tokens_to_grid<S: Scalar>(ctx: &mut Ctx<S>, t: Var, shape: &[usize]) -> Result<Var> {
    let cn = ctx.tape.permute(t, &[1, 0])?;
    Ok(ctx.tape.reshape(cn, shape)?)
}

/// Residual depthwise convolution injecting position information.
#[derive(Clone, Debug, PartialEq)]
pub struct Dpe {
    pub conv: Conv,
}

impl Dpe {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, c: usize, k: [usize; 3]) -> Self {
        let pad = k.map(|v| v / 2);
        Self {
            conv: b.conv(name, c, c, k, [1, 1, 1], pad, c, Init::Zeros),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let y = ctx.conv(x, &self.conv)?;
        Ok(ctx.tape.add(x, y)?)
    }
}

/// Local relation aggregator: BN, pointwise, depthwise neighborhood
/// affinity, pointwise; residual.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalMhra {
    pub norm: BatchNorm,
    pub pw1: Conv,
    pub dw: Conv,
    pub pw2: Conv,
}

impl LocalMhra {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, c: usize, k: [usize; 3]) -> Self {
        let one = [1, 1, 1];
        let zero = [0, 0, 0];
        Self {
            norm: b.batch_norm(&format!("{name}.norm"), c),
            pw1: b.conv(&format!("{name}.pw1"), c, c, one, one, zero, 1, Init::FanIn),
            dw: b.conv(&format!("{name}.dw"), c, c, k, one, k.map(|v| v / 2), c, Init::FanIn),
            pw2: b.conv(&format!("{name}.pw2"), c, c, one, one, zero, 1, Init::Zeros),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let y = ctx.batch_norm(x, &self.norm)?;
        let y = ctx.conv(y, &self.pw1)?;
        let y = ctx.conv(y, &self.dw)?;
        let y = ctx.conv(y, &self.pw2)?;
        Ok(ctx.tape.add(x, y)?)
    }
}

/// Global relation aggregator: multi-head self-attention over every token of
/// the grid; residual.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMhra {
    pub norm: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl GlobalMhra {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, c: usize, heads: usize) -> Self {
        Self {
            norm: b.layer_norm(&format!("{name}.norm"), c),
            qkv: b.linear(&format!("{name}.qkv"), c, 3 * c, Init::TruncNormal(LINEAR_STD)),
            proj: b.linear(&format!("{name}.proj"), c, c, Init::Zeros),
            heads,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x)?.0)
    }

    /// Output grid and the `[heads, N, N]` attention weights.
    pub fn forward_traced<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<(Var, Var)> {
        let shape = ctx.tape.shape(x).to_vec();
        let c = shape[0];
        let (h, d) = (self.heads, c / self.heads);
        let tok = grid_to_tokens(ctx, x)?;
        let n = ctx.tape.shape(tok)[0];
        let t = ctx.layer_norm(tok, &self.norm)?;
        let qkv = ctx.linear(t, &self.qkv)?;
        let qkv = ctx.tape.reshape(qkv, &[n, 3, h, d])?;
        let qkv = ctx.tape.permute(qkv, &[1, 2, 0, 3])?;
        let q = ctx.tape.select(qkv, 0)?;
        let k = ctx.tape.select(qkv, 1)?;
        let v = ctx.tape.select(qkv, 2)?;
        let kt = ctx.tape.permute(k, &[0, 2, 1])?;
        let logits = ctx.tape.matmul(q, kt)?;
        let logits = ctx.tape.scale(logits, 1.0 / (d as f64).sqrt());
        let attn = ctx.tape.softmax(logits)?;
        let o = ctx.tape.matmul(attn, v)?;
        let o = ctx.tape.permute(o, &[1, 0, 2])?;
        let o = ctx.tape.reshape(o, &[n, c])?;
        let o = ctx.linear(o, &self.proj)?;
        let o = tokens_to_grid(ctx, o, &shape)?;
        Ok((ctx.tape.add(x, o)?, attn))
    }
}

/// Two-layer GELU MLP over layer-normalized tokens; residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, c: usize, hidden: usize) -> Self {
        Self {
            norm: b.layer_norm(&format!("{name}.norm"), c),
            fc1: b.linear(&format!("{name}.fc1"), c, hidden, Init::TruncNormal(LINEAR_STD)),
            fc2: b.linear(&format!("{name}.fc2"), hidden, c, Init::Zeros),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let tok = grid_to_tokens(ctx, x)?;
        let t = ctx.layer_norm(tok, &self.norm)?;
        let t = ctx.linear(t, &self.fc1)?;
        let t = ctx.tape.gelu(t);
        let t = ctx.linear(t, &self.fc2)?;
        let y = tokens_to_grid(ctx, t, &shape)?;
        Ok(ctx.tape.add(x, y)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    Local(LocalMhra),
    Global(GlobalMhra),
}

/// DPE, then MHRA, then FFN, each with its own residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub dpe: Dpe,
    pub mixer: Mixer,
    pub ffn: Ffn,
}

impl Block {
    pub fn new<S: Scalar>(
        b: &mut Builder<S>,
        name: &str,
        kind: StageKind,
        c: usize,
        heads: usize,
        cfg: &StanConfig,
    ) -> Self {
        let dpe = Dpe::new(b, &format!("{name}.dpe"), c, cfg.dpe_kernel);
        let mixer = match kind {
            StageKind::Local => Mixer::Local(LocalMhra::new(
                b,
                &format!("{name}.mhra"),
                c,
                cfg.local_neighborhood,
            )),
            StageKind::Global => Mixer::Global(GlobalMhra::new(b, &format!("{name}.mhra"), c, heads)),
        };
        let ffn = Ffn::new(b, &format!("{name}.ffn"), c, c * cfg.ffn_expansion);
        Self { dpe, mixer, ffn }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let x = self.dpe.forward(ctx, x)?;
        let x = match &self.mixer {
            Mixer::Local(m) => m.forward(ctx, x)?,
            Mixer::Global(m) => m.forward(ctx, x)?,
        };
        self.ffn.forward(ctx, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Arch {
    stem: Conv,
    /// Downsampling convolutions entering stages 2, 3 and 4.
    transitions: Vec<Conv>,
    stages: Vec<Vec<Block>>,
    head: Linear,
}

/// Token grids and logits of one traced forward pass.
#[derive(Clone, Debug)]
pub struct StanTrace {
    pub stem: Var,
    pub stages: [Var; 4],
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StanModel<S: Scalar = f32> {
    config: StanConfig,
    seed: u64,
    arch: Arch,
    params: Params<S>,
    running: Vec<RunningStats<S>>,
}

impl<S: Scalar> StanModel<S> {
    /// Builds and initializes the network. Identical `(config, seed)` gives
    /// bit-identical parameters.
    pub fn build(config: &StanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng);
        let ch = config.stage_channels;
        let stem = b.conv("stem", 3, ch[0], [3, 4, 4], [2, 4, 4], [1, 0, 0], 1, Init::FanIn);
        let mut transitions = Vec::new();
        let mut stages = Vec::new();
        for (s, kind) in STAGE_KINDS.iter().enumerate() {
            if s > 0 {
                transitions.push(b.conv(
                    &format!("transition{s}"),
                    ch[s - 1],
                    ch[s],
                    [1, 2, 2],
                    [1, 2, 2],
                    [0, 0, 0],
                    1,
                    Init::FanIn,
                ));
            }
            let blocks = (0..config.stage_blocks[s])
                .map(|i| {
                    Block::new(
                        &mut b,
                        &format!("stage{}.block{i}", s + 1),
                        *kind,
                        ch[s],
                        config.heads[s],
                        config,
                    )
                })
                .collect();
            stages.push(blocks);
        }
        let head = b.linear("head", ch[3], config.num_classes, Init::TruncNormal(LINEAR_STD));
        let running = b.running_stats();
        Ok(Self {
            config: config.clone(),
            seed,
            arch: Arch {
                stem,
                transitions,
                stages,
                head,
            },
            params: b.params,
            running,
        })
    }

    pub fn config(&self) -> &StanConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cast<T: Scalar>(&self) -> StanModel<T> {
        StanModel {
            config: self.config.clone(),
            seed: self.seed,
            arch: self.arch.clone(),
            params: self.params.cast(),
            running: self.running.iter().map(RunningStats::cast).collect(),
        }
    }

    pub fn blocks(&self, stage: usize) -> &[Block] {
        &self.arch.stages[stage]
    }

    pub fn stem(&self, ctx: &mut Ctx<S>, clip: Var) -> Result<Var> {
        self.check_clip(ctx.tape.shape(clip))?;
        ctx.conv(clip, &self.arch.stem)
    }

    pub fn stage_transition(&self, ctx: &mut Ctx<S>, stage: usize, x: Var) -> Result<Var> {
        ctx.conv(x, &self.arch.transitions[stage - 1])
    }

    pub fn trace(&self, ctx: &mut Ctx<S>, clip: Var) -> Result<StanTrace> {
        let stem = self.stem(ctx, clip)?;
        let mut x = stem;
        let mut outs = Vec::with_capacity(4);
        for (s, blocks) in self.arch.stages.iter().enumerate() {
            if s > 0 {
                x = self.stage_transition(ctx, s, x)?;
            }
            for block in blocks {
                x = block.forward(ctx, x)?;
            }
            outs.push(x);
        }
        let pooled = ctx.tape.avg_pool_all(x)?;
        let c = self.config.stage_channels[3];
        let row = ctx.tape.reshape(pooled, &[1, c])?;
        let logits = ctx.linear(row, &self.arch.head)?;
        let logits = ctx.tape.reshape(logits, &[self.config.num_classes])?;
        Ok(StanTrace {
            stem,
            stages: [outs[0], outs[1], outs[2], outs[3]],
            logits,
        })
    }
}

impl<S: Scalar> VideoModel<S> for StanModel<S> {
    fn kind(&self) -> ModelKind {
        ModelKind::Stan
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
            cam: t.stages[3],
        })
    }

    fn project_cam(&self, map: &[f64], map_shape: [usize; 3]) -> Result<Vec<f64>> {
        let [_, t, h, w] = self.config.input_shape();
        Ok(super::upsample_linear(map, map_shape, [t, h, w]))
    }
}
