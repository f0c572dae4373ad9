//! Named parameter storage, initializers and the per-pass forward context.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{BatchStats, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Ordered, named trainable tensors. Indices handed out by [`Params::add`]
/// are stable and index both the store and a bound [`Ctx`].
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S = f32> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<S: Scalar> Params<S> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Tensor<S> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Order-sensitive FNV-1a hash over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (n, v) in self.names.iter().zip(&self.values) {
            eat(n.as_bytes());
            for &d in v.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &x in v.data() {
                eat(&x.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Replaces every value with the tensor of the same name from `other`,
    /// requiring identical names and shapes.
    pub fn load_from(&mut self, other: &Params<S>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint(
                "parameter names do not match the model configuration".into(),
            ));
        }
        for ((n, dst), src) in self.names.iter().zip(&mut self.values).zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {n}: expected shape {:?}, found {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S = f32> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }

    /// Exponential moving average with the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats<S>, momentum: f64) {
        let m = S::cast(momentum);
        let keep = S::one() - m;
        let n = batch.count as f64;
        let unbias = S::cast(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * batch.mean[c];
            self.var[c] = keep * self.var[c] + m * batch.var[c] * unbias;
        }
    }

    pub fn cast<T: Scalar>(&self) -> RunningStats<T> {
        RunningStats {
            mean: self.mean.iter().map(|v| T::cast(v.as_f64())).collect(),
            var: self.var.iter().map(|v| T::cast(v.as_f64())).collect(),
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// One forward pass: the tape, the parameters bound as tape leaves, and the
/// batch statistics observed by training-mode batch norms.
pub struct Ctx<'a, S: Scalar = f32> {
    pub tape: &'a mut Tape<S>,
    vars: Vec<Var>,
    running: &'a [RunningStats<S>],
    train: bool,
    stats: Vec<Option<BatchStats<S>>>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    /// Binds `params` onto `tape`. With `param_grads` false the parameters are
    /// constants and only the input can receive gradients.
    pub fn new(
        tape: &'a mut Tape<S>,
        params: &Params<S>,
        running: &'a [RunningStats<S>],
        train: bool,
        param_grads: bool,
    ) -> Self {
        let vars = params
            .values()
            .iter()
            .map(|t| tape.leaf(t.clone(), param_grads))
            .collect();
        Self {
            tape,
            vars,
            running,
            train,
            stats: vec![None; running.len()],
        }
    }

    /// Like [`Ctx::new`] with constant parameters, except parameter `idx`,
    /// which is bound to the existing var `var` (used to differentiate with
    /// respect to a single parameter tensor).
    pub fn with_override(
        tape: &'a mut Tape<S>,
        params: &Params<S>,
        running: &'a [RunningStats<S>],
        train: bool,
        idx: usize,
        var: Var,
    ) -> Self {
        let vars = params
            .values()
            .iter()
            .enumerate()
            .map(|(i, t)| if i == idx { var } else { tape.constant(t.clone()) })
            .collect();
        Self {
            tape,
            vars,
            running,
            train,
            stats: vec![None; running.len()],
        }
    }

    pub fn param(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Statistics gathered by each batch-norm layer (train mode only).
    pub fn take_stats(&mut self) -> Vec<Option<BatchStats<S>>> {
        std::mem::take(&mut self.stats)
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm) -> Result<Var> {
        let (g, b) = (self.vars[bn.scale], self.vars[bn.shift]);
        if self.train {
            let (y, st) = self.tape.batch_norm_train(x, g, b, BN_EPS)?;
            self.stats[bn.stats] = Some(st);
            Ok(y)
        } else {
            let r = &self.running[bn.stats];
            Ok(self.tape.batch_norm_eval(x, g, b, &r.mean, &r.var, BN_EPS)?)
        }
    }

    pub fn conv(&mut self, x: Var, c: &Conv) -> Result<Var> {
        let b = c.bias.map(|i| self.vars[i]);
        Ok(self
            .tape
            .conv3d(x, self.vars[c.weight], b, c.stride, c.padding, c.groups)?)
    }

    pub fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let b = l.bias.map(|i| self.vars[i]);
        Ok(self.tape.linear(x, self.vars[l.weight], b)?)
    }

    pub fn layer_norm(&mut self, x: Var, ln: &LayerNorm) -> Result<Var> {
        Ok(self
            .tape
            .layer_norm(x, self.vars[ln.scale], self.vars[ln.shift], LN_EPS)?)
    }
}

/// How a weight tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `sqrt(2 / fan_in)`.
    FanIn,
    /// Normal truncated to two standard deviations.
    TruncNormal(f64),
}

pub fn init_tensor<S: Scalar>(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = match init {
        Init::Zeros => vec![S::zero(); n],
        Init::Ones => vec![S::one(); n],
        Init::FanIn => {
            let fan_in: usize = shape[1..].iter().product();
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| S::cast(d.sample(rng))).collect()
        }
        Init::TruncNormal(std) => {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n)
                .map(|_| loop {
                    let v: f64 = d.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break S::cast(v);
                    }
                })
                .collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Helper that allocates parameters with deterministic initialization.
pub struct Builder<'r, S: Scalar> {
    pub params: Params<S>,
    /// Channel count of every batch-norm layer, in creation order.
    pub bn_channels: Vec<usize>,
    pub rng: &'r mut ChaCha8Rng,
}

impl<'r, S: Scalar> Builder<'r, S> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            params: Params::default(),
            bn_channels: Vec::new(),
            rng,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let t = init_tensor(shape, init, self.rng);
        self.params.add(name, t)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
        init: Init,
    ) -> Conv {
        let weight = self.tensor(
            &format!("{name}.weight"),
            &[c_out, c_in / groups, kernel[0], kernel[1], kernel[2]],
            init,
        );
        let bias = Some(self.tensor(&format!("{name}.bias"), &[c_out], Init::Zeros));
        Conv {
            weight,
            bias,
            stride,
            padding,
            groups,
        }
    }

    pub fn linear(&mut self, name: &str, c_in: usize, c_out: usize, init: Init) -> Linear {
        let weight = self.tensor(&format!("{name}.weight"), &[c_out, c_in], init);
        let bias = Some(self.tensor(&format!("{name}.bias"), &[c_out], Init::Zeros));
        Linear { weight, bias }
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> LayerNorm {
        LayerNorm {
            scale: self.tensor(&format!("{name}.scale"), &[c], Init::Ones),
            shift: self.tensor(&format!("{name}.shift"), &[c], Init::Zeros),
        }
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> BatchNorm {
        let stats = self.bn_channels.len();
        self.bn_channels.push(c);
        BatchNorm {
            scale: self.tensor(&format!("{name}.scale"), &[c], Init::Ones),
            shift: self.tensor(&format!("{name}.shift"), &[c], Init::Zeros),
            stats,
            channels: c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: usize,
    pub shift: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: usize,
    pub shift: usize,
    /// Index into the model's running statistics.
    pub stats: usize,
    pub channels: usize,
}

impl<S: Scalar> Builder<'_, S> {
    pub fn running_stats(&self) -> Vec<RunningStats<S>> {
        self.bn_channels.iter().map(|&c| RunningStats::new(c)).collect()
    }
}
