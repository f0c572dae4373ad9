use super::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use super::ops::{gelu, gelu_grad, gemm_acc, inv_std, inverse_axes, permute_data, row_stats};
use super::{arg_err, shape_err, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    AddRow(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool3d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        input: Var,
        scale: Var,
        shift: Var,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    LayerNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    AvgPoolAll(Var),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Select(Var, usize),
    TileFrames {
        input: Var,
        map: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased variance over the normalized positions.
    pub var: Vec<S>,
    pub count: usize,
}

/// Records a computation eagerly and differentiates it in reverse.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. Every node that depends on a `requires_grad` leaf keeps
/// a gradient accumulator after [`Tape::backward`]; repeated backward calls
/// add into the same accumulators.
#[derive(Clone, Debug, Default)]
pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, contrib: Vec<S>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of `v`, available after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: va.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = S::cast(factor);
        let v = self.value(a).map(|x| x * f);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, f), rg)
    }

    fn channel_check(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        let cs = self.shape(c);
        if xs.is_empty() || cs.len() != 1 || cs[0] != xs[0] {
            return Err(shape_err(
                op,
                format!("channel dimension: input {xs:?} vs per-channel {cs:?}"),
            ));
        }
        Ok((xs[0], self.value(x).len() / xs[0]))
    }

    /// `x[c, ...] + b[c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, plane) = self.channel_check("add_channel", x, b)?;
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data.iter_mut().enumerate() {
            *e += bv[i / plane];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddChannel(x, b), rg))
    }

    /// `x[c, ...] * s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, plane) = self.channel_check("mul_channel", x, s)?;
        let sv = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data.iter_mut().enumerate() {
            *e *= sv[i / plane];
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(v, Op::MulChannel(x, s), rg))
    }

    /// `x[..., j] + b[j]` along the last axis.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.is_empty() || bs.len() != 1 || bs[0] != xs[xs.len() - 1] {
            return Err(shape_err(
                "add_row",
                format!("feature dimension: input {xs:?} vs bias {bs:?}"),
            ));
        }
        let w = bs[0];
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data.iter_mut().enumerate() {
            *e += bv[i % w];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddRow(x, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Permute(x, axes.to_vec()), rg))
    }

    // ---------------------------------------------------------------- convolution

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.shape(input),
            self.shape(weight),
            stride,
            padding,
            groups,
        )?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(shape_err(
                    "conv3d",
                    format!(
                        "bias shape {:?} does not match {} output channels",
                        self.shape(b),
                        geom.out_channels
                    ),
                ));
            }
        }
        let out = conv3d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let v = Tensor {
            shape: geom.output_shape(),
            data: out,
        };
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            v,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Max pooling over `[C, T, H, W]` without padding.
    pub fn max_pool3d(&mut self, input: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(shape_err("max_pool3d", format!("expected rank 4, got {s:?}")));
        }
        let mut o = [0usize; 3];
        for a in 0..3 {
            if kernel[a] == 0 || stride[a] == 0 || kernel[a] > s[a + 1] {
                return Err(arg_err(
                    "max_pool3d",
                    format!("kernel {kernel:?} / stride {stride:?} invalid for {s:?}"),
                ));
            }
            o[a] = (s[a + 1] - kernel[a]) / stride[a] + 1;
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(s[0] * o[0] * o[1] * o[2]);
        let mut argmax = Vec::with_capacity(out.capacity());
        for c in 0..s[0] {
            for t in 0..o[0] {
                for h in 0..o[1] {
                    for w in 0..o[2] {
                        let mut best = S::neg_infinity();
                        let mut bi = 0;
                        for kt in 0..kernel[0] {
                            for kh in 0..kernel[1] {
                                for kw in 0..kernel[2] {
                                    let ti = t * stride[0] + kt;
                                    let hi = h * stride[1] + kh;
                                    let wi = w * stride[2] + kw;
                                    let idx = ((c * s[1] + ti) * s[2] + hi) * s[3] + wi;
                                    if x[idx] > best {
                                        best = x[idx];
                                        bi = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(bi);
                    }
                }
            }
        }
        let v = Tensor {
            shape: vec![s[0], o[0], o[1], o[2]],
            data: out,
        };
        let rg = self.rg(input);
        Ok(self.push(v, Op::MaxPool3d { input, argmax }, rg))
    }

    // ---------------------------------------------------------------- normalization

    fn affine_check(&self, op: &'static str, x: Var, scale: Var, shift: Var, eps: f64) -> Result<()> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(arg_err(op, format!("epsilon must be positive, got {eps}")));
        }
        if self.shape(scale) != self.shape(shift) || self.shape(scale).len() != 1 {
            return Err(shape_err(
                op,
                format!(
                    "scale {:?} and shift {:?} must be equal-length vectors",
                    self.shape(scale),
                    self.shape(shift)
                ),
            ));
        }
        if self.shape(x).is_empty() {
            return Err(shape_err(op, "input must have at least one axis"));
        }
        Ok(())
    }

    /// Training-mode batch norm over `[C, ...]`: every non-channel position is
    /// one observation of its channel.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<S>)> {
        self.affine_check("batch_norm", input, scale, shift, eps)?;
        let (c, plane) = self.channel_check("batch_norm", input, scale)?;
        let (means, var) = row_stats(self.value(input).data(), plane);
        let inv = inv_std(&var, S::cast(eps));
        let x = self.value(input).data();
        let g = self.value(scale).data();
        let b = self.value(shift).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for ch in 0..c {
            for &v in &x[ch * plane..(ch + 1) * plane] {
                let h = (v - means[ch]) * inv[ch];
                xhat.push(h);
                out.push(h * g[ch] + b[ch]);
            }
        }
        let stats = BatchStats {
            mean: means,
            var,
            count: plane,
        };
        let v = Tensor {
            shape: self.shape(input).to_vec(),
            data: out,
        };
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        let var = self.push(
            v,
            Op::BatchNormTrain {
                input,
                scale,
                shift,
                xhat,
                inv_std: inv,
            },
            rg,
        );
        Ok((var, stats))
    }

    /// Eval-mode batch norm using fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        mean: &[S],
        var: &[S],
        eps: f64,
    ) -> Result<Var> {
        self.affine_check("batch_norm", input, scale, shift, eps)?;
        let (c, plane) = self.channel_check("batch_norm", input, scale)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", "running statistics length mismatch"));
        }
        let eps_s = S::cast(eps);
        let inv = inv_std(var, eps_s);
        let x = self.value(input).data();
        let g = self.value(scale).data();
        let b = self.value(shift).data();
        let out = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i / plane;
                (v - mean[ch]) * inv[ch] * g[ch] + b[ch]
            })
            .collect();
        let v = Tensor {
            shape: self.shape(input).to_vec(),
            data: out,
        };
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            v,
            Op::BatchNormEval {
                input,
                scale,
                shift,
                mean: mean.to_vec(),
                inv_std: inv,
            },
            rg,
        ))
    }

    /// Layer norm across the last axis of each row.
    pub fn layer_norm(&mut self, input: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        self.affine_check("layer_norm", input, scale, shift, eps)?;
        let xs = self.shape(input);
        let w = xs[xs.len() - 1];
        if self.shape(scale)[0] != w {
            return Err(shape_err(
                "layer_norm",
                format!("feature dimension {w} vs scale length {}", self.shape(scale)[0]),
            ));
        }
        let x = self.value(input).data();
        let (means, var) = row_stats(x, w);
        let inv = inv_std(&var, S::cast(eps));
        let g = self.value(scale).data();
        let b = self.value(shift).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            let r = i / w;
            let h = (v - means[r]) * inv[r];
            xhat.push(h);
            out.push(h * g[i % w] + b[i % w]);
        }
        let v = Tensor {
            shape: xs.to_vec(),
            data: out,
        };
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            v,
            Op::LayerNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std: inv,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- activations

    /// Exact-erf GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(S::zero()));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() {
            return Err(shape_err("softmax", "input must have at least one axis"));
        }
        let w = xs[xs.len() - 1];
        let v = Tensor {
            shape: xs.to_vec(),
            data: softmax_rows(self.value(x).data(), w),
        };
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    // ---------------------------------------------------------------- products

    /// `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, k2, n) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => {
                return Err(shape_err(
                    "matmul",
                    format!("unsupported operand shapes {sa:?} and {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimension: {sa:?} vs {sb:?}"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_acc(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Matmul { a, b, batch, m, k, n },
            rg,
        ))
    }

    /// `x·wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(
                "linear",
                format!("feature dimension: input {xs:?} vs weight {ws:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} vs {} outputs", self.shape(b), ws[0]),
                ));
            }
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![S::zero(); n * o];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for r in 0..n {
                out[r * o..(r + 1) * o].copy_from_slice(bv);
            }
        }
        gemm_acc(
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
            n,
            i,
            o,
            false,
            true,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![n, o],
                data: out,
            },
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- reductions

    /// Global average over every non-channel axis: `[C, ...] -> [C]`.
    pub fn avg_pool_all(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() {
            return Err(shape_err("avg_pool_all", "input must have a channel axis"));
        }
        let c = xs[0];
        let plane = self.value(x).len() / c;
        let d = self.value(x).data();
        let n = S::cast(plane as f64);
        let data = (0..c)
            .map(|ch| d[ch * plane..(ch + 1) * plane].iter().copied().sum::<S>() / n)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![c], data }, Op::AvgPoolAll(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = S::cast(self.value(x).len() as f64);
        let s = self.value(x).data().iter().copied().sum::<S>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Scalar element at flat index `index`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let len = self.value(x).len();
        if index >= len {
            return Err(arg_err(
                "pick",
                format!("index {index} out of range for {len} elements"),
            ));
        }
        let v = Tensor::scalar(self.value(x).data()[index]);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Pick(x, index), rg))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// logits shaped `[N, K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?} vs {} targets", targets.len()),
            ));
        }
        let k = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(arg_err(
                "cross_entropy",
                format!("target {t} out of range for {k} classes"),
            ));
        }
        let x = self.value(logits).data();
        let probs = softmax_rows(x, k);
        let mut loss = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
            loss += lse - row[t];
        }
        loss = loss / S::cast(targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sub-tensor at `index` along the first axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || index >= s[0] {
            return Err(arg_err(
                "select",
                format!("index {index} out of range for shape {s:?}"),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: s[1..].to_vec(),
                data,
            },
            Op::Select(x, index),
            rg,
        ))
    }

    /// Tiles `[F, T, h, w]` frame feature maps row-major into one
    /// `[F, 1, rows·h, cols·w]` plane; unused tiles stay zero.
    pub fn tile_frames(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("tile_frames", format!("expected rank 4, got {s:?}")));
        }
        if rows * cols < s[1] {
            return Err(arg_err(
                "tile_frames",
                format!("{rows}x{cols} grid cannot hold {} frames", s[1]),
            ));
        }
        let map = tile_map(&s, rows, cols);
        let src = self.value(x).data();
        let (ph, pw) = (rows * s[2], cols * s[3]);
        let mut out = vec![S::zero(); s[0] * ph * pw];
        for (i, &dst) in map.iter().enumerate() {
            out[dst] = src[i];
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![s[0], 1, ph, pw],
                data: out,
            },
            Op::TileFrames { input: x, map },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, adding gradients into the
    /// accumulator of every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => {
                    node.grad = Some(Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    })
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if need(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if need(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if need(*b) {
                    accumulate(grads, *b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.iter().map(|&x| x * *f).collect()),
            Op::AddChannel(x, b) => {
                if need(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if need(*b) {
                    let c = val(*b).len();
                    let plane = g.len() / c;
                    let gb = (0..c)
                        .map(|ch| g[ch * plane..(ch + 1) * plane].iter().copied().sum())
                        .collect();
                    accumulate(grads, *b, gb);
                }
            }
            Op::MulChannel(x, s) => {
                let sv = val(*s);
                let c = sv.len();
                let plane = g.len() / c;
                if need(*x) {
                    let gx = g.iter().enumerate().map(|(j, &gv)| gv * sv[j / plane]).collect();
                    accumulate(grads, *x, gx);
                }
                if need(*s) {
                    let xv = val(*x);
                    let gs = (0..c)
                        .map(|ch| {
                            let r = ch * plane..(ch + 1) * plane;
                            g[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum()
                        })
                        .collect();
                    accumulate(grads, *s, gs);
                }
            }
            Op::AddRow(x, b) => {
                if need(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if need(*b) {
                    let w = val(*b).len();
                    let mut gb = vec![S::zero(); w];
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % w] += gv;
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Permute(x, axes) => {
                let (_, back) = permute_data(node.value.shape(), g, &inverse_axes(axes))
                    .expect("permutation validated in forward");
                accumulate(grads, *x, back);
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) = conv3d_backward(
                    geom,
                    val(*input),
                    val(*weight),
                    g,
                    need(*input),
                    need(*weight),
                    bias.is_some_and(need),
                );
                if let Some(gi) = gi {
                    accumulate(grads, *input, gi);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::MaxPool3d { input, argmax } => {
                let mut gi = vec![S::zero(); val(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
                accumulate(grads, *input, gi);
            }
            Op::BatchNormTrain {
                input,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let plane = g.len() / c;
                norm_backward(
                    g, xhat, inv_std, val(*scale), plane, c, |j| j / plane, |j| j / plane,
                    need(*input), need(*scale), need(*shift), grads, *input, *scale, *shift,
                );
            }
            Op::LayerNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let w = val(*scale).len();
                let rows = g.len() / w;
                norm_backward(
                    g, xhat, inv_std, val(*scale), w, rows, |j| j / w, |j| j % w,
                    need(*input), need(*scale), need(*shift), grads, *input, *scale, *shift,
                );
            }
            Op::BatchNormEval {
                input,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let sc = val(*scale);
                let c = sc.len();
                let plane = g.len() / c;
                if need(*input) {
                    let gi = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * sc[j / plane] * inv_std[j / plane])
                        .collect();
                    accumulate(grads, *input, gi);
                }
                if need(*scale) {
                    let xv = val(*input);
                    let mut gs = vec![S::zero(); c];
                    for (j, &gv) in g.iter().enumerate() {
                        let ch = j / plane;
                        gs[ch] += gv * (xv[j] - mean[ch]) * inv_std[ch];
                    }
                    accumulate(grads, *scale, gs);
                }
                if need(*shift) {
                    let gb = (0..c)
                        .map(|ch| g[ch * plane..(ch + 1) * plane].iter().copied().sum())
                        .collect();
                    accumulate(grads, *shift, gb);
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&gv, &v)| gv * gelu_grad(v)).collect(),
                );
            }
            Op::Relu(x) => {
                let xv = val(*x);
                accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                        .collect(),
                );
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = node.value.shape()[node.value.rank() - 1];
                let mut gi = vec![S::zero(); g.len()];
                for r in 0..g.len() / w {
                    let rr = r * w..(r + 1) * w;
                    let dot: S = g[rr.clone()].iter().zip(&y[rr.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in rr {
                        gi[j] = y[j] * (g[j] - dot);
                    }
                }
                accumulate(grads, *x, gi);
            }
            Op::Matmul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = val(*a);
                let bv = val(*b);
                if need(*a) {
                    let mut ga = vec![S::zero(); av.len()];
                    for bi in 0..batch {
                        gemm_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            true,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if need(*b) {
                    let mut gb = vec![S::zero(); bv.len()];
                    for bi in 0..batch {
                        gemm_acc(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                            true,
                            false,
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.nodes[input.0].value.shape();
                let (rows, inp) = (xs[0], xs[1]);
                let out = self.nodes[weight.0].value.shape()[0];
                if need(*input) {
                    let mut gi = vec![S::zero(); rows * inp];
                    gemm_acc(g, val(*weight), &mut gi, rows, out, inp, false, false);
                    accumulate(grads, *input, gi);
                }
                if need(*weight) {
                    let mut gw = vec![S::zero(); out * inp];
                    gemm_acc(g, val(*input), &mut gw, out, rows, inp, true, false);
                    accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias.filter(|&b| need(b)) {
                    let mut gb = vec![S::zero(); out];
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % out] += gv;
                    }
                    accumulate(grads, b, gb);
                }
            }
            Op::AvgPoolAll(x) => {
                let n = val(*x).len();
                let c = g.len();
                let plane = n / c;
                let inv = S::one() / S::cast(plane as f64);
                accumulate(grads, *x, (0..n).map(|j| g[j / plane] * inv).collect());
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, vec![g[0] / S::cast(n as f64); n]);
            }
            Op::Pick(x, idx) => {
                let mut gi = vec![S::zero(); val(*x).len()];
                gi[*idx] = g[0];
                accumulate(grads, *x, gi);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = probs.len() / targets.len();
                let scale = g[0] / S::cast(targets.len() as f64);
                let mut gi: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                // p_t - 1 as minus the other probabilities: stays accurate
                // when p_t rounds to 1.
                for (r, &t) in targets.iter().enumerate() {
                    let row = &probs[r * k..(r + 1) * k];
                    let rest = row.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, &p)| p).sum::<S>();
                    gi[r * k + t] = -rest * scale;
                }
                accumulate(grads, *logits, gi);
            }
            Op::Select(x, idx) => {
                let mut gi = vec![S::zero(); val(*x).len()];
                let inner = g.len();
                gi[idx * inner..(idx + 1) * inner].copy_from_slice(g);
                accumulate(grads, *x, gi);
            }
            Op::TileFrames { input, map } => {
                accumulate(grads, *input, map.iter().map(|&dst| g[dst]).collect());
            }
        }
    }
}

/// Shared backward for batch/layer norm. `stat_of(j)` maps an element to
/// its statistics group, `param_of(j)` to its affine parameter.
#[allow(clippy::too_many_arguments)]
fn norm_backward<S: Scalar>(
    g: &[S],
    xhat: &[S],
    inv_std: &[S],
    scale: &[S],
    group_len: usize,
    groups: usize,
    stat_of: impl Fn(usize) -> usize,
    param_of: impl Fn(usize) -> usize,
    need_input: bool,
    need_scale: bool,
    need_shift: bool,
    grads: &mut [Option<Vec<S>>],
    input: Var,
    scale_var: Var,
    shift_var: Var,
) {
    if need_input {
        // d xhat = g * scale; dx = inv/n * (n*dxh - sum(dxh) - xhat*sum(dxh*xhat))
        let mut sum_d = vec![S::zero(); groups];
        let mut sum_dx = vec![S::zero(); groups];
        for j in 0..g.len() {
            let d = g[j] * scale[param_of(j)];
            sum_d[stat_of(j)] += d;
            sum_dx[stat_of(j)] += d * xhat[j];
        }
        let n = S::cast(group_len as f64);
        let gi = (0..g.len())
            .map(|j| {
                let s = stat_of(j);
                let d = g[j] * scale[param_of(j)];
                inv_std[s] / n * (n * d - sum_d[s] - xhat[j] * sum_dx[s])
            })
            .collect();
        accumulate(grads, input, gi);
    }
    if need_scale {
        let mut gs = vec![S::zero(); scale.len()];
        for j in 0..g.len() {
            gs[param_of(j)] += g[j] * xhat[j];
        }
        accumulate(grads, scale_var, gs);
    }
    if need_shift {
        let mut gb = vec![S::zero(); scale.len()];
        for j in 0..g.len() {
            gb[param_of(j)] += g[j];
        }
        accumulate(grads, shift_var, gb);
    }
}

pub(crate) fn softmax_rows<S: Scalar>(x: &[S], w: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(w) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let start = out.len();
        let mut z = S::zero();
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / z);
    }
    out
}

/// Destination offset in the tiled plane for every element of `[F,T,h,w]`.
pub(crate) fn tile_map(shape: &[usize], rows: usize, cols: usize) -> Vec<usize> {
    let (f, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let pw = cols * w;
    let ph = rows * h;
    let mut map = Vec::with_capacity(f * t * h * w);
    for c in 0..f {
        for fr in 0..t {
            let (tr, tc) = (fr / cols, fr % cols);
            for y in 0..h {
                for x in 0..w {
                    map.push((c * ph + tr * h + y) * pw + tc * w + x);
                }
            }
        }
    }
    map
}
