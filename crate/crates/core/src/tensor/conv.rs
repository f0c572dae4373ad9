//! Direct 3D cross-correlation kernels over `[C, T, H, W]` grids.

use super::ops::gemm_acc;
use super::{arg_err, shape_err, Result, Scalar};

/// Static description of one conv3d call: extents, kernel, stride, padding
/// and grouping. Built by [`ConvGeometry::new`], which validates everything.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

const AXES: [&str; 3] = ["temporal", "height", "width"];

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(shape_err(
                "conv3d",
                format!("input must be rank 4 [C,T,H,W], got {input_shape:?}"),
            ));
        }
        if weight_shape.len() != 5 {
            return Err(shape_err(
                "conv3d",
                format!("weight must be rank 5 [Co,Ci/g,kT,kH,kW], got {weight_shape:?}"),
            ));
        }
        if groups == 0 {
            return Err(arg_err("conv3d", "groups must be positive"));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(arg_err("conv3d", "stride must be positive"));
        }
        let c_in = input_shape[0];
        let c_out = weight_shape[0];
        if c_in % groups != 0 {
            return Err(arg_err(
                "conv3d",
                format!("input channels {c_in} not divisible by groups {groups}"),
            ));
        }
        if c_out % groups != 0 {
            return Err(arg_err(
                "conv3d",
                format!("output channels {c_out} not divisible by groups {groups}"),
            ));
        }
        if weight_shape[1] != c_in / groups {
            return Err(shape_err(
                "conv3d",
                format!(
                    "channel dimension: weight expects {} input channels per group, input provides {}",
                    weight_shape[1],
                    c_in / groups
                ),
            ));
        }
        let mut output = [0; 3];
        let mut input = [0; 3];
        let mut kernel = [0; 3];
        for a in 0..3 {
            let n = input_shape[a + 1];
            let k = weight_shape[a + 2];
            let padded = n + 2 * padding[a];
            if k > padded {
                return Err(shape_err(
                    "conv3d",
                    format!(
                        "{} dimension: kernel {k} exceeds padded extent {padded}",
                        AXES[a]
                    ),
                ));
            }
            input[a] = n;
            kernel[a] = k;
            output[a] = (padded - k) / stride[a] + 1;
        }
        Ok(Self {
            in_channels: c_in,
            out_channels: c_out,
            groups,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Output index range along `axis` whose input coordinate
    /// `o*stride + k - pad` lands inside the input for kernel offset `k`.
    #[inline]
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride[axis];
        let p = self.padding[axis];
        let n = self.input[axis];
        let out = self.output[axis];
        // smallest o with o*s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // largest o with o*s + k - p <= n - 1
        let hi = if n + p < k + 1 {
            0
        } else {
            ((n + p - k - 1) / s + 1).min(out)
        };
        (lo.min(hi), hi)
    }
}

/// Visits every (output position, input position) pair touched by kernel tap
/// `(kt,kh,kw)`, calling `f(out_offset, in_offset)` within one channel plane.
#[inline]
fn for_each_tap(g: &ConvGeometry, kt: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize)) {
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let (t0, t1) = g.valid_range(0, kt);
    let (h0, h1) = g.valid_range(1, kh);
    let (w0, w1) = g.valid_range(2, kw);
    for to in t0..t1 {
        let ti = to * g.stride[0] + kt - g.padding[0];
        for ho in h0..h1 {
            let hi = ho * g.stride[1] + kh - g.padding[1];
            let out_row = (to * oh + ho) * ow;
            let in_row = (ti * ih + hi) * iw;
            for wo in w0..w1 {
                let wi = wo * g.stride[2] + kw - g.padding[2];
                f(out_row + wo, in_row + wi);
            }
        }
    }
}

/// Unfolds one group's `cig` input channels into a `[cig*K, P]` matrix of
/// kernel taps by output positions (zero where the tap lands in padding).
fn im2col<S: Scalar>(g: &ConvGeometry, src: &[S], cig: usize) -> Vec<S> {
    let in_plane: usize = g.input.iter().product();
    let out_plane: usize = g.output.iter().product();
    let ksize: usize = g.kernel.iter().product();
    let mut cols = vec![S::zero(); cig * ksize * out_plane];
    for cl in 0..cig {
        let plane = &src[cl * in_plane..(cl + 1) * in_plane];
        for tap in 0..ksize {
            let (kt, kh, kw) = unravel(g, tap);
            let row = &mut cols[(cl * ksize + tap) * out_plane..(cl * ksize + tap + 1) * out_plane];
            for_each_tap(g, kt, kh, kw, |o, i| row[o] = plane[i]);
        }
    }
    cols
}

/// Adds a `[cig*K, P]` column gradient back onto the input planes.
fn col2im<S: Scalar>(g: &ConvGeometry, cols: &[S], dst: &mut [S], cig: usize) {
    let in_plane: usize = g.input.iter().product();
    let out_plane: usize = g.output.iter().product();
    let ksize: usize = g.kernel.iter().product();
    for cl in 0..cig {
        let plane = &mut dst[cl * in_plane..(cl + 1) * in_plane];
        for tap in 0..ksize {
            let (kt, kh, kw) = unravel(g, tap);
            let row = &cols[(cl * ksize + tap) * out_plane..(cl * ksize + tap + 1) * out_plane];
            for_each_tap(g, kt, kh, kw, |o, i| plane[i] += row[o]);
        }
    }
}

#[inline]
fn unravel(g: &ConvGeometry, tap: usize) -> (usize, usize, usize) {
    let [_, kh, kw] = g.kernel;
    (tap / (kh * kw), (tap / kw) % kh, tap % kw)
}

pub(crate) fn conv3d_forward<S: Scalar>(
    g: &ConvGeometry,
    input: &[S],
    weight: &[S],
    bias: Option<&[S]>,
) -> Vec<S> {
    let in_plane: usize = g.input.iter().product();
    let out_plane: usize = g.output.iter().product();
    let ksize: usize = g.kernel.iter().product();
    let (cig, cog) = (g.in_per_group(), g.out_per_group());
    let mut out = vec![S::zero(); g.out_channels * out_plane];
    if let Some(b) = bias {
        for (co, dst) in out.chunks_exact_mut(out_plane).enumerate() {
            dst.fill(b[co]);
        }
    }
    for grp in 0..g.groups {
        let cols = im2col(g, &input[grp * cig * in_plane..(grp + 1) * cig * in_plane], cig);
        let w = &weight[grp * cog * cig * ksize..(grp + 1) * cog * cig * ksize];
        let dst = &mut out[grp * cog * out_plane..(grp + 1) * cog * out_plane];
        gemm_acc(w, &cols, dst, cog, cig * ksize, out_plane, false, false);
    }
    out
}

/// Gradients of conv3d with respect to (input, weight, bias).
pub(crate) fn conv3d_backward<S: Scalar>(
    g: &ConvGeometry,
    input: &[S],
    weight: &[S],
    grad_out: &[S],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let in_plane: usize = g.input.iter().product();
    let out_plane: usize = g.output.iter().product();
    let ksize: usize = g.kernel.iter().product();
    let (cig, cog) = (g.in_per_group(), g.out_per_group());

    let mut gin = need_input.then(|| vec![S::zero(); input.len()]);
    let mut gw = need_weight.then(|| vec![S::zero(); weight.len()]);
    let gb = need_bias.then(|| {
        grad_out
            .chunks_exact(out_plane)
            .map(|c| c.iter().copied().sum())
            .collect::<Vec<S>>()
    });

    for grp in 0..g.groups {
        let go = &grad_out[grp * cog * out_plane..(grp + 1) * cog * out_plane];
        let wrange = grp * cog * cig * ksize..(grp + 1) * cog * cig * ksize;
        let irange = grp * cig * in_plane..(grp + 1) * cig * in_plane;
        if let Some(gw) = gw.as_mut() {
            let cols = im2col(g, &input[irange.clone()], cig);
            gemm_acc(go, &cols, &mut gw[wrange.clone()], cog, out_plane, cig * ksize, false, true);
        }
        if let Some(gin) = gin.as_mut() {
            let mut gcols = vec![S::zero(); cig * ksize * out_plane];
            gemm_acc(&weight[wrange], go, &mut gcols, cig * ksize, cog, out_plane, true, false);
            col2im(g, &gcols, &mut gin[irange], cig);
        }
    }
    (gin, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_floor_semantics() {
        let g = ConvGeometry::new(&[3, 16, 64, 64], &[64, 3, 3, 4, 4], [2, 4, 4], [1, 0, 0], 1)
            .unwrap();
        assert_eq!(g.output_shape(), vec![64, 8, 16, 16]);
    }

    #[test]
    fn rejects_bad_groups_and_channels() {
        let e = ConvGeometry::new(&[3, 2, 4, 4], &[3, 1, 1, 1, 1], [1, 1, 1], [0, 0, 0], 2);
        assert!(matches!(e, Err(crate::tensor::TensorError::Argument { .. })));
        let e = ConvGeometry::new(&[4, 2, 4, 4], &[2, 3, 1, 1, 1], [1, 1, 1], [0, 0, 0], 1);
        match e {
            Err(crate::tensor::TensorError::Shape { detail, .. }) => {
                assert!(detail.contains("channel"))
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let e = ConvGeometry::new(&[1, 2, 2, 2], &[1, 1, 1, 5, 1], [1, 1, 1], [0, 0, 0], 1);
        match e {
            Err(crate::tensor::TensorError::Shape { detail, .. }) => {
                assert!(detail.contains("height"))
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn valid_range_covers_padding() {
        let g = ConvGeometry::new(&[1, 1, 5, 5], &[1, 1, 1, 3, 3], [1, 2, 2], [0, 1, 1], 1)
            .unwrap();
        assert_eq!(g.output, [1, 3, 3]);
        // kernel tap 0 with pad 1: output 0 reads input -1, so starts at 1
        assert_eq!(g.valid_range(1, 0), (1, 3));
        assert_eq!(g.valid_range(1, 2), (0, 2));
    }
}
