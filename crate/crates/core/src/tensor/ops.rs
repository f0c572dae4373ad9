//! Slice-level numeric kernels shared by the tape's forward and backward rules.

use super::{arg_err, shape_err, Result, Scalar};

pub(crate) fn permute_data<S: Scalar>(
    shape: &[usize],
    data: &[S],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<S>)> {
    let rank = shape.len();
    if axes.len() != rank {
        return Err(shape_err(
            "permute",
            format!("axes {axes:?} do not match rank {rank}"),
        ));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(arg_err("permute", format!("axes {axes:?} are not a permutation")));
        }
        seen[a] = true;
    }
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // stride in the source for each destination axis
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        // odometer increment over the destination index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            src -= src_strides[ax] * new_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok((new_shape, out))
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `c += op(a) * op(b)` for one `m×n` block; `op` optionally transposes.
/// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    c: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == S::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == S::zero() {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            let mut at = vec![S::zero(); m * k];
            for p in 0..k {
                for i in 0..m {
                    at[i * k + p] = a[p * m + i];
                }
            }
            gemm_acc(&at, b, c, m, k, n, false, true);
        }
    }
}

/// Inner product with eight independent partial sums.
#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let v = x.as_f64();
    S::cast(v * normal_cdf(v))
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let v = x.as_f64();
    S::cast(normal_cdf(v) + v * normal_pdf(v))
}

/// Per-row mean and biased variance over contiguous rows of length `width`
/// (two-pass).
pub(crate) fn row_stats<S: Scalar>(data: &[S], width: usize) -> (Vec<S>, Vec<S>) {
    let rows = data.len() / width;
    let n = S::cast(width as f64);
    let mut means = Vec::with_capacity(rows);
    let mut vars = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

pub(crate) fn inv_std<S: Scalar>(vars: &[S], eps: S) -> Vec<S> {
    vars.iter().map(|&v| S::one() / (v + eps).sqrt()).collect()
}
