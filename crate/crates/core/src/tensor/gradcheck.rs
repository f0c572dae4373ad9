//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! the backward rules it audits.

use super::{Scalar, Tape, Tensor, TensorError, Var};

/// Outcome of comparing analytic and numeric derivatives at a set of
/// coordinates.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `(input index, flat coordinate, analytic, numeric)` per checked entry.
    pub entries: Vec<(usize, usize, f64, f64)>,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error of one entry. `scale` is the largest analytic magnitude in
/// the checked set; entries far below it are measured against
/// `1e-3 * scale` so that truncation error on near-zero derivatives does not
/// dominate.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Checks `f` (which must return a scalar var) at the given coordinates.
/// `coords` lists `(input index, flat element index)`; `None` checks every
/// element of every input.
pub fn check<S, F, E>(
    inputs: &[Tensor<S>],
    f: F,
    coords: Option<&[(usize, usize)]>,
    step: f64,
) -> Result<GradCheck, E>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<S>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let eval = |perturbed: &[Tensor<S>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut entries = Vec::with_capacity(coords.len());
    for &(i, j) in coords {
        let mut work: Vec<Tensor<S>> = inputs.to_vec();
        let base = inputs[i].data()[j].as_f64();
        work[i].data_mut()[j] = S::cast(base + step);
        let plus = eval(&work)?;
        work[i].data_mut()[j] = S::cast(base - step);
        let minus = eval(&work)?;
        // actual step after rounding to S
        let h2 = S::cast(base + step).as_f64() - S::cast(base - step).as_f64();
        let numeric = (plus - minus) / h2;
        let a = analytic[i].data()[j].as_f64();
        entries.push((i, j, a, numeric));
    }
    let scale = entries.iter().map(|e| e.2.abs()).fold(0.0, f64::max);
    let max_rel = entries
        .iter()
        .map(|e| relative_error(e.2, e.3, scale))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        entries,
        max_rel_error: max_rel,
    })
}

/// Checks a low-precision backward pass against central differences of the
/// same function evaluated in `f64`. `low` and `high` must compute the same
/// function; `inputs` are promoted for the numeric side.
pub fn check_promoted<F, G, E>(
    inputs: &[Tensor<f32>],
    low: F,
    high: G,
    coords: &[(usize, usize)],
    step: f64,
) -> Result<GradCheck, E>
where
    F: Fn(&mut Tape<f32>, &[Var]) -> Result<Var, E>,
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = low(&mut tape, &vars)?;
    tape.backward(out)?;
    let promoted: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = high(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut entries = Vec::with_capacity(coords.len());
    for &(i, j) in coords {
        let mut work = promoted.clone();
        let base = promoted[i].data()[j];
        work[i].data_mut()[j] = base + step;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = base - step;
        let minus = eval(&work)?;
        let numeric = (plus - minus) / (2.0 * step);
        let a = tape
            .grad(vars[i])
            .map(|g| g.data()[j] as f64)
            .unwrap_or(0.0);
        entries.push((i, j, a, numeric));
    }
    let scale = entries.iter().map(|e| e.2.abs()).fold(0.0, f64::max);
    let max_rel = entries
        .iter()
        .map(|e| relative_error(e.2, e.3, scale))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        entries,
        max_rel_error: max_rel,
    })
}
