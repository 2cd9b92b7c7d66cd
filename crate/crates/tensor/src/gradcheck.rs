//! Central-difference gradient checking.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Default denominator floor of [`relative_error`].
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Relative discrepancy used for every comparison.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, DEFAULT_FLOOR)
}

/// `|a − n| / (|a| + |n| + floor)`. The floor bounds the reported error of
/// entries whose true value is below the finite-difference roundoff.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + floor)
}

/// Max relative error between the tape gradient of `f` at `x` and central differences.
///
/// `f` must build a scalar from the leaf it is given. NaN on either side is
/// reported as an infinite error.
pub fn check_gradients<F, E>(f: F, x: &Tensor) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let report = check_gradients_many(
        |tape, xs| f(tape, xs[0]),
        std::slice::from_ref(x),
        &|_, n| (0..n).collect(),
    )?;
    Ok(report.max_error)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    /// (input index, flat coordinate) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

/// Gradient check over several inputs. `select(i, len)` picks which flat
/// coordinates of input `i` get perturbed.
/// Errors from `f` propagate; a failed backward pass is reported as an
/// infinite error.
pub fn check_gradients_many<F, S, E>(f: F, xs: &[Tensor], select: &S) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    S: Fn(usize, usize) -> Vec<usize>,
    E: From<TensorError>,
{
    check_gradients_floor(f, xs, select, DEFAULT_FLOOR)
}

/// [`check_gradients_many`] with an explicit denominator floor.
pub fn check_gradients_floor<F, S, E>(f: F, xs: &[Tensor], select: &S, floor: f64) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    S: Fn(usize, usize) -> Vec<usize>,
    E: From<TensorError>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &leaves)?;
        match tape.backward(out) {
            Ok(g) => leaves.iter().map(|&l| g.wrt(l)).collect(),
            Err(_) => {
                return Ok(GradCheckReport {
                    max_error: f64::INFINITY,
                    worst: None,
                    coordinates_checked: 0,
                })
            }
        }
    };

    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        for j in select(i, x.len()) {
            let orig = x.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error_floor(analytic[i].data()[j], numeric, floor);
            report.coordinates_checked += 1;
            if err > report.max_error || err.is_nan() {
                report.max_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
