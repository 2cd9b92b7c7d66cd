//! Gradient checks over closures that return this crate's errors.

use geomoe_tensor::{GradCheckReport, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn check_gradients<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    geomoe_tensor::check_gradients::<_, Error>(f, x)
}

pub fn check_gradients_many<F, S>(f: F, xs: &[Tensor], select: &S) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    S: Fn(usize, usize) -> Vec<usize>,
{
    geomoe_tensor::check_gradients_many::<_, _, Error>(f, xs, select)
}

pub fn check_gradients_floor<F, S>(f: F, xs: &[Tensor], select: &S, floor: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    S: Fn(usize, usize) -> Vec<usize>,
{
    geomoe_tensor::check_gradients_floor::<_, _, Error>(f, xs, select, floor)
}

/// Every coordinate of every input.
pub fn all_coordinates(_input: usize, len: usize) -> Vec<usize> {
    (0..len).collect()
}

/// Up to `k` coordinates per input, drawn without replacement under `seed`.
pub fn sampled_coordinates(seed: u64, k: usize) -> impl Fn(usize, usize) -> Vec<usize> {
    move |input, len| {
        if len <= k {
            return (0..len).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (input as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut idx = sample(&mut rng, len, k).into_vec();
        idx.sort_unstable();
        idx
    }
}
