use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

/// Coordinate count above which a seeded random subsample is checked.
pub const SUBSAMPLE_LIMIT: usize = 10_000;
/// Seed for the coordinate subsample.
pub const SUBSAMPLE_SEED: u64 = 0x4850_5831;

/// Denominators below this are clamped so that near-zero gradients are
/// compared on an absolute scale.
const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&tape, &vars)?;
    let v = y.value();
    if v.numel() != 1 {
        return Err(Error::NonScalarObjective(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of a scalar objective against central
/// differences with step `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_sampled(f, inputs, eps, SUBSAMPLE_LIMIT)
}

/// As [`grad_check`], checking at most `limit` coordinates.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], eps: f64, limit: usize) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return arg_err(format!("finite-difference step {eps} outside (0, 1e-2]"));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = f(&tape, &vars)?;
        let grads = tape.backward(y)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() > limit {
        let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
        let mut idx = sample(&mut rng, coords.len(), limit).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| coords[k]).collect()
    } else {
        coords
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: chosen.len(),
    };
    let mut probe = inputs.to_vec();
    for (i, j) in chosen {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + eps;
        let up = eval(&f, &probe)?;
        probe[i].data_mut()[j] = orig - eps;
        let down = eval(&f, &probe)?;
        probe[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error {
            report = GradCheck {
                max_rel_error: rel,
                worst: (i, j),
                analytic: a,
                numeric,
                ..report
            };
        }
    }
    Ok(report)
}
