//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward path, so it stays
//! independent of every backward rule it verifies.
//!
//! Probes that land on a non-smooth point (a relu zero crossing, a bilinear
//! pixel-center kink) are skipped: there the forward and backward one-sided
//! differences disagree, which flags the central difference itself as
//! meaningless. A wrong backward rule is never masked by the skip, because
//! a corrupted *rule* leaves the forward function smooth — the one-sided
//! differences still agree with each other, just not with the analytic
//! gradient.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Binder, ParamSet};
use crate::tensor::{Result, Tape, Var};

pub const FD_EPS: f64 = 1e-5;

/// One-sided forward/backward differences disagreeing by more than this
/// (relative) marks the probe point as non-smooth. A kink straddled by the
/// probe biases the central difference by about half the slope jump, so
/// this must sit below twice the 1e-4 acceptance tolerance to keep every
/// undetected kink within it; smooth functions disagree only by ~|f″|·ε.
const SMOOTHNESS_TOL: f64 = 1e-4;

/// Relative disagreement of the analytic gradient `a` and central
/// difference of (plus, minus); `None` when the one-sided differences built
/// from `center` expose a kink between the probe points.
fn probe_err(a: f64, plus: f64, minus: f64, center: f64) -> Option<f64> {
    let d_fwd = (plus - center) / FD_EPS;
    let d_bwd = (center - minus) / FD_EPS;
    if (d_fwd - d_bwd).abs() > SMOOTHNESS_TOL * d_fwd.abs().max(d_bwd.abs()).max(1.0) {
        return None;
    }
    let numeric = (plus - minus) / (2.0 * FD_EPS);
    Some((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0))
}

/// How input elements are drawn for a check.
#[derive(Clone, Copy)]
pub enum InputKind {
    /// uniform(−1, 1)
    Uniform,
    /// uniform magnitude in (0.1, 1) with random sign; keeps finite
    /// differences away from activation kinks at zero
    AwayFromZero,
}

pub fn random_input(shape: &[usize], kind: InputKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| match kind {
            InputKind::Uniform => rng.gen_range(-1.0..1.0),
            InputKind::AwayFromZero => {
                let mag = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            }
        })
        .collect()
}

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued function over the given inputs.
///
/// Relative error per element: |a − n| / max(1, |a|, |n|).
pub fn max_rel_err<F>(shapes: &[&[usize]], kind: InputKind, seed: u64, f: F) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| random_input(s, kind, &mut rng))
        .collect();

    // analytic gradients
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&inputs)
            .map(|(s, d)| tape.param(s, d.clone()))
            .collect::<Result<_>>()?;
        let out = f(&tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()]))
            .collect()
    };

    let eval = |inputs: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(inputs)
            .map(|(s, d)| tape.leaf(s, d.clone()))
            .collect::<Result<_>>()?;
        Ok(f(&tape, &vars)?.scalar())
    };

    let center = eval(&inputs.to_vec())?;
    let mut worst = 0.0f64;
    for (vi, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[vi][ei] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[vi][ei] -= FD_EPS;
            if let Some(err) = probe_err(analytic[vi][ei], eval(&plus)?, eval(&minus)?, center) {
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

/// Parameter-space variant for composed modules: the analytic side binds
/// `params` trainable on a fresh tape; the numeric side re-runs the forward
/// with one parameter element nudged (parameters bound as leaves, so the
/// numeric passes record no backward steps). Every element of every
/// parameter the forward touches is probed. The closure may create extra
/// (constant) inputs through `binder.tape`.
pub fn max_rel_err_params<F>(params: &ParamSet, f: F) -> Result<f64>
where
    F: for<'a, 'b> Fn(&Binder<'a, 'b>) -> Result<Var<'a>>,
{
    let analytic: Vec<(String, Vec<f64>)> = {
        let tape = Tape::new();
        let binder = Binder::new(&tape, params, true);
        let out = f(&binder)?;
        tape.backward(out)?;
        binder.grads()
    };

    let eval = |set: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, set, false);
        Ok(f(&binder)?.scalar())
    };

    let center = eval(params)?;
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        #[allow(clippy::needless_range_loop)] // ei also indexes the nudged sets
        for ei in 0..grad.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data[ei] += FD_EPS;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data[ei] -= FD_EPS;
            if let Some(err) = probe_err(grad[ei], eval(&plus)?, eval(&minus)?, center) {
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

/// Worst error across `n_seeds` randomized repetitions.
pub fn max_rel_err_seeds<F>(
    shapes: &[&[usize]],
    kind: InputKind,
    base_seed: u64,
    n_seeds: u64,
    f: F,
) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Result<Var<'a>>,
{
    let mut worst = 0.0f64;
    for s in 0..n_seeds {
        worst = worst.max(max_rel_err(shapes, kind, base_seed + s, &f)?);
    }
    Ok(worst)
}
