//! Central finite-difference gradient checking.
//!
//! A check takes a closure that builds a scalar loss on a fresh tape from a set of
//! input tensors. The analytic gradient comes from one backward sweep; the numeric
//! gradient perturbs individual coordinates by ±eps and re-runs the forward pass.
//! Relative error uses `|analytic − numeric| / max(1, |analytic|)` so tiny gradients
//! are judged on absolute error instead of blowing up the ratio.

use crate::error::{err, Result};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Settings for one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step. Must stay within [1e-7, 1e-3]: larger steps leak
    /// truncation error, smaller ones leak rounding error.
    pub eps: f64,
    /// Maximum coordinates sampled per input tensor; tensors at or below this
    /// size are checked exhaustively.
    pub max_coords: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, max_coords: 48 }
    }
}

/// Worst coordinate found by a check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn eval_scalar<F>(build: &mut F, tensors: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids)?;
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(err!(
            Contract,
            "gradient check loss must be scalar, got shape {:?}",
            value.shape()
        ));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(err!(Eval, "loss evaluated to a non-finite value {v}"));
    }
    Ok(v)
}

/// Checks `build`'s gradients with respect to every tensor in `inputs`.
///
/// `build` must record a fresh forward pass on the given tape from the given leaf
/// ids and return a scalar loss id; it runs once for the analytic gradient and twice
/// per sampled coordinate for the numeric one.
pub fn grad_check<F>(
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(err!(Contract, "finite-difference step {} outside [1e-7, 1e-3]", cfg.eps));
    }
    if inputs.is_empty() {
        return Err(err!(Contract, "gradient check needs at least one input tensor"));
    }

    let mut tracked: Vec<Tensor> = inputs.to_vec();
    for t in &mut tracked {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    // Analytic gradients from one recorded pass.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tracked.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids)?;
        let value = tape.value(loss);
        if value.numel() != 1 {
            return Err(err!(
                Contract,
                "gradient check loss must be scalar, got shape {:?}",
                value.shape()
            ));
        }
        if !value.data()[0].is_finite() {
            return Err(err!(Eval, "loss evaluated to a non-finite value {}", value.data()[0]));
        }
        tape.backward(loss)?;
        ids.iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
            })
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };

    let mut work = tracked;
    for ti in 0..work.len() {
        let numel = work[ti].numel();
        let coords: Vec<usize> = if numel <= cfg.max_coords {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            all.shuffle(rng);
            all.truncate(cfg.max_coords);
            all
        };
        for &ci in &coords {
            let original = work[ti].data()[ci];
            work[ti].data_mut()[ci] = original + cfg.eps;
            let plus = eval_scalar(&mut build, &work).map_err(|e| {
                err!(Eval, "forward failed at input {ti} coordinate {ci} (+eps): {e}")
            })?;
            work[ti].data_mut()[ci] = original - cfg.eps;
            let minus = eval_scalar(&mut build, &work).map_err(|e| {
                err!(Eval, "forward failed at input {ti} coordinate {ci} (-eps): {e}")
            })?;
            work[ti].data_mut()[ci] = original;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[ti][ci];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ti;
                report.worst_coord = ci;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Deterministic rng from a plain seed, for reproducible checks.
pub fn check_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws a tensor with entries uniform in `[-scale, scale]` — shared by the
/// gradient-check and oracle suites so instances are reproducible from a seed.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}
