//! Self-check suites: tape ops against naive oracles, gradients against finite
//! differences.
//!
//! Both the command-line `oracle-check` / `grad-check` commands and the
//! integration tests run these exact suites, so what a release gate verifies and
//! what a user can re-run locally never drift apart. Each check returns a
//! [`CheckOutcome`] — a worst observed error plus the tolerance it must stay
//! under — rather than panicking, leaving presentation to the caller.
//!
//! The oracle suite re-computes every structured op with the plain-loop
//! implementations from [`reference`] and compares elementwise at near
//! round-off tolerance. The gradient suite runs [`grad_check`] at three scopes:
//! single ops, composite blocks (mixed attention, the grouped feed-forward),
//! and a whole tiny model through embedding, every mechanism, and the
//! cross-entropy loss.

use crate::attention::{self, AttentionParams, ConvBranchParams};
use crate::config::{ModelConfig, Variant};
use crate::conv;
use crate::encoder::{self, LN_EPS};
use crate::error::{err, Error, Result};
use crate::gradcheck::{check_rng, grad_check, random_tensor, GradCheckConfig};
use crate::params::{param_specs, BoundParams, ParamStore};
use crate::pretrain::{bce_with_logits, cross_entropy_selected};
use crate::reference;
use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

/// Elementwise agreement bound for the oracle suite.
pub const ORACLE_TOL: f64 = 1e-12;
/// Relative-error bounds for the gradient suite, loosening with composition depth.
pub const GRAD_TOL_OP: f64 = 1e-4;
pub const GRAD_TOL_BLOCK: f64 = 3e-4;
pub const GRAD_TOL_MODEL: f64 = 1e-3;

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst error observed: max |got − want| for oracle checks, max relative
    /// error for gradient checks.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

/// Granularity of the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Each structured op in isolation.
    Op,
    /// Composite blocks: mixed attention and the grouped feed-forward.
    Block,
    /// A whole tiny model, loss included.
    Model,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Block => "block",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scope> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            other => Err(err!(Input, "unknown scope {other:?}; expected op, block, or model")),
        }
    }
}

// ── oracle suite ────────────────────────────────────────────────────────────────────

/// Randomized instances per oracle case.
pub const ORACLE_INSTANCES: usize = 50;

/// Draws one instance size: sequence length and width up to 16, an odd tap count
/// up to 9, and a head count whose product with the per-head width stays ≤ 16.
fn draw_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let n = rng.gen_range(1..=16);
    let heads = rng.gen_range(1..=4);
    let d_head = rng.gen_range(1..=4);
    let k = [1, 3, 5, 9][rng.gen_range(0..4)];
    (n, heads, d_head, k)
}

fn max_abs_diff(tape: &Tape, got: TensorId, want: &Tensor) -> Result<f64> {
    let g = tape.value(got);
    if g.shape() != want.shape() {
        return Err(err!(
            Contract,
            "oracle comparison shapes differ: {:?} vs {:?}",
            g.shape(),
            want.shape()
        ));
    }
    Ok(g.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// `x · w + b` by the naive oracle pieces, broadcasting the bias over rows.
fn ref_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = reference::matmul(x, w)?;
    let c = out.cols();
    if b.shape() != [c] {
        return Err(err!(Dim, "oracle linear bias {:?} vs {c} columns", b.shape()));
    }
    for i in 0..out.rows() {
        for j in 0..c {
            out.data_mut()[i * c + j] += b.data()[j];
        }
    }
    Ok(out)
}

/// Column-wise concatenation of two equal-height matrices, by plain loops.
fn ref_concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(err!(Dim, "oracle concat: {} vs {} rows", a.rows(), b.rows()));
    }
    let (n, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(vec![n, ca + cb])?;
    for i in 0..n {
        for j in 0..ca {
            out.data_mut()[i * (ca + cb) + j] = a.data()[i * ca + j];
        }
        for j in 0..cb {
            out.data_mut()[i * (ca + cb) + ca + j] = b.data()[i * cb + j];
        }
    }
    Ok(out)
}

/// Runs every op against its naive oracle on [`ORACLE_INSTANCES`] randomized
/// instances each. All randomness derives from `seed`.
pub fn oracle_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    type Case = fn(&mut ChaCha8Rng) -> Result<f64>;
    let cases: &[(&str, Case)] = &[
        ("dwconv", oracle_dwconv),
        ("lconv", oracle_lconv),
        ("kernel-generator", oracle_kernels_from_features),
        ("context-blind-conv", oracle_dconv),
        ("span-key", oracle_span_key),
        ("span-kernel-generator", oracle_kernel_gen),
        ("span-conv", oracle_sdconv),
        ("attention", oracle_attention),
        ("grouped-linear", oracle_grouped_linear),
        ("layer-norm", oracle_layer_norm),
        ("mixed-attention", oracle_mixed_attention),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, case)) in cases.iter().enumerate() {
        let mut rng = check_rng(seed.wrapping_add(1000 * i as u64));
        out.push(CheckOutcome { name: (*name).into(), worst: case(&mut rng)?, tolerance: ORACLE_TOL });
    }
    Ok(out)
}

fn oracle_dwconv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, _, _, k) = draw_dims(rng);
        let d = rng.gen_range(1..=16);
        let x = random_tensor(rng, &[n, d], 1.0);
        let w = random_tensor(rng, &[d, k], 1.0);
        let want = reference::dwconv(&x, &w)?;
        let mut tape = Tape::new();
        let (xi, wi) = (tape.leaf(&x), tape.leaf(&w));
        let got = conv::dwconv(&mut tape, xi, wi)?;
        worst = worst.max(max_abs_diff(&tape, got, &want)?);
    }
    Ok(worst)
}

fn oracle_lconv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, h, d_head, k) = draw_dims(rng);
        let d = h * d_head;
        let v = random_tensor(rng, &[n, d], 1.0);
        let kernels = random_tensor(rng, &[n, h, k], 1.0);
        let want = reference::lconv(&v, &kernels)?;
        let mut tape = Tape::new();
        let (vi, ki) = (tape.leaf(&v), tape.leaf(&kernels));
        let got = conv::lconv(&mut tape, vi, ki)?;
        worst = worst.max(max_abs_diff(&tape, got, &want)?);
    }
    Ok(worst)
}

fn oracle_kernels_from_features(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, h, d_head, k) = draw_dims(rng);
        let f = random_tensor(rng, &[n, h * d_head], 1.0);
        let w = random_tensor(rng, &[h, d_head, k], 1.0);
        let want = reference::kernels_from_features(&f, &w)?;
        let mut tape = Tape::new();
        let (fi, wi) = (tape.leaf(&f), tape.leaf(&w));
        let got = conv::kernels_from_features(&mut tape, fi, wi)?;
        worst = worst.max(max_abs_diff(&tape, got, &want)?);
    }
    Ok(worst)
}

fn oracle_dconv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, h, d_head, k) = draw_dims(rng);
        let x = random_tensor(rng, &[n, h * d_head], 1.0);
        let w = random_tensor(rng, &[h, d_head, k], 1.0);
        let want = reference::dconv(&x, &w)?;
        let mut tape = Tape::new();
        let (xi, wi) = (tape.leaf(&x), tape.leaf(&w));
        let got = conv::dconv(&mut tape, xi, wi)?;
        worst = worst.max(max_abs_diff(&tape, got, &want)?);
    }
    Ok(worst)
}

fn oracle_span_key(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, _, _, k) = draw_dims(rng);
        let d = rng.gen_range(1..=16);
        let w2 = rng.gen_range(1..=16);
        let x = random_tensor(rng, &[n, d], 1.0);
        let w_dw = random_tensor(rng, &[d, k], 1.0);
        let w_pw = random_tensor(rng, &[d, w2], 1.0);
        let b_pw = random_tensor(rng, &[w2], 1.0);
        let want = reference::span_key(&x, &w_dw, &w_pw, &b_pw)?;
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = [&x, &w_dw, &w_pw, &b_pw].iter().map(|t| tape.leaf(t)).collect();
        let got = conv::span_key(&mut tape, ids[0], ids[1], ids[2], ids[3])?;
        worst = worst.max(max_abs_diff(&tape, got, &want)?);
    }
    Ok(worst)
}

fn oracle_kernel_gen(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, h, d_head, k) = draw_dims(rng);
        let d = h * d_head;
        let q = random_tensor(rng, &[n, d], 1.0);
        let ks = random_tensor(rng, &[n, d], 1.0);
        let w = random_tensor(rng, &[h, d_head, k], 1.0);
        let want = reference::kernel_gen(&q, &ks, &w)?;
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = [&q, &ks, &w].iter().map(|t| tape.leaf(t)).collect();
        let got = conv::kernel_gen(&mut tape, ids[0], ids[1], ids[2])?;
        worst = worst.max(max_abs_diff(&tape, got, &want)?);
    }
    Ok(worst)
}

fn oracle_sdconv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, h, d_head, k) = draw_dims(rng);
        let d = h * d_head;
        let q = random_tensor(rng, &[n, d], 1.0);
        let ks = random_tensor(rng, &[n, d], 1.0);
        let v = random_tensor(rng, &[n, d], 1.0);
        let w = random_tensor(rng, &[h, d_head, k], 1.0);
        let want = reference::sdconv(&q, &ks, &v, &w)?;
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = [&q, &ks, &v, &w].iter().map(|t| tape.leaf(t)).collect();
        let got = conv::sdconv(&mut tape, ids[0], ids[1], ids[2], ids[3])?;
        worst = worst.max(max_abs_diff(&tape, got, &want)?);
    }
    Ok(worst)
}

fn oracle_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..ORACLE_INSTANCES {
        let (n, h, d_head, _) = draw_dims(rng);
        let d = h * d_head;
        let q = random_tensor(rng, &[n, d], 1.0);
        let k = random_tensor(rng, &[n, d], 1.0);
        let v = random_tensor(rng, &[n, d], 1.0);
        // Every other instance runs under a random padding mask.
        let mask: Option<Vec<bool>> = (i % 2 == 1).then(|| {
            let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            m[0] = true; // keep at least one key visible
            m
        });
        let (want_ctx, want_maps) = reference::attention(&q, &k, &v, h, mask.as_deref())?;
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = [&q, &k, &v].iter().map(|t| tape.leaf(t)).collect();
        let (ctx, maps) =
            attention::self_attention(&mut tape, ids[0], ids[1], ids[2], h, mask.as_deref())?;
        worst = worst.max(max_abs_diff(&tape, ctx, &want_ctx)?);
        for (got_map, want_map) in maps.iter().zip(&want_maps) {
            worst = worst.max(max_abs_diff(&tape, *got_map, want_map)?);
        }
    }
    Ok(worst)
}

fn oracle_grouped_linear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, _, _, _) = draw_dims(rng);
        let g = rng.gen_range(1..=4);
        let in_g = rng.gen_range(1..=4);
        let out_g = rng.gen_range(1..=4);
        let x = random_tensor(rng, &[n, g * in_g], 1.0);
        let w = random_tensor(rng, &[g, in_g, out_g], 1.0);
        let b = random_tensor(rng, &[g * out_g], 1.0);
        let want = reference::grouped_linear(&x, &w, &b)?;
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = [&x, &w, &b].iter().map(|t| tape.leaf(t)).collect();
        let got = encoder::grouped_linear(&mut tape, ids[0], ids[1], ids[2])?;
        worst = worst.max(max_abs_diff(&tape, got, &want)?);
    }
    Ok(worst)
}

fn oracle_layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, _, _, _) = draw_dims(rng);
        let d = rng.gen_range(1..=16);
        let x = random_tensor(rng, &[n, d], 1.0);
        let gamma = random_tensor(rng, &[d], 1.0);
        let beta = random_tensor(rng, &[d], 1.0);
        let want = reference::layer_norm(&x, &gamma, &beta, LN_EPS)?;
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = [&x, &gamma, &beta].iter().map(|t| tape.leaf(t)).collect();
        let got = tape.layer_norm(ids[0], ids[1], ids[2], LN_EPS)?;
        worst = worst.max(max_abs_diff(&tape, got, &want)?);
    }
    Ok(worst)
}

/// The whole mixed block against a composition of naive oracles: shared queries,
/// the attention branch, the span-convolution branch on its own values, column
/// concatenation, and the output projection.
fn oracle_mixed_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let (n, h, d_head, k) = draw_dims(rng);
        let w = h * d_head;
        let d = rng.gen_range(1..=16);
        let x = random_tensor(rng, &[n, d], 1.0);
        let q_w = random_tensor(rng, &[d, w], 1.0);
        let q_b = random_tensor(rng, &[w], 1.0);
        let k_w = random_tensor(rng, &[d, w], 1.0);
        let k_b = random_tensor(rng, &[w], 1.0);
        let v_w = random_tensor(rng, &[d, w], 1.0);
        let v_b = random_tensor(rng, &[w], 1.0);
        let cv_w = random_tensor(rng, &[d, w], 1.0);
        let cv_b = random_tensor(rng, &[w], 1.0);
        let span_dw = random_tensor(rng, &[d, k], 1.0);
        let span_pw_w = random_tensor(rng, &[d, w], 1.0);
        let span_pw_b = random_tensor(rng, &[w], 1.0);
        let kernel_w = random_tensor(rng, &[h, d_head, k], 1.0);
        let out_w = random_tensor(rng, &[2 * w, d], 1.0);
        let out_b = random_tensor(rng, &[d], 1.0);

        let q = ref_linear(&x, &q_w, &q_b)?;
        let key = ref_linear(&x, &k_w, &k_b)?;
        let val = ref_linear(&x, &v_w, &v_b)?;
        let (ctx, _) = reference::attention(&q, &key, &val, h, None)?;
        let v_conv = ref_linear(&x, &cv_w, &cv_b)?;
        let ks = reference::span_key(&x, &span_dw, &span_pw_w, &span_pw_b)?;
        let conv_out = reference::sdconv(&q, &ks, &v_conv, &kernel_w)?;
        let cat = ref_concat(&ctx, &conv_out)?;
        let want = ref_linear(&cat, &out_w, &out_b)?;

        let mut tape = Tape::new();
        let ids: Vec<TensorId> = [
            &x, &q_w, &q_b, &k_w, &k_b, &v_w, &v_b, &cv_w, &cv_b, &span_dw, &span_pw_w,
            &span_pw_b, &kernel_w, &out_w, &out_b,
        ]
        .iter()
        .map(|t| tape.leaf(t))
        .collect();
        let p = AttentionParams {
            q_w: ids[1],
            q_b: ids[2],
            k_w: ids[3],
            k_b: ids[4],
            v_w: ids[5],
            v_b: ids[6],
            conv: Some(ConvBranchParams {
                v_w: ids[7],
                v_b: ids[8],
                span_dw: ids[9],
                span_pw_w: ids[10],
                span_pw_b: ids[11],
                kernel_w: ids[12],
            }),
            out_w: ids[13],
            out_b: ids[14],
        };
        let (got, _) = attention::mixed_attention(&mut tape, ids[0], &p, h, None)?;
        worst = worst.max(max_abs_diff(&tape, got, &want)?);
    }
    Ok(worst)
}

// ── gradient suite ──────────────────────────────────────────────────────────────────

/// Reduces `x` to a scalar through a fixed random weighting, so every output
/// coordinate influences the loss (a plain mean would hide, for instance, any
/// gradient error inside a softmax, whose rows always sum to one).
fn weighted_sum(tape: &mut Tape, x: TensorId, weights: &[f64]) -> Result<TensorId> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(shape, weights.to_vec())?;
    let prod = tape.mul(x, w)?;
    tape.sum(prod)
}

fn draw_weights(rng: &mut ChaCha8Rng, numel: usize) -> Vec<f64> {
    (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Runs the gradient checks for one scope. All randomness derives from `seed`.
pub fn grad_suite(scope: Scope, seed: u64) -> Result<Vec<CheckOutcome>> {
    match scope {
        Scope::Op => grad_suite_ops(seed),
        Scope::Block => grad_suite_blocks(seed),
        Scope::Model => grad_suite_model(seed),
    }
}

fn op_outcome(name: &str, report_err: f64) -> CheckOutcome {
    CheckOutcome { name: name.into(), worst: report_err, tolerance: GRAD_TOL_OP }
}

fn grad_suite_ops(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();
    let case = |i: u64| check_rng(seed.wrapping_add(2000 * i));

    {
        let mut rng = case(0);
        let inputs = [random_tensor(&mut rng, &[5, 4], 1.0), random_tensor(&mut rng, &[4, 3], 1.0)];
        let w = draw_weights(&mut rng, 20);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let y = conv::dwconv(tape, ids[0], ids[1])?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(op_outcome("dwconv", r.max_rel_err));
    }
    {
        let mut rng = case(1);
        let inputs =
            [random_tensor(&mut rng, &[5, 6], 1.0), random_tensor(&mut rng, &[5, 2, 3], 1.0)];
        let w = draw_weights(&mut rng, 30);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let y = conv::lconv(tape, ids[0], ids[1])?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(op_outcome("lconv", r.max_rel_err));
    }
    {
        let mut rng = case(2);
        let inputs =
            [random_tensor(&mut rng, &[4, 6], 1.0), random_tensor(&mut rng, &[2, 3, 3], 1.0)];
        let w = draw_weights(&mut rng, 24);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let y = conv::kernels_from_features(tape, ids[0], ids[1])?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(op_outcome("kernel-generator", r.max_rel_err));
    }
    {
        let mut rng = case(3);
        let inputs = [random_tensor(&mut rng, &[4, 6], 1.0)];
        let w = draw_weights(&mut rng, 12);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let y = conv::glu(tape, ids[0])?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(op_outcome("glu", r.max_rel_err));
    }
    {
        let mut rng = case(4);
        let inputs = [
            random_tensor(&mut rng, &[5, 4], 1.0),
            random_tensor(&mut rng, &[4, 3], 1.0),
            random_tensor(&mut rng, &[4, 3], 1.0),
            random_tensor(&mut rng, &[3], 1.0),
        ];
        let w = draw_weights(&mut rng, 15);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let y = conv::span_key(tape, ids[0], ids[1], ids[2], ids[3])?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(op_outcome("span-key", r.max_rel_err));
    }
    {
        let mut rng = case(5);
        let inputs = [
            random_tensor(&mut rng, &[5, 6], 1.0),
            random_tensor(&mut rng, &[5, 6], 1.0),
            random_tensor(&mut rng, &[5, 6], 1.0),
            random_tensor(&mut rng, &[2, 3, 3], 1.0),
        ];
        let w = draw_weights(&mut rng, 30);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let y = conv::sdconv(tape, ids[0], ids[1], ids[2], ids[3])?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(op_outcome("span-conv", r.max_rel_err));
    }
    for (name, mask) in [
        ("attention", None),
        ("attention-masked", Some(vec![true, false, true, true, false])),
    ] {
        let mut rng = case(if mask.is_some() { 7 } else { 6 });
        let inputs = [
            random_tensor(&mut rng, &[5, 6], 1.0),
            random_tensor(&mut rng, &[5, 6], 1.0),
            random_tensor(&mut rng, &[5, 6], 1.0),
        ];
        let w = draw_weights(&mut rng, 30);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let (ctx, _) = attention::self_attention(tape, ids[0], ids[1], ids[2], 2, mask.as_deref())?;
            weighted_sum(tape, ctx, &w)
        })?;
        out.push(op_outcome(name, r.max_rel_err));
    }
    {
        let mut rng = case(8);
        let inputs = [
            random_tensor(&mut rng, &[4, 6], 1.0),
            random_tensor(&mut rng, &[2, 3, 4], 1.0),
            random_tensor(&mut rng, &[8], 1.0),
        ];
        let w = draw_weights(&mut rng, 32);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let y = encoder::grouped_linear(tape, ids[0], ids[1], ids[2])?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(op_outcome("grouped-linear", r.max_rel_err));
    }
    {
        let mut rng = case(9);
        let inputs = [
            random_tensor(&mut rng, &[4, 6], 1.0),
            random_tensor(&mut rng, &[6], 1.0),
            random_tensor(&mut rng, &[6], 1.0),
        ];
        let w = draw_weights(&mut rng, 24);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(op_outcome("layer-norm", r.max_rel_err));
    }
    {
        let mut rng = case(10);
        let inputs = [random_tensor(&mut rng, &[4, 5], 1.0)];
        let w = draw_weights(&mut rng, 20);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let y = tape.gelu(ids[0])?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(op_outcome("gelu", r.max_rel_err));
    }
    {
        let mut rng = case(11);
        let inputs = [random_tensor(&mut rng, &[4, 6], 1.0)];
        let w = draw_weights(&mut rng, 24);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let y = tape.softmax(ids[0], 1)?;
            weighted_sum(tape, y, &w)
        })?;
        out.push(op_outcome("softmax", r.max_rel_err));
    }
    {
        let mut rng = case(12);
        let inputs = [random_tensor(&mut rng, &[4, 6], 2.0)];
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            cross_entropy_selected(tape, ids[0], &[5, 0, 3, 3])
        })?;
        out.push(op_outcome("cross-entropy", r.max_rel_err));
    }
    {
        let mut rng = case(13);
        let inputs = [random_tensor(&mut rng, &[5, 1], 3.0)];
        let labels = [1.0, 0.0, 0.0, 1.0, 1.0];
        let weights = [1.0, 2.0, 1.0, 0.5, 1.0];
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            bce_with_logits(tape, ids[0], &labels, &weights)
        })?;
        out.push(op_outcome("binary-cross-entropy", r.max_rel_err));
    }
    Ok(out)
}

fn grad_suite_blocks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();

    // Mixed attention at d = 8, width 4, two heads, 3 taps — every branch live.
    for (name, mask) in [
        ("mixed-attention", None),
        ("mixed-attention-masked", Some(vec![true, true, false, true, false])),
    ] {
        let mut rng = check_rng(seed.wrapping_add(if mask.is_some() { 3000 } else { 0 }));
        let (d, w, heads, k) = (8usize, 4usize, 2usize, 3usize);
        let inputs = [
            random_tensor(&mut rng, &[5, d], 1.0),      // 0: x
            random_tensor(&mut rng, &[d, w], 0.5),      // 1: q.weight
            random_tensor(&mut rng, &[w], 0.5),         // 2: q.bias
            random_tensor(&mut rng, &[d, w], 0.5),      // 3: k.weight
            random_tensor(&mut rng, &[w], 0.5),         // 4: k.bias
            random_tensor(&mut rng, &[d, w], 0.5),      // 5: v.weight
            random_tensor(&mut rng, &[w], 0.5),         // 6: v.bias
            random_tensor(&mut rng, &[d, w], 0.5),      // 7: conv value weight
            random_tensor(&mut rng, &[w], 0.5),         // 8: conv value bias
            random_tensor(&mut rng, &[d, k], 0.5),      // 9: span filter
            random_tensor(&mut rng, &[d, w], 0.5),      // 10: span projection weight
            random_tensor(&mut rng, &[w], 0.5),         // 11: span projection bias
            random_tensor(&mut rng, &[heads, w / heads, k], 0.5), // 12: tap-logit map
            random_tensor(&mut rng, &[2 * w, d], 0.5),  // 13: out weight
            random_tensor(&mut rng, &[d], 0.5),         // 14: out bias
        ];
        let wsum = draw_weights(&mut rng, 5 * d);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let p = AttentionParams {
                q_w: ids[1],
                q_b: ids[2],
                k_w: ids[3],
                k_b: ids[4],
                v_w: ids[5],
                v_b: ids[6],
                conv: Some(ConvBranchParams {
                    v_w: ids[7],
                    v_b: ids[8],
                    span_dw: ids[9],
                    span_pw_w: ids[10],
                    span_pw_b: ids[11],
                    kernel_w: ids[12],
                }),
                out_w: ids[13],
                out_b: ids[14],
            };
            let (y, _) = attention::mixed_attention(tape, ids[0], &p, heads, mask.as_deref())?;
            weighted_sum(tape, y, &wsum)
        })?;
        out.push(CheckOutcome { name: name.into(), worst: r.max_rel_err, tolerance: GRAD_TOL_BLOCK });
    }

    // Grouped feed-forward: in → gelu → out.
    {
        let mut rng = check_rng(seed.wrapping_add(6000));
        let inputs = [
            random_tensor(&mut rng, &[5, 8], 1.0),    // x
            random_tensor(&mut rng, &[2, 4, 8], 0.5), // in weight (d 8 → ffn 16, 2 groups)
            random_tensor(&mut rng, &[16], 0.5),      // in bias
            random_tensor(&mut rng, &[2, 8, 4], 0.5), // out weight
            random_tensor(&mut rng, &[8], 0.5),       // out bias
        ];
        let wsum = draw_weights(&mut rng, 40);
        let r = grad_check(&inputs, &cfg, &mut rng, |tape, ids| {
            let h = encoder::grouped_linear(tape, ids[0], ids[1], ids[2])?;
            let h = tape.gelu(h)?;
            let y = encoder::grouped_linear(tape, h, ids[3], ids[4])?;
            weighted_sum(tape, y, &wsum)
        })?;
        out.push(CheckOutcome {
            name: "grouped-feed-forward".into(),
            worst: r.max_rel_err,
            tolerance: GRAD_TOL_BLOCK,
        });
    }
    Ok(out)
}

/// The tiny all-mechanisms model for the whole-model check: two layers of
/// bottlenecked mixed attention with the conv branch and a grouped feed-forward.
fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        embedding: 6,
        ffn_inner: 16,
        groups: 2,
        heads: 4,
        reduction: 2,
        head_dim: 2,
        kernel_size: 3,
        vocab_size: 29,
        max_positions: 16,
        variant: Variant::BottleneckGroupedConv,
    }
}

fn grad_suite_model(seed: u64) -> Result<Vec<CheckOutcome>> {
    // The whole masked-prediction training path: embeddings (projection included),
    // two all-mechanism layers, the prediction head, the tied decode, and the loss.
    let cfg = tiny_model_config();
    let store = ParamStore::init(&cfg, seed);
    let head = ParamStore::from_specs(
        crate::pretrain::mlm_head_specs(cfg.hidden, cfg.embedding, cfg.vocab_size),
        seed.wrapping_add(1),
    );
    let model_index: HashMap<String, usize> =
        param_specs(&cfg).iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
    let head_index: HashMap<String, usize> =
        head.specs().iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
    let n_model = model_index.len();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(head.iter().map(|(_, t)| t.clone()));

    let ids = [crate::vocab::CLS, 7, 9, 11, crate::vocab::SEP];
    let segments = [0usize; 5];
    // Six coordinates per tensor keeps the full-model check affordable while still
    // touching every parameter tensor.
    let check_cfg = GradCheckConfig { max_coords: 6, ..GradCheckConfig::default() };
    let mut rng = check_rng(seed.wrapping_add(9000));
    let r = grad_check(&inputs, &check_cfg, &mut rng, |tape, leaf_ids| {
        let bound = BoundParams::from_parts(leaf_ids[..n_model].to_vec(), model_index.clone());
        let b_head = BoundParams::from_parts(leaf_ids[n_model..].to_vec(), head_index.clone());
        let fwd = encoder::forward(tape, &cfg, &bound, &ids, &segments, None)?;
        let sel = tape.embed_rows(fwd.hidden, &[1, 3])?;
        let logits =
            crate::pretrain::mlm_logits(tape, &b_head, bound.id("embeddings.word")?, sel)?;
        cross_entropy_selected(tape, logits, &[7, 11])
    })?;
    Ok(vec![CheckOutcome {
        name: "model".into(),
        worst: r.max_rel_err,
        tolerance: GRAD_TOL_MODEL,
    }])
}
