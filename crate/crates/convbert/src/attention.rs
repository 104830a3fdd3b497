//! Self-attention and the mixed attention block.
//!
//! [`self_attention`] is standard multi-head scaled dot-product attention over a
//! (possibly width-reduced) projection. [`mixed_attention`] runs two branches side by
//! side on the same input and concatenates their outputs:
//!
//! * an attention branch — queries, keys, and values each projected to the branch
//!   width, attended with `heads` heads;
//! * an optional convolution branch — the *same* queries multiplied with a span key
//!   (depthwise-convolved input, pointwise-projected) generate per-position kernels,
//!   which convolve a separately projected value sequence.
//!
//! Sharing the queries is what makes the pair complementary: the attention branch
//! scores each query against all keys globally, while the convolution branch turns
//! the query into a local mixing kernel over its window.
//!
//! Masking: `mask[i] == false` marks position `i` invalid (padding). Invalid keys
//! receive an additive `-1e30` score bias, which underflows to exactly zero weight
//! after softmax; rows whose keys are all invalid fall back to exactly uniform
//! weights (the bias is constant across the row, and softmax subtracts the row max).
//! Convolution inputs have invalid rows zeroed so padding cannot leak through window
//! overlaps, and the block output zeroes invalid rows outright.

use crate::conv::{kernel_gen, lconv, span_key};
use crate::error::{err, Result};
use crate::tensor::{Tape, TensorId};

/// Additive score bias for masked keys. Large enough that `exp` underflows to zero
/// next to any real score, small enough that `score + MASK_OFF` stays finite.
pub const MASK_OFF: f64 = -1e30;

/// Constant `[n × n]` bias matrix: column `j` is [`MASK_OFF`] when `mask[j]` is false.
fn key_mask_bias(tape: &mut Tape, mask: &[bool]) -> Result<TensorId> {
    let n = mask.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for (j, &valid) in mask.iter().enumerate() {
            if !valid {
                data[i * n + j] = MASK_OFF;
            }
        }
    }
    tape.constant(vec![n, n], data)
}

/// Constant `[n]` vector of 1.0 for valid rows and 0.0 for invalid ones.
fn row_mask(tape: &mut Tape, mask: &[bool]) -> Result<TensorId> {
    tape.constant(vec![mask.len()], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
}

/// Multi-head scaled dot-product attention.
///
/// `q`, `k`, `v` are `[n × w]` with `w` divisible by `heads`; each head attends over
/// its own `w/heads`-wide slice with scores scaled by `1/√(w/heads)`. Returns the
/// `[n × w]` context and one `[n × n]` probability map per head (softmax rows for
/// every query position, including masked ones; only the context zeroes masked rows).
pub fn self_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(TensorId, Vec<TensorId>)> {
    let (n, w) = match tape.value(q).shape() {
        [r, c] => (*r, *c),
        s => return Err(err!(Dim, "attention query must be 2-D, got {s:?}")),
    };
    if tape.value(k).shape() != [n, w] || tape.value(v).shape() != [n, w] {
        return Err(err!(
            Dim,
            "attention q {:?}, k {:?}, v {:?} must agree",
            tape.value(q).shape(),
            tape.value(k).shape(),
            tape.value(v).shape()
        ));
    }
    if heads == 0 || w % heads != 0 {
        return Err(err!(Dim, "attention width {w} not divisible into {heads} heads"));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(err!(Dim, "attention mask length {} vs {n} positions", m.len()));
        }
    }
    let d_head = w / heads;
    let bias = mask.map(|m| key_mask_bias(tape, m)).transpose()?;

    let mut contexts = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let mut scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt())?;
        if let Some(b) = bias {
            scaled = tape.add(scaled, b)?;
        }
        let probs = tape.softmax(scaled, 1)?;
        contexts.push(tape.matmul(probs, vh)?);
        maps.push(probs);
    }
    let mut ctx = tape.concat_cols(&contexts)?;
    if let Some(m) = mask {
        let rows = row_mask(tape, m)?;
        ctx = tape.scale_rows(ctx, rows)?;
    }
    Ok((ctx, maps))
}

/// Parameters of the convolution branch of a mixed attention block.
#[derive(Debug, Clone, Copy)]
pub struct ConvBranchParams {
    /// Value projection `[d × w]` and bias `[w]`, separate from the attention values.
    pub v_w: TensorId,
    pub v_b: TensorId,
    /// Depthwise span filter `[d × k]` over the raw input.
    pub span_dw: TensorId,
    /// Pointwise span projection `[d × w]` and bias `[w]`.
    pub span_pw_w: TensorId,
    pub span_pw_b: TensorId,
    /// Per-head tap-logit map `[heads × w/heads × k]`; no bias.
    pub kernel_w: TensorId,
}

/// Parameters of one mixed attention block. Branch width `w` is the column count of
/// `q_w`; the output projection takes `[w × d]` without a convolution branch and
/// `[2w × d]` with one.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q_w: TensorId,
    pub q_b: TensorId,
    pub k_w: TensorId,
    pub k_b: TensorId,
    pub v_w: TensorId,
    pub v_b: TensorId,
    pub conv: Option<ConvBranchParams>,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

/// Mixed attention over input `x` `[n × d]`: attention branch plus (optionally) the
/// span-aware convolution branch, concatenated and projected back to `[n × d]`.
/// Returns the block output and the attention branch's per-head probability maps.
pub fn mixed_attention(
    tape: &mut Tape,
    x: TensorId,
    p: &AttentionParams,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(TensorId, Vec<TensorId>)> {
    let q = tape.linear(x, p.q_w, p.q_b)?;
    let k = tape.linear(x, p.k_w, p.k_b)?;
    let v = tape.linear(x, p.v_w, p.v_b)?;
    let (attn_ctx, maps) = self_attention(tape, q, k, v, heads, mask)?;

    let rows = mask.map(|m| row_mask(tape, m)).transpose()?;
    let merged = match &p.conv {
        Some(c) => {
            // Zero invalid rows of the convolution inputs: the span filter and the
            // value convolution both read neighbouring rows, and padding must not
            // leak into valid positions through those windows.
            let x_conv = match rows {
                Some(r) => tape.scale_rows(x, r)?,
                None => x,
            };
            let ks = span_key(tape, x_conv, c.span_dw, c.span_pw_w, c.span_pw_b)?;
            let mut v_conv = tape.linear(x_conv, c.v_w, c.v_b)?;
            if let Some(r) = rows {
                v_conv = tape.scale_rows(v_conv, r)?;
            }
            let kernels = kernel_gen(tape, q, ks, c.kernel_w)?;
            let conv_out = lconv(tape, v_conv, kernels)?;
            tape.concat_cols(&[attn_ctx, conv_out])?
        }
        None => attn_ctx,
    };
    let mut out = tape.linear(merged, p.out_w, p.out_b)?;
    if let Some(r) = rows {
        out = tape.scale_rows(out, r)?;
    }
    Ok((out, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::reference;
    use crate::tensor::Tensor;
    use crate::testutil::{assert_close, seeded_rng, uniform_tensor};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_matches_oracle_across_head_counts() {
        let mut rng = seeded_rng(60);
        for heads in [1usize, 2, 4] {
            let q = uniform_tensor(&mut rng, &[5, 8], 1.0);
            let k = uniform_tensor(&mut rng, &[5, 8], 1.0);
            let v = uniform_tensor(&mut rng, &[5, 8], 1.0);
            let mut tape = Tape::new();
            let (qi, ki, vi) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
            let (ctx, maps) = self_attention(&mut tape, qi, ki, vi, heads, None).unwrap();
            let (want_ctx, want_maps) = reference::attention(&q, &k, &v, heads, None).unwrap();
            assert_close(tape.value(ctx).data(), want_ctx.data(), 1e-12);
            assert_eq!(maps.len(), heads);
            for (m, want) in maps.iter().zip(&want_maps) {
                assert_close(tape.value(*m).data(), want.data(), 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_oracle_under_mask() {
        let mut rng = seeded_rng(61);
        let q = uniform_tensor(&mut rng, &[6, 4], 1.0);
        let k = uniform_tensor(&mut rng, &[6, 4], 1.0);
        let v = uniform_tensor(&mut rng, &[6, 4], 1.0);
        let mask = [true, true, false, true, false, true];
        let mut tape = Tape::new();
        let (qi, ki, vi) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let (ctx, maps) = self_attention(&mut tape, qi, ki, vi, 2, Some(&mask)).unwrap();
        let (want_ctx, want_maps) = reference::attention(&q, &k, &v, 2, Some(&mask)).unwrap();
        assert_close(tape.value(ctx).data(), want_ctx.data(), 1e-12);
        for (m, want) in maps.iter().zip(&want_maps) {
            assert_close(tape.value(*m).data(), want.data(), 1e-12);
        }
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let mut rng = seeded_rng(62);
        let q = uniform_tensor(&mut rng, &[4, 4], 2.0);
        let k = uniform_tensor(&mut rng, &[4, 4], 2.0);
        let v = uniform_tensor(&mut rng, &[4, 4], 2.0);
        let mask = [true, false, true, false];
        let mut tape = Tape::new();
        let (qi, ki, vi) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let (_, maps) = self_attention(&mut tape, qi, ki, vi, 1, Some(&mask)).unwrap();
        let probs = tape.value(maps[0]).data();
        for i in 0..4 {
            assert_eq!(probs[i * 4 + 1], 0.0);
            assert_eq!(probs[i * 4 + 3], 0.0);
            let sum: f64 = probs[i * 4..(i + 1) * 4].iter().sum();
            assert_close(&[sum], &[1.0], 1e-12);
        }
    }

    #[test]
    fn all_masked_keys_fall_back_to_exactly_uniform() {
        let mut rng = seeded_rng(63);
        let q = uniform_tensor(&mut rng, &[3, 2], 1.0);
        let k = uniform_tensor(&mut rng, &[3, 2], 1.0);
        let v = uniform_tensor(&mut rng, &[3, 2], 1.0);
        let mask = [false, false, false];
        let mut tape = Tape::new();
        let (qi, ki, vi) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let (ctx, maps) = self_attention(&mut tape, qi, ki, vi, 1, Some(&mask)).unwrap();
        let probs = tape.value(maps[0]).data();
        assert!(probs.iter().all(|&p| p == 1.0 / 3.0));
        // Every query row is masked, so the whole context is zeroed.
        assert!(tape.value(ctx).data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut rng = seeded_rng(64);
        let q = uniform_tensor(&mut rng, &[1, 6], 1.0);
        let k = uniform_tensor(&mut rng, &[1, 6], 1.0);
        let v = uniform_tensor(&mut rng, &[1, 6], 1.0);
        let mut tape = Tape::new();
        let (qi, ki, vi) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let (ctx, maps) = self_attention(&mut tape, qi, ki, vi, 3, None).unwrap();
        assert_eq!(tape.value(ctx).data(), v.data());
        for m in &maps {
            assert_eq!(tape.value(*m).data(), &[1.0]);
        }
    }

    #[test]
    fn zero_queries_average_the_values() {
        // All scores equal ⇒ uniform weights ⇒ each output row is the value mean.
        let mut rng = seeded_rng(65);
        let q = Tensor::zeros(vec![4, 4]).unwrap();
        let k = uniform_tensor(&mut rng, &[4, 4], 1.0);
        let v = uniform_tensor(&mut rng, &[4, 4], 1.0);
        let mut tape = Tape::new();
        let (qi, ki, vi) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let (ctx, _) = self_attention(&mut tape, qi, ki, vi, 2, None).unwrap();
        let mut mean = vec![0.0; 4];
        for i in 0..4 {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += v.data()[i * 4 + c] / 4.0;
            }
        }
        for i in 0..4 {
            assert_close(&tape.value(ctx).data()[i * 4..(i + 1) * 4], &mean, 1e-12);
        }
    }

    #[test]
    fn attention_gradients_pass_finite_differences() {
        let mut rng = seeded_rng(66);
        let q = uniform_tensor(&mut rng, &[4, 4], 1.0);
        let k = uniform_tensor(&mut rng, &[4, 4], 1.0);
        let v = uniform_tensor(&mut rng, &[4, 4], 1.0);
        let report = grad_check(
            &[q, k, v],
            &GradCheckConfig::default(),
            &mut seeded_rng(67),
            |tape, ids| {
                let (ctx, _) = self_attention(tape, ids[0], ids[1], ids[2], 2, None)?;
                let sq = tape.mul(ctx, ctx)?;
                tape.sum(sq)
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    /// Input plus every parameter of a conv-branch block, in a fixed order so tests
    /// can rebuild `AttentionParams` from leaf ids.
    fn block_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize, w: usize, k: usize) -> Vec<Tensor> {
        vec![
            uniform_tensor(rng, &[n, d], 1.0),  // x
            uniform_tensor(rng, &[d, w], 0.5),  // q_w
            uniform_tensor(rng, &[w], 0.5),     // q_b
            uniform_tensor(rng, &[d, w], 0.5),  // k_w
            uniform_tensor(rng, &[w], 0.5),     // k_b
            uniform_tensor(rng, &[d, w], 0.5),  // v_w
            uniform_tensor(rng, &[w], 0.5),     // v_b
            uniform_tensor(rng, &[d, w], 0.5),  // conv v_w
            uniform_tensor(rng, &[w], 0.5),     // conv v_b
            uniform_tensor(rng, &[d, k], 0.5),  // span_dw
            uniform_tensor(rng, &[d, w], 0.5),  // span_pw_w
            uniform_tensor(rng, &[w], 0.5),     // span_pw_b
            uniform_tensor(rng, &[2, w / 2, k], 0.5), // kernel_w (2 heads)
            uniform_tensor(rng, &[2 * w, d], 0.5), // out_w
            uniform_tensor(rng, &[d], 0.5),     // out_b
        ]
    }

    fn params_from_ids(ids: &[TensorId]) -> AttentionParams {
        AttentionParams {
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
        }
    }

    #[test]
    fn mixed_block_shapes_and_map_rows() {
        let inputs = block_inputs(&mut seeded_rng(68), 5, 6, 4, 3);
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let p = params_from_ids(&ids);
        let (out, maps) = mixed_attention(&mut tape, ids[0], &p, 2, None).unwrap();
        assert_eq!(tape.value(out).shape(), &[5, 6]);
        assert_eq!(maps.len(), 2);
        for m in &maps {
            assert_eq!(tape.value(*m).shape(), &[5, 5]);
            for i in 0..5 {
                let sum: f64 = tape.value(*m).data()[i * 5..(i + 1) * 5].iter().sum();
                assert_close(&[sum], &[1.0], 1e-12);
            }
        }
    }

    #[test]
    fn padding_content_cannot_reach_valid_rows() {
        // Rewrite the padded rows' input arbitrarily: every valid output row must be
        // bit-identical, through both the attention and the convolution branch.
        let inputs = block_inputs(&mut seeded_rng(69), 6, 6, 4, 3);
        let mask = [true, true, true, false, true, false];
        let run = |x: &Tensor, rest: &[Tensor]| {
            let mut tape = Tape::new();
            let mut ids = vec![tape.leaf(x)];
            ids.extend(rest.iter().map(|t| tape.leaf(t)));
            let p = params_from_ids(&ids);
            let (out, _) = mixed_attention(&mut tape, ids[0], &p, 2, Some(&mask)).unwrap();
            tape.value(out).data().to_vec()
        };

        let baseline = run(&inputs[0], &inputs[1..]);
        let mut poisoned = inputs[0].clone();
        for c in 0..6 {
            poisoned.data_mut()[3 * 6 + c] = 1e6;
            poisoned.data_mut()[5 * 6 + c] = -1e6;
        }
        let changed = run(&poisoned, &inputs[1..]);
        for i in [0usize, 1, 2, 4] {
            assert_eq!(baseline[i * 6..(i + 1) * 6], changed[i * 6..(i + 1) * 6], "row {i}");
        }
        // Masked output rows are zeroed outright.
        for i in [3usize, 5] {
            assert!(changed[i * 6..(i + 1) * 6].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mixed_block_gradients_pass_finite_differences() {
        let inputs = block_inputs(&mut seeded_rng(70), 4, 4, 4, 3);
        let cfg = GradCheckConfig { eps: 1e-5, max_coords: 12 };
        let report = grad_check(&inputs, &cfg, &mut seeded_rng(71), |tape, ids| {
            let p = params_from_ids(ids);
            let (out, _) = mixed_attention(tape, ids[0], &p, 2, None)?;
            let sq = tape.mul(out, out)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn mixed_block_without_conv_is_plain_attention_projection() {
        let mut rng = seeded_rng(72);
        let x = uniform_tensor(&mut rng, &[4, 6], 1.0);
        let q_w = uniform_tensor(&mut rng, &[6, 4], 0.5);
        let q_b = uniform_tensor(&mut rng, &[4], 0.5);
        let k_w = uniform_tensor(&mut rng, &[6, 4], 0.5);
        let k_b = uniform_tensor(&mut rng, &[4], 0.5);
        let v_w = uniform_tensor(&mut rng, &[6, 4], 0.5);
        let v_b = uniform_tensor(&mut rng, &[4], 0.5);
        let out_w = uniform_tensor(&mut rng, &[4, 6], 0.5);
        let out_b = uniform_tensor(&mut rng, &[6], 0.5);

        let mut tape = Tape::new();
        let p = AttentionParams {
            q_w: tape.leaf(&q_w),
            q_b: tape.leaf(&q_b),
            k_w: tape.leaf(&k_w),
            k_b: tape.leaf(&k_b),
            v_w: tape.leaf(&v_w),
            v_b: tape.leaf(&v_b),
            conv: None,
            out_w: tape.leaf(&out_w),
            out_b: tape.leaf(&out_b),
        };
        let xi = tape.leaf(&x);
        let (out, maps) = mixed_attention(&mut tape, xi, &p, 2, None).unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 6]);
        assert_eq!(maps.len(), 2);

        // Oracle: project, attend, project back.
        let lin = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let mut y = reference::matmul(x, w).unwrap();
            let cols = y.cols();
            for i in 0..y.rows() {
                for j in 0..cols {
                    y.data_mut()[i * cols + j] += b.data()[j];
                }
            }
            y
        };
        let (ctx, _) =
            reference::attention(&lin(&x, &q_w, &q_b), &lin(&x, &k_w, &k_b), &lin(&x, &v_w, &v_b), 2, None)
                .unwrap();
        let want = lin(&ctx, &out_w, &out_b);
        assert_close(tape.value(out).data(), want.data(), 1e-12);
    }
}
