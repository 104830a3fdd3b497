//! Convolution ops over `[positions × channels]` sequences.
//!
//! Three primitives carry the convolution side of the model:
//!
//! * [`dwconv`] — classic depthwise convolution: one fixed k-tap filter per channel,
//!   slid along the position axis.
//! * [`lconv`] — per-position convolution: every position brings its own kernel,
//!   shared across the channels of a head and normalized to sum to one.
//! * [`kernels_from_features`] — turns a feature map into those per-position kernels
//!   (a per-head linear map to k logits, softmaxed over the taps).
//!
//! The composites build on them: [`dconv`] generates kernels from each position's own
//! feature vector (so identical inputs get identical kernels no matter the context),
//! while [`sdconv`] multiplies queries with a depthwise-convolved "span key" first,
//! letting the kernel see a window of neighbours before it is generated. All
//! convolutions zero-pad at the sequence edges and require an odd tap count so the
//! window is centred.

use crate::error::{err, Result};
use crate::tensor::{Grads, Op, Tape, TensorId, Values};

fn require_2d(tape: &Tape, id: TensorId, who: &str) -> Result<(usize, usize)> {
    match tape.value(id).shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(err!(Dim, "{who} expects a 2-D tensor, got shape {s:?}")),
    }
}

fn require_odd_taps(k: usize, who: &str) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(err!(Dim, "{who} needs an odd tap count for a centred window, got {k}"));
    }
    Ok(())
}

// ── depthwise convolution ───────────────────────────────────────────────────────────

#[derive(Debug)]
struct DwConv {
    x: TensorId,
    w: TensorId,
    n: usize,
    d: usize,
    k: usize,
}

impl Op for DwConv {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let (n, d, k) = (self.n, self.d, self.k);
        let center = (k - 1) / 2;
        if grads.wants(self.x) {
            let w = vals.data(self.w);
            grads.with(self.x, |dx| {
                for i in 0..n {
                    for j in 0..k {
                        let src = i as isize + j as isize - center as isize;
                        if src < 0 || src as usize >= n {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            dx[src * d + c] += g[i * d + c] * w[c * k + j];
                        }
                    }
                }
            });
        }
        if grads.wants(self.w) {
            let x = vals.data(self.x);
            grads.with(self.w, |dw| {
                for i in 0..n {
                    for j in 0..k {
                        let src = i as isize + j as isize - center as isize;
                        if src < 0 || src as usize >= n {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            dw[c * k + j] += g[i * d + c] * x[src * d + c];
                        }
                    }
                }
            });
        }
    }
}

/// Depthwise convolution: `out[i][c] = Σ_j x[i + j - (k-1)/2][c] · w[c][j]` with zero
/// padding past the sequence ends. `x` is `[n × d]`, `w` is `[d × k]`.
pub fn dwconv(tape: &mut Tape, x: TensorId, w: TensorId) -> Result<TensorId> {
    let (n, d) = require_2d(tape, x, "dwconv input")?;
    let (wd, k) = require_2d(tape, w, "dwconv weights")?;
    if wd != d {
        return Err(err!(Dim, "dwconv: input has {d} channels but weights cover {wd}"));
    }
    require_odd_taps(k, "dwconv")?;

    let xv = tape.value(x).data();
    let wv = tape.value(w).data();
    let center = (k - 1) / 2;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        // Clip the tap range once per position instead of testing every tap.
        let j_lo = center.saturating_sub(i);
        let j_hi = k.min(n + center - i);
        for j in j_lo..j_hi {
            let src = i + j - center;
            for c in 0..d {
                out[i * d + c] += xv[src * d + c] * wv[c * k + j];
            }
        }
    }
    let value = crate::tensor::Tensor::new(vec![n, d], out)?;
    Ok(tape.record(value, vec![x, w], Box::new(DwConv { x, w, n, d, k }), (n * d * k) as u64))
}

// ── per-position convolution ────────────────────────────────────────────────────────

#[derive(Debug)]
struct LConv {
    v: TensorId,
    kernels: TensorId,
    n: usize,
    d: usize,
    heads: usize,
    k: usize,
}

impl Op for LConv {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let (n, d, heads, k) = (self.n, self.d, self.heads, self.k);
        let group = d / heads;
        let center = (k - 1) / 2;
        if grads.wants(self.v) {
            let ker = vals.data(self.kernels);
            grads.with(self.v, |dv| {
                for i in 0..n {
                    for j in 0..k {
                        let src = i as isize + j as isize - center as isize;
                        if src < 0 || src as usize >= n {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            dv[src * d + c] += g[i * d + c] * ker[(i * heads + c / group) * k + j];
                        }
                    }
                }
            });
        }
        if grads.wants(self.kernels) {
            let v = vals.data(self.v);
            grads.with(self.kernels, |dk| {
                for i in 0..n {
                    for j in 0..k {
                        let src = i as isize + j as isize - center as isize;
                        if src < 0 || src as usize >= n {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            dk[(i * heads + c / group) * k + j] += g[i * d + c] * v[src * d + c];
                        }
                    }
                }
            });
        }
    }
}

/// Per-position convolution: `out[i][c] = Σ_j kernels[i][head(c)][j] · v[i+j-(k-1)/2][c]`
/// with zero padding. `v` is `[n × d]`; `kernels` is `[n × heads × k]` and channels
/// split into `heads` contiguous groups that share a kernel.
pub fn lconv(tape: &mut Tape, v: TensorId, kernels: TensorId) -> Result<TensorId> {
    let (n, d) = require_2d(tape, v, "lconv values")?;
    let (kn, heads, k) = match tape.value(kernels).shape() {
        [a, b, c] => (*a, *b, *c),
        s => return Err(err!(Dim, "lconv kernels must be [n × heads × k], got {s:?}")),
    };
    if kn != n {
        return Err(err!(Dim, "lconv: {n} value positions but kernels for {kn}"));
    }
    if d % heads != 0 {
        return Err(err!(Dim, "lconv: {d} channels not divisible into {heads} heads"));
    }
    require_odd_taps(k, "lconv")?;

    let vv = tape.value(v).data();
    let kv = tape.value(kernels).data();
    let group = d / heads;
    let center = (k - 1) / 2;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let j_lo = center.saturating_sub(i);
        let j_hi = k.min(n + center - i);
        for j in j_lo..j_hi {
            let src = i + j - center;
            for c in 0..d {
                out[i * d + c] += kv[(i * heads + c / group) * k + j] * vv[src * d + c];
            }
        }
    }
    let value = crate::tensor::Tensor::new(vec![n, d], out)?;
    Ok(tape.record(
        value,
        vec![v, kernels],
        Box::new(LConv { v, kernels, n, d, heads, k }),
        (n * d * k) as u64,
    ))
}

// ── kernel generation ───────────────────────────────────────────────────────────────

/// Per-head linear map from features to tap logits: block `h` of the output is
/// `features[:, h·d_head..(h+1)·d_head] · w[h]`.
#[derive(Debug)]
struct HeadwiseMatMul {
    feats: TensorId,
    w: TensorId,
    n: usize,
    heads: usize,
    d_head: usize,
    k: usize,
}

impl Op for HeadwiseMatMul {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let (n, heads, d_head, k) = (self.n, self.heads, self.d_head, self.k);
        let d = heads * d_head;
        if grads.wants(self.feats) {
            let w = vals.data(self.w);
            grads.with(self.feats, |df| {
                for i in 0..n {
                    for h in 0..heads {
                        for p in 0..d_head {
                            let mut acc = 0.0;
                            for j in 0..k {
                                acc += g[(i * heads + h) * k + j] * w[(h * d_head + p) * k + j];
                            }
                            df[i * d + h * d_head + p] += acc;
                        }
                    }
                }
            });
        }
        if grads.wants(self.w) {
            let f = vals.data(self.feats);
            grads.with(self.w, |dw| {
                for i in 0..n {
                    for h in 0..heads {
                        for p in 0..d_head {
                            let fv = f[i * d + h * d_head + p];
                            for j in 0..k {
                                dw[(h * d_head + p) * k + j] += fv * g[(i * heads + h) * k + j];
                            }
                        }
                    }
                }
            });
        }
    }
}

/// Per-position, per-head convolution kernels from a feature map: head `h` of
/// `features[n × d]` times `w[h]` (shape `[d/heads × k]`), softmax-normalized over the
/// taps so every kernel is a probability distribution. Returns `[n × heads × k]`.
pub fn kernels_from_features(tape: &mut Tape, features: TensorId, w: TensorId) -> Result<TensorId> {
    let (n, d) = require_2d(tape, features, "kernel generator features")?;
    let (heads, d_head, k) = match tape.value(w).shape() {
        [a, b, c] => (*a, *b, *c),
        s => return Err(err!(Dim, "kernel weights must be [heads × d_head × k], got {s:?}")),
    };
    if heads * d_head != d {
        return Err(err!(
            Dim,
            "kernel weights for {heads} heads of width {d_head} do not tile {d} channels"
        ));
    }
    require_odd_taps(k, "kernel generator")?;

    let fv = tape.value(features).data();
    let wv = tape.value(w).data();
    let mut logits = vec![0.0; n * heads * k];
    for i in 0..n {
        for h in 0..heads {
            for p in 0..d_head {
                let f = fv[i * d + h * d_head + p];
                for j in 0..k {
                    logits[(i * heads + h) * k + j] += f * wv[(h * d_head + p) * k + j];
                }
            }
        }
    }
    let value = crate::tensor::Tensor::new(vec![n, heads, k], logits)?;
    let raw = tape.record(
        value,
        vec![features, w],
        Box::new(HeadwiseMatMul { feats: features, w, n, heads, d_head, k }),
        (n * d * k) as u64,
    );
    tape.softmax(raw, 2)
}

// ── composites ──────────────────────────────────────────────────────────────────────

/// Gated linear unit over the channel axis: the first half of the columns gated by
/// the sigmoid of the second half. `x` is `[n × 2c]`, result `[n × c]`.
pub fn glu(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let (_, c2) = require_2d(tape, x, "glu input")?;
    if c2 % 2 != 0 {
        return Err(err!(Dim, "glu needs an even channel count to split, got {c2}"));
    }
    let c = c2 / 2;
    let left = tape.slice_cols(x, 0, c)?;
    let gate = tape.slice_cols(x, c, c)?;
    let gate = tape.sigmoid(gate)?;
    tape.mul(left, gate)
}

/// Dynamic convolution whose kernels depend only on each position's own feature
/// vector: identical rows of `x` always get identical kernels, however different
/// their neighbourhoods.
pub fn dconv(tape: &mut Tape, x: TensorId, w: TensorId) -> Result<TensorId> {
    let kernels = kernels_from_features(tape, x, w)?;
    lconv(tape, x, kernels)
}

/// Span key: depthwise convolution over the input followed by a pointwise projection,
/// `dwconv(x, w_dw) · w_pw + b_pw`, giving every position a summary of its window.
pub fn span_key(
    tape: &mut Tape,
    x: TensorId,
    w_dw: TensorId,
    w_pw: TensorId,
    b_pw: TensorId,
) -> Result<TensorId> {
    let conv = dwconv(tape, x, w_dw)?;
    tape.linear(conv, w_pw, b_pw)
}

/// Kernels for the span-aware dynamic convolution: generated from the pointwise
/// product of the query and span key, so the logits see a whole window rather than a
/// single token. `q` and `ks` are `[n × d]`, `w` is `[heads × d/heads × k]`.
pub fn kernel_gen(tape: &mut Tape, q: TensorId, ks: TensorId, w: TensorId) -> Result<TensorId> {
    if tape.value(q).shape() != tape.value(ks).shape() {
        return Err(err!(
            Dim,
            "kernel_gen: query {:?} vs span key {:?}",
            tape.value(q).shape(),
            tape.value(ks).shape()
        ));
    }
    let prod = tape.mul(q, ks)?;
    kernels_from_features(tape, prod, w)
}

/// Span-aware dynamic convolution: kernels from [`kernel_gen`] applied to the values
/// with [`lconv`].
pub fn sdconv(
    tape: &mut Tape,
    q: TensorId,
    ks: TensorId,
    v: TensorId,
    w: TensorId,
) -> Result<TensorId> {
    let kernels = kernel_gen(tape, q, ks, w)?;
    lconv(tape, v, kernels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::reference;
    use crate::tensor::Tensor;
    use crate::testutil::{assert_close, seeded_rng, uniform_tensor};

    #[test]
    fn dwconv_single_center_tap_is_identity() {
        let x = uniform_tensor(&mut seeded_rng(20), &[5, 3], 1.0);
        let w = Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap();
        let mut tape = Tape::new();
        let (xi, wi) = (tape.leaf(&x), tape.leaf(&w));
        let y = dwconv(&mut tape, xi, wi).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn dwconv_last_tap_shifts_left_and_zero_pads() {
        // Kernel [0, 0, 1] reads the next position; the final row has no successor.
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let (xi, wi) = (tape.leaf(&x), tape.leaf(&w));
        let y = dwconv(&mut tape, xi, wi).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn dwconv_matches_oracle() {
        let mut rng = seeded_rng(21);
        for k in [1usize, 3, 5, 9] {
            let x = uniform_tensor(&mut rng, &[7, 6], 1.0);
            let w = uniform_tensor(&mut rng, &[6, k], 1.0);
            let mut tape = Tape::new();
            let (xi, wi) = (tape.leaf(&x), tape.leaf(&w));
            let y = dwconv(&mut tape, xi, wi).unwrap();
            let want = reference::dwconv(&x, &w).unwrap();
            assert_close(tape.value(y).data(), want.data(), 1e-12);
        }
    }

    #[test]
    fn dwconv_rejects_even_tap_count() {
        let x = uniform_tensor(&mut seeded_rng(22), &[4, 2], 1.0);
        let w = uniform_tensor(&mut seeded_rng(23), &[2, 4], 1.0);
        let mut tape = Tape::new();
        let (xi, wi) = (tape.leaf(&x), tape.leaf(&w));
        match dwconv(&mut tape, xi, wi) {
            Err(Error::Dim(msg)) => assert!(msg.contains("odd")),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn dwconv_gradients_pass_finite_differences() {
        let mut rng = seeded_rng(24);
        let x = uniform_tensor(&mut rng, &[6, 4], 1.0);
        let w = uniform_tensor(&mut rng, &[4, 3], 1.0);
        let report = grad_check(
            &[x, w],
            &GradCheckConfig::default(),
            &mut seeded_rng(25),
            |tape, ids| {
                let y = dwconv(tape, ids[0], ids[1])?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn lconv_one_hot_center_kernels_reproduce_values_exactly() {
        let v = uniform_tensor(&mut seeded_rng(26), &[5, 4], 1.0);
        let mut ker = Tensor::zeros(vec![5, 2, 3]).unwrap();
        for lane in 0..10 {
            ker.data_mut()[lane * 3 + 1] = 1.0;
        }
        let mut tape = Tape::new();
        let (vi, ki) = (tape.leaf(&v), tape.leaf(&ker));
        let y = lconv(&mut tape, vi, ki).unwrap();
        assert_eq!(tape.value(y).data(), v.data());
    }

    #[test]
    fn lconv_uniform_kernels_average_the_window() {
        // Position 0 of [1, 2, 3] sees only two in-window values; zero padding means
        // the uniform kernel still divides by three: (0 + 1 + 2) / 3.
        let v = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let third = 1.0 / 3.0;
        let ker = Tensor::new(vec![3, 1, 3], vec![third; 9]).unwrap();
        let mut tape = Tape::new();
        let (vi, ki) = (tape.leaf(&v), tape.leaf(&ker));
        let y = lconv(&mut tape, vi, ki).unwrap();
        assert_close(tape.value(y).data(), &[1.0, 2.0, 5.0 / 3.0], 1e-12);
    }

    #[test]
    fn lconv_matches_oracle_across_head_counts() {
        let mut rng = seeded_rng(27);
        for heads in [1usize, 2, 4] {
            let v = uniform_tensor(&mut rng, &[6, 8], 1.0);
            let ker = uniform_tensor(&mut rng, &[6, heads, 5], 1.0);
            let mut tape = Tape::new();
            let (vi, ki) = (tape.leaf(&v), tape.leaf(&ker));
            let y = lconv(&mut tape, vi, ki).unwrap();
            let want = reference::lconv(&v, &ker).unwrap();
            assert_close(tape.value(y).data(), want.data(), 1e-12);
        }
    }

    #[test]
    fn lconv_output_row_ignores_values_outside_its_window() {
        let v = uniform_tensor(&mut seeded_rng(28), &[8, 4], 1.0);
        let ker = uniform_tensor(&mut seeded_rng(29), &[8, 2, 3], 1.0);
        let row = |t: &Tensor, i: usize| t.data()[i * 4..(i + 1) * 4].to_vec();

        let mut tape = Tape::new();
        let (vi, ki) = (tape.leaf(&v), tape.leaf(&ker));
        let y = lconv(&mut tape, vi, ki).unwrap();
        let before = row(tape.value(y), 4);

        // Perturbing position 7 is outside position 4's window of radius 1.
        let mut v2 = v.clone();
        for e in &mut v2.data_mut()[7 * 4..8 * 4] {
            *e += 10.0;
        }
        let mut tape = Tape::new();
        let (vi, ki) = (tape.leaf(&v2), tape.leaf(&ker));
        let y = lconv(&mut tape, vi, ki).unwrap();
        assert_eq!(row(tape.value(y), 4), before);
    }

    #[test]
    fn lconv_rejects_mismatched_kernel_positions() {
        let v = uniform_tensor(&mut seeded_rng(30), &[4, 4], 1.0);
        let ker = uniform_tensor(&mut seeded_rng(31), &[5, 2, 3], 1.0);
        let mut tape = Tape::new();
        let (vi, ki) = (tape.leaf(&v), tape.leaf(&ker));
        assert!(matches!(lconv(&mut tape, vi, ki), Err(Error::Dim(_))));
    }

    #[test]
    fn lconv_gradients_pass_finite_differences() {
        let mut rng = seeded_rng(32);
        let v = uniform_tensor(&mut rng, &[5, 4], 1.0);
        let ker = uniform_tensor(&mut rng, &[5, 2, 3], 1.0);
        let report = grad_check(
            &[v, ker],
            &GradCheckConfig::default(),
            &mut seeded_rng(33),
            |tape, ids| {
                let y = lconv(tape, ids[0], ids[1])?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn kernel_rows_are_probability_distributions() {
        let mut rng = seeded_rng(34);
        let feats = uniform_tensor(&mut rng, &[6, 8], 2.0);
        let w = uniform_tensor(&mut rng, &[2, 4, 5], 1.0);
        let mut tape = Tape::new();
        let (fi, wi) = (tape.leaf(&feats), tape.leaf(&w));
        let ker = kernels_from_features(&mut tape, fi, wi).unwrap();
        let data = tape.value(ker).data();
        assert_eq!(tape.value(ker).shape(), &[6, 2, 5]);
        for lane in 0..12 {
            let sum: f64 = data[lane * 5..(lane + 1) * 5].iter().sum();
            assert_close(&[sum], &[1.0], 1e-12);
            assert!(data[lane * 5..(lane + 1) * 5].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn kernels_match_oracle() {
        let mut rng = seeded_rng(35);
        let feats = uniform_tensor(&mut rng, &[5, 6], 1.0);
        let w = uniform_tensor(&mut rng, &[3, 2, 3], 1.0);
        let mut tape = Tape::new();
        let (fi, wi) = (tape.leaf(&feats), tape.leaf(&w));
        let ker = kernels_from_features(&mut tape, fi, wi).unwrap();
        let want = reference::kernels_from_features(&feats, &w).unwrap();
        assert_close(tape.value(ker).data(), want.data(), 1e-12);
    }

    #[test]
    fn glu_matches_oracle_and_gradients_pass() {
        let x = uniform_tensor(&mut seeded_rng(36), &[4, 6], 2.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let y = glu(&mut tape, xi).unwrap();
        let want = reference::glu(&x).unwrap();
        assert_close(tape.value(y).data(), want.data(), 1e-12);

        let report = grad_check(
            &[x],
            &GradCheckConfig::default(),
            &mut seeded_rng(37),
            |tape, ids| {
                let y = glu(tape, ids[0])?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn glu_rejects_odd_channel_count() {
        let x = uniform_tensor(&mut seeded_rng(38), &[3, 5], 1.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        assert!(matches!(glu(&mut tape, xi), Err(Error::Dim(_))));
    }

    #[test]
    fn dconv_gives_identical_tokens_identical_kernels() {
        // Rows 1 and 4 are byte-identical tokens in different neighbourhoods.
        let mut x = uniform_tensor(&mut seeded_rng(39), &[6, 4], 1.0);
        let row1: Vec<f64> = x.data()[4..8].to_vec();
        x.data_mut()[16..20].copy_from_slice(&row1);
        let w = uniform_tensor(&mut seeded_rng(40), &[2, 2, 3], 1.0);

        let mut tape = Tape::new();
        let (xi, wi) = (tape.leaf(&x), tape.leaf(&w));
        let ker = kernels_from_features(&mut tape, xi, wi).unwrap();
        let data = tape.value(ker).data();
        let lanes = |p: usize| p * 6..(p + 1) * 6;
        // Kernel lanes for position 1 equal those for position 4, bit for bit.
        assert_eq!(&data[lanes(1)], &data[lanes(4)]);

        // The convolution output still differs because the windows differ.
        let y = dconv(&mut tape, xi, wi).unwrap();
        let out = tape.value(y).data();
        let row = |p: usize| p * 4..(p + 1) * 4;
        assert_ne!(&out[row(1)], &out[row(4)]);
    }

    #[test]
    fn sdconv_distinguishes_identical_tokens_by_their_span() {
        // Same token at positions 1 and 4, different neighbours: the span key mixes
        // the window into the kernel logits, so the kernels must differ.
        let mut x = uniform_tensor(&mut seeded_rng(41), &[6, 4], 1.0);
        let row1: Vec<f64> = x.data()[4..8].to_vec();
        x.data_mut()[16..20].copy_from_slice(&row1);
        let mut rng = seeded_rng(42);
        let w_dw = uniform_tensor(&mut rng, &[4, 3], 1.0);
        let w_pw = uniform_tensor(&mut rng, &[4, 4], 1.0);
        let b_pw = uniform_tensor(&mut rng, &[4], 1.0);
        let w = uniform_tensor(&mut rng, &[2, 2, 3], 1.0);

        let mut tape = Tape::new();
        let (xi, dwi, pwi, bi, wi) = (
            tape.leaf(&x),
            tape.leaf(&w_dw),
            tape.leaf(&w_pw),
            tape.leaf(&b_pw),
            tape.leaf(&w),
        );
        let ks = span_key(&mut tape, xi, dwi, pwi, bi).unwrap();
        let ker = kernel_gen(&mut tape, xi, ks, wi).unwrap();
        let data = tape.value(ker).data();
        let lanes = |p: usize| p * 6..(p + 1) * 6;
        assert_ne!(&data[lanes(1)], &data[lanes(4)]);
    }

    #[test]
    fn span_key_and_sdconv_match_oracles() {
        let mut rng = seeded_rng(43);
        let x = uniform_tensor(&mut rng, &[7, 6], 1.0);
        let q = uniform_tensor(&mut rng, &[7, 4], 1.0);
        let v = uniform_tensor(&mut rng, &[7, 4], 1.0);
        let w_dw = uniform_tensor(&mut rng, &[6, 9], 0.5);
        let w_pw = uniform_tensor(&mut rng, &[6, 4], 0.5);
        let b_pw = uniform_tensor(&mut rng, &[4], 0.5);
        let w = uniform_tensor(&mut rng, &[2, 2, 9], 0.5);

        let mut tape = Tape::new();
        let (xi, qi, vi, dwi, pwi, bi, wi) = (
            tape.leaf(&x),
            tape.leaf(&q),
            tape.leaf(&v),
            tape.leaf(&w_dw),
            tape.leaf(&w_pw),
            tape.leaf(&b_pw),
            tape.leaf(&w),
        );
        let ks = span_key(&mut tape, xi, dwi, pwi, bi).unwrap();
        let want_ks = reference::span_key(&x, &w_dw, &w_pw, &b_pw).unwrap();
        assert_close(tape.value(ks).data(), want_ks.data(), 1e-12);

        let y = sdconv(&mut tape, qi, ks, vi, wi).unwrap();
        let want = reference::sdconv(&q, &want_ks, &v, &w).unwrap();
        assert_close(tape.value(y).data(), want.data(), 1e-12);
    }

    #[test]
    fn sdconv_gradients_pass_finite_differences() {
        let mut rng = seeded_rng(44);
        let q = uniform_tensor(&mut rng, &[5, 4], 1.0);
        let ks = uniform_tensor(&mut rng, &[5, 4], 1.0);
        let v = uniform_tensor(&mut rng, &[5, 4], 1.0);
        let w = uniform_tensor(&mut rng, &[2, 2, 3], 1.0);
        let report = grad_check(
            &[q, ks, v, w],
            &GradCheckConfig::default(),
            &mut seeded_rng(45),
            |tape, ids| {
                let y = sdconv(tape, ids[0], ids[1], ids[2], ids[3])?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn span_key_gradients_pass_finite_differences() {
        let mut rng = seeded_rng(46);
        let x = uniform_tensor(&mut rng, &[5, 4], 1.0);
        let w_dw = uniform_tensor(&mut rng, &[4, 3], 1.0);
        let w_pw = uniform_tensor(&mut rng, &[4, 3], 1.0);
        let b_pw = uniform_tensor(&mut rng, &[3], 1.0);
        let report = grad_check(
            &[x, w_dw, w_pw, b_pw],
            &GradCheckConfig::default(),
            &mut seeded_rng(47),
            |tape, ids| {
                let y = span_key(tape, ids[0], ids[1], ids[2], ids[3])?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }
}
