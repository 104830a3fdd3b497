//! Independent reference implementations used as test oracles.
//!
//! Everything in this module is written as the most direct loop translation of the
//! underlying definition — no tape, no shared kernels with the production ops, no
//! clever indexing. The equivalence suites in `checks` and the unit tests compare the
//! production ops against these at 1e-12, so keep this module boring on purpose: if
//! an optimization ever creeps in here, the oracle stops being independent.
//!
//! Layout conventions match the rest of the crate: 2-D activations are `[n × d]`
//! (sequence positions by channels), depthwise kernels are `[d × k]`, per-position
//! kernel sets are `[n × heads × k]`, and convolutions use zero padding with odd tap
//! counts centered on the output position.

// Index-based loops are this module's house style: they mirror the subscripts in the
// definitions being transcribed.
#![allow(clippy::needless_range_loop)]

use crate::error::{err, Result};
use crate::tensor::{gelu_value, stable_sigmoid, Tensor};

/// Triple-loop matrix product `A[m×k] · B[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if ka != kb {
        return Err(err!(Dim, "oracle matmul: {m}x{ka} vs {kb}x{n}"));
    }
    let mut out = Tensor::zeros(vec![m, n])?;
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..ka {
                acc += a.data()[i * ka + p] * b.data()[p * n + j];
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// Row-wise softmax by direct exp-and-normalize, no max subtraction. Valid as an
/// oracle for moderate inputs only, which is exactly how the tests use it.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![r, c])?;
    for i in 0..r {
        let mut sum = 0.0;
        for j in 0..c {
            let e = x.data()[i * c + j].exp();
            out.data_mut()[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out.data_mut()[i * c + j] /= sum;
        }
    }
    Ok(out)
}

/// Depthwise 1-D convolution: `out[i][c] = Σ_j w[c][j] · x[i + j - (k-1)/2][c]`,
/// zero-padded at the sequence edges. `w` is `[d × k]`, k odd.
pub fn dwconv(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    let (wd, k) = (w.rows(), w.cols());
    if wd != d {
        return Err(err!(Dim, "oracle dwconv: {d} channels vs kernel for {wd}"));
    }
    if k % 2 == 0 {
        return Err(err!(Dim, "oracle dwconv: even tap count {k}"));
    }
    let center = (k - 1) / 2;
    let mut out = Tensor::zeros(vec![n, d])?;
    for i in 0..n {
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..k {
                let src = i as isize + j as isize - center as isize;
                if src >= 0 && (src as usize) < n {
                    acc += w.data()[c * k + j] * x.data()[src as usize * d + c];
                }
            }
            out.data_mut()[i * d + c] = acc;
        }
    }
    Ok(out)
}

/// Per-position convolution with kernels shared across the channels of each head:
/// `out[i][c] = Σ_j kernels[i][head(c)][j] · v[i + j - (k-1)/2][c]`, zero-padded.
/// `kernels` is `[n × heads × k]`; channels split into `heads` contiguous groups.
pub fn lconv(v: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let (n, d) = (v.rows(), v.cols());
    let ks = kernels.shape();
    if ks.len() != 3 || ks[0] != n {
        return Err(err!(Dim, "oracle lconv: kernel shape {ks:?} for {n} positions"));
    }
    let (heads, k) = (ks[1], ks[2]);
    if d % heads != 0 {
        return Err(err!(Dim, "oracle lconv: {d} channels not divisible by {heads} heads"));
    }
    if k % 2 == 0 {
        return Err(err!(Dim, "oracle lconv: even tap count {k}"));
    }
    let group = d / heads;
    let center = (k - 1) / 2;
    let mut out = Tensor::zeros(vec![n, d])?;
    for i in 0..n {
        for c in 0..d {
            let h = c / group;
            let mut acc = 0.0;
            for j in 0..k {
                let src = i as isize + j as isize - center as isize;
                if src >= 0 && (src as usize) < n {
                    acc += kernels.data()[(i * heads + h) * k + j] * v.data()[src as usize * d + c];
                }
            }
            out.data_mut()[i * d + c] = acc;
        }
    }
    Ok(out)
}

/// Gated linear unit over the channel axis: first half of the columns gated by the
/// sigmoid of the second half.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let (n, c2) = (x.rows(), x.cols());
    if c2 % 2 != 0 {
        return Err(err!(Dim, "oracle glu: odd channel count {c2}"));
    }
    let c = c2 / 2;
    let mut out = Tensor::zeros(vec![n, c])?;
    for i in 0..n {
        for j in 0..c {
            let a = x.data()[i * c2 + j];
            let g = x.data()[i * c2 + c + j];
            out.data_mut()[i * c + j] = a * stable_sigmoid(g);
        }
    }
    Ok(out)
}

/// Per-position, per-head kernel logits from a feature map: head `h` of
/// `features[n × d]` (contiguous slice of width `d/heads`) times `w[h]` of shape
/// `[d/heads × k]`, softmax-normalized over the taps. `w` is `[heads × d_head × k]`.
/// This is the shared kernel machinery behind both token-only and span-aware
/// dynamic convolutions.
pub fn kernels_from_features(features: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, d) = (features.rows(), features.cols());
    let ws = w.shape();
    if ws.len() != 3 {
        return Err(err!(Dim, "oracle kernel weights must be [heads × d_head × k], got {ws:?}"));
    }
    let (heads, d_head, k) = (ws[0], ws[1], ws[2]);
    if heads * d_head != d {
        return Err(err!(
            Dim,
            "oracle kernel weights {heads}x{d_head} do not tile {d} channels"
        ));
    }
    let mut logits = Tensor::zeros(vec![n, heads, k])?;
    for i in 0..n {
        for h in 0..heads {
            for j in 0..k {
                let mut acc = 0.0;
                for p in 0..d_head {
                    acc += features.data()[i * d + h * d_head + p]
                        * w.data()[(h * d_head + p) * k + j];
                }
                logits.data_mut()[(i * heads + h) * k + j] = acc;
            }
        }
    }
    // Softmax over the tap axis, one (position, head) lane at a time.
    let mut out = Tensor::zeros(vec![n, heads, k])?;
    for lane in 0..n * heads {
        let mut sum = 0.0;
        for j in 0..k {
            let e = logits.data()[lane * k + j].exp();
            out.data_mut()[lane * k + j] = e;
            sum += e;
        }
        for j in 0..k {
            out.data_mut()[lane * k + j] /= sum;
        }
    }
    Ok(out)
}

/// Token-only dynamic convolution: kernels depend on each position's own feature
/// vector, so identical tokens yield identical kernels regardless of context.
pub fn dconv(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let kernels = kernels_from_features(x, w)?;
    lconv(x, &kernels)
}

/// Span key: depthwise convolution over the full input width followed by a pointwise
/// projection — `dwconv(x, w_dw) · w_pw + b_pw`.
pub fn span_key(x: &Tensor, w_dw: &Tensor, w_pw: &Tensor, b_pw: &Tensor) -> Result<Tensor> {
    let conv = dwconv(x, w_dw)?;
    let mut out = matmul(&conv, w_pw)?;
    let c = out.cols();
    if b_pw.shape() != [c] {
        return Err(err!(Dim, "oracle span_key bias shape {:?} vs {c}", b_pw.shape()));
    }
    for i in 0..out.rows() {
        for j in 0..c {
            out.data_mut()[i * c + j] += b_pw.data()[j];
        }
    }
    Ok(out)
}

/// Span-aware kernel generation: per-position kernels from the elementwise product
/// of the query and the span key.
pub fn kernel_gen(q: &Tensor, ks: &Tensor, w: &Tensor) -> Result<Tensor> {
    if q.shape() != ks.shape() {
        return Err(err!(
            Dim,
            "oracle kernel_gen: query {:?} vs span key {:?}",
            q.shape(),
            ks.shape()
        ));
    }
    let mut features = Tensor::zeros(q.shape().to_vec())?;
    for ((o, a), b) in features.data_mut().iter_mut().zip(q.data()).zip(ks.data()) {
        *o = a * b;
    }
    kernels_from_features(&features, w)
}

/// Span-aware dynamic convolution: `lconv(v, kernel_gen(q, ks, w))`.
pub fn sdconv(q: &Tensor, ks: &Tensor, v: &Tensor, w: &Tensor) -> Result<Tensor> {
    let kernels = kernel_gen(q, ks, w)?;
    lconv(v, &kernels)
}

/// Multi-head scaled dot-product attention by explicit loops over heads, query
/// positions, key positions, and channels. Returns the context `[n × d]` and the
/// per-head probability maps `[heads][n × n]`.
///
/// Mask semantics mirror the production op: invalid keys get zero weight, rows with
/// no valid key fall back to uniform weights, and invalid query rows are zeroed in
/// the output.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (n, d) = (q.rows(), q.cols());
    if k.shape() != [n, d] || v.shape() != [n, d] {
        return Err(err!(
            Dim,
            "oracle attention: q {:?}, k {:?}, v {:?} must agree",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if d % heads != 0 {
        return Err(err!(Dim, "oracle attention: {d} channels not divisible by {heads} heads"));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(err!(Dim, "oracle attention: mask length {} vs {n} positions", m.len()));
        }
    }
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = Tensor::zeros(vec![n, d])?;
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut probs = Tensor::zeros(vec![n, n])?;
        for i in 0..n {
            // Scaled scores against every key, then masked softmax.
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..d_head {
                    acc += q.data()[i * d + h * d_head + p] * k.data()[j * d + h * d_head + p];
                }
                scores[j] = acc * scale;
            }
            let valid = |j: usize| mask.is_none_or(|m| m[j]);
            let any_valid = (0..n).any(valid);
            if any_valid {
                let max = (0..n)
                    .filter(|&j| valid(j))
                    .map(|j| scores[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = if valid(j) { (scores[j] - max).exp() } else { 0.0 };
                    probs.data_mut()[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    probs.data_mut()[i * n + j] /= sum;
                }
            } else {
                for j in 0..n {
                    probs.data_mut()[i * n + j] = 1.0 / n as f64;
                }
            }
            let query_valid = mask.is_none_or(|m| m[i]);
            if query_valid {
                for p in 0..d_head {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += probs.data()[i * n + j] * v.data()[j * d + h * d_head + p];
                    }
                    out.data_mut()[i * d + h * d_head + p] = acc;
                }
            }
        }
        maps.push(probs);
    }
    Ok((out, maps))
}

/// Grouped linear via an explicit block-diagonal dense matrix: the grouped weight
/// `[g × in/g × out/g]` is embedded into a zero-filled `[in × out]` matrix and
/// applied as one dense product, plus bias. The production op must match this.
pub fn grouped_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ws = w.shape();
    if ws.len() != 3 {
        return Err(err!(Dim, "oracle grouped weights must be [g × in/g × out/g], got {ws:?}"));
    }
    let (g, in_g, out_g) = (ws[0], ws[1], ws[2]);
    let (a, bcols) = (g * in_g, g * out_g);
    let mut dense = Tensor::zeros(vec![a, bcols])?;
    for i in 0..g {
        for p in 0..in_g {
            for q in 0..out_g {
                dense.data_mut()[(i * in_g + p) * bcols + i * out_g + q] =
                    w.data()[(i * in_g + p) * out_g + q];
            }
        }
    }
    let mut out = matmul(x, &dense)?;
    if b.shape() != [bcols] {
        return Err(err!(Dim, "oracle grouped bias shape {:?} vs {bcols}", b.shape()));
    }
    for i in 0..out.rows() {
        for j in 0..bcols {
            out.data_mut()[i * bcols + j] += b.data()[j];
        }
    }
    Ok(out)
}

/// Per-row layer normalization with gain and shift, matching the production op's
/// biased-variance and epsilon conventions.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(vec![r, c])?;
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out.data_mut()[i * c + j] = (row[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

/// Elementwise GELU map using the same tanh-form scalar as the production op.
pub fn gelu_map(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_value(*v);
    }
    out.zero_grad();
    Ok(out)
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(err!(Dim, "oracle add: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    out.zero_grad();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::assert_close;

    #[test]
    fn oracle_dwconv_identity_kernel_is_a_pass_through() {
        // k = 1 with weight 1 per channel leaves the input unchanged.
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let out = dwconv(&x, &w).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn oracle_lconv_uniform_kernels_average_the_window() {
        // Spec'd hand example: uniform 3-tap kernels over [1, 2, 3] give
        // [(0+1+2)/3, (1+2+3)/3, (2+3+0)/3].
        let v = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let kernels = Tensor::new(vec![3, 1, 3], vec![1.0 / 3.0; 9]).unwrap();
        let out = lconv(&v, &kernels).unwrap();
        assert_close(out.data(), &[1.0, 2.0, 5.0 / 3.0], 1e-12);
    }

    #[test]
    fn oracle_attention_single_position_returns_value_row() {
        let q = Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![5.0, -1.0]]).unwrap();
        let (out, maps) = attention(&q, &k, &v, 1, None).unwrap();
        assert_close(out.data(), v.data(), 1e-12);
        assert_eq!(maps[0].data(), &[1.0]);
    }

    #[test]
    fn oracle_grouped_linear_one_group_is_dense() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let out = grouped_linear(&x, &w, &b).unwrap();
        assert_close(out.data(), &[1.5, 1.5], 1e-12);
    }
}
