//! The encoder: embeddings, grouped feed-forward, and the layer stack.
//!
//! Each layer is post-norm residual: `h = LN(x + MixedAttention(x))`, then
//! `LN(h + FFN(h))`. The feed-forward pair optionally splits its linears into
//! independent channel groups ([`grouped_linear`]), trading parameters for a
//! block-diagonal structure.
//!
//! Embeddings are the sum of word, position, and segment tables (word vectors pass
//! through a projection when their width differs from the hidden width), followed by
//! layer normalization.

use crate::attention::{mixed_attention, AttentionParams, ConvBranchParams};
use crate::config::ModelConfig;
use crate::error::{err, Result};
use crate::params::BoundParams;
use crate::tensor::{Grads, Op, Tape, Tensor, TensorId, Values};

/// Layer-norm variance floor, matching the usual encoder setting.
pub const LN_EPS: f64 = 1e-12;

// ── grouped linear ──────────────────────────────────────────────────────────────────

#[derive(Debug)]
struct GroupedMatMul {
    x: TensorId,
    w: TensorId,
    n: usize,
    groups: usize,
    in_g: usize,
    out_g: usize,
}

impl Op for GroupedMatMul {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        let (n, groups, in_g, out_g) = (self.n, self.groups, self.in_g, self.out_g);
        let (din, dout) = (groups * in_g, groups * out_g);
        if grads.wants(self.x) {
            let w = vals.data(self.w);
            grads.with(self.x, |dx| {
                for i in 0..n {
                    for gi in 0..groups {
                        for p in 0..in_g {
                            let mut acc = 0.0;
                            for j in 0..out_g {
                                acc += g[i * dout + gi * out_g + j]
                                    * w[(gi * in_g + p) * out_g + j];
                            }
                            dx[i * din + gi * in_g + p] += acc;
                        }
                    }
                }
            });
        }
        if grads.wants(self.w) {
            let x = vals.data(self.x);
            grads.with(self.w, |dw| {
                for i in 0..n {
                    for gi in 0..groups {
                        for p in 0..in_g {
                            let xv = x[i * din + gi * in_g + p];
                            for j in 0..out_g {
                                dw[(gi * in_g + p) * out_g + j] +=
                                    xv * g[i * dout + gi * out_g + j];
                            }
                        }
                    }
                }
            });
        }
    }
}

/// Linear layer whose weight is either dense `[in × out]` or grouped
/// `[g × in/g × out/g]`. Grouped weights apply block-diagonally: input channel group
/// `gi` maps only to output channel group `gi`. Bias is `[out]` either way.
pub fn grouped_linear(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    match tape.value(w).shape() {
        [_, _] => tape.linear(x, w, b),
        &[groups, in_g, out_g] => {
            let (n, din) = match tape.value(x).shape() {
                [r, c] => (*r, *c),
                s => return Err(err!(Dim, "grouped linear input must be 2-D, got {s:?}")),
            };
            if din != groups * in_g {
                return Err(err!(
                    Dim,
                    "grouped linear: {din} input channels vs {groups} groups of {in_g}"
                ));
            }
            let xv = tape.value(x).data();
            let wv = tape.value(w).data();
            let dout = groups * out_g;
            let mut out = vec![0.0; n * dout];
            for i in 0..n {
                for gi in 0..groups {
                    for p in 0..in_g {
                        let xval = xv[i * din + gi * in_g + p];
                        for j in 0..out_g {
                            out[i * dout + gi * out_g + j] +=
                                xval * wv[(gi * in_g + p) * out_g + j];
                        }
                    }
                }
            }
            let value = Tensor::new(vec![n, dout], out)?;
            let madds = (n * groups * in_g * out_g) as u64;
            let prod = tape.record(
                value,
                vec![x, w],
                Box::new(GroupedMatMul { x, w, n, groups, in_g, out_g }),
                madds,
            );
            tape.add_bias(prod, b)
        }
        s => Err(err!(Dim, "linear weight must be 2-D or [g × in/g × out/g], got {s:?}")),
    }
}

// ── embeddings ──────────────────────────────────────────────────────────────────────

/// Embeds token ids: word table (projected if narrower than the hidden width) plus
/// position and segment tables, layer-normalized. `ids` and `segments` must have the
/// same length, at most `max_positions`; segment ids are 0 or 1.
pub fn embed(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &BoundParams,
    ids: &[usize],
    segments: &[usize],
) -> Result<TensorId> {
    if ids.is_empty() {
        return Err(err!(Input, "cannot embed an empty sequence"));
    }
    if ids.len() > cfg.max_positions {
        return Err(err!(
            Input,
            "sequence of {} tokens exceeds max_positions = {}",
            ids.len(),
            cfg.max_positions
        ));
    }
    if segments.len() != ids.len() {
        return Err(err!(
            Input,
            "{} segment ids for {} tokens",
            segments.len(),
            ids.len()
        ));
    }

    let word = tape.embed_rows(params.id("embeddings.word")?, ids)?;
    let projected = if cfg.needs_embedding_projection() {
        tape.linear(word, params.id("embeddings.proj.weight")?, params.id("embeddings.proj.bias")?)?
    } else {
        word
    };
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.embed_rows(params.id("embeddings.position")?, &positions)?;
    let seg = tape.embed_rows(params.id("embeddings.segment")?, segments)?;
    let sum = tape.add(projected, pos)?;
    let sum = tape.add(sum, seg)?;
    tape.layer_norm(sum, params.id("embeddings.norm.gain")?, params.id("embeddings.norm.bias")?, LN_EPS)
}

// ── layers ──────────────────────────────────────────────────────────────────────────

fn attention_params(cfg: &ModelConfig, params: &BoundParams, layer: usize) -> Result<AttentionParams> {
    let l = format!("layer{layer}");
    let conv = if cfg.variant.has_conv() {
        Some(ConvBranchParams {
            v_w: params.id(&format!("{l}.conv.v.weight"))?,
            v_b: params.id(&format!("{l}.conv.v.bias"))?,
            span_dw: params.id(&format!("{l}.conv.span_dw"))?,
            span_pw_w: params.id(&format!("{l}.conv.span_pw.weight"))?,
            span_pw_b: params.id(&format!("{l}.conv.span_pw.bias"))?,
            kernel_w: params.id(&format!("{l}.conv.kernel.weight"))?,
        })
    } else {
        None
    };
    Ok(AttentionParams {
        q_w: params.id(&format!("{l}.attn.q.weight"))?,
        q_b: params.id(&format!("{l}.attn.q.bias"))?,
        k_w: params.id(&format!("{l}.attn.k.weight"))?,
        k_b: params.id(&format!("{l}.attn.k.bias"))?,
        v_w: params.id(&format!("{l}.attn.v.weight"))?,
        v_b: params.id(&format!("{l}.attn.v.bias"))?,
        conv,
        out_w: params.id(&format!("{l}.attn.out.weight"))?,
        out_b: params.id(&format!("{l}.attn.out.bias"))?,
    })
}

/// Feed-forward pair with GELU between, dense or grouped per the weight shapes.
fn ffn(
    tape: &mut Tape,
    x: TensorId,
    params: &BoundParams,
    layer: usize,
) -> Result<TensorId> {
    let l = format!("layer{layer}");
    let inner = grouped_linear(
        tape,
        x,
        params.id(&format!("{l}.ffn.in.weight"))?,
        params.id(&format!("{l}.ffn.in.bias"))?,
    )?;
    let inner = tape.gelu(inner)?;
    grouped_linear(
        tape,
        inner,
        params.id(&format!("{l}.ffn.out.weight"))?,
        params.id(&format!("{l}.ffn.out.bias"))?,
    )
}

/// One encoder layer. Returns the new hidden state and the attention branch's
/// per-head probability maps.
pub fn layer(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &BoundParams,
    index: usize,
    x: TensorId,
    mask: Option<&[bool]>,
) -> Result<(TensorId, Vec<TensorId>)> {
    let l = format!("layer{index}");
    let p = attention_params(cfg, params, index)?;
    let (attn, maps) = mixed_attention(tape, x, &p, cfg.attn_heads(), mask)?;
    let res = tape.add(x, attn)?;
    let h = tape.layer_norm(
        res,
        params.id(&format!("{l}.attn.norm.gain"))?,
        params.id(&format!("{l}.attn.norm.bias"))?,
        LN_EPS,
    )?;
    let f = ffn(tape, h, params, index)?;
    let res = tape.add(h, f)?;
    tape.layer_norm(
        res,
        params.id(&format!("{l}.ffn.norm.gain"))?,
        params.id(&format!("{l}.ffn.norm.bias"))?,
        LN_EPS,
    )
    .map(|out| (out, maps))
}

/// Output of a full encoder pass.
pub struct Forward {
    /// Final hidden states `[n × hidden]`.
    pub hidden: TensorId,
    /// Attention probability maps, indexed `[layer][head]`, each `[n × n]`.
    pub maps: Vec<Vec<TensorId>>,
}

/// Runs the whole encoder: embeddings, then every layer in order.
pub fn forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &BoundParams,
    ids: &[usize],
    segments: &[usize],
    mask: Option<&[bool]>,
) -> Result<Forward> {
    if let Some(m) = mask {
        if m.len() != ids.len() {
            return Err(err!(Input, "mask length {} vs {} tokens", m.len(), ids.len()));
        }
    }
    let mut h = embed(tape, cfg, params, ids, segments)?;
    let mut maps = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let (next, layer_maps) = layer(tape, cfg, params, i, h, mask)?;
        h = next;
        maps.push(layer_maps);
    }
    Ok(Forward { hidden: h, maps })
}

/// Averages attention maps over layers and heads into one `[n × n]` matrix.
pub fn average_attention_map(tape: &Tape, maps: &[Vec<TensorId>]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    let mut count = 0usize;
    for layer_maps in maps {
        for &m in layer_maps {
            let v = tape.value(m);
            match &mut total {
                None => total = Some(v.clone()),
                Some(t) => {
                    if t.shape() != v.shape() {
                        return Err(err!(Dim, "attention maps disagree on shape"));
                    }
                    for (a, b) in t.data_mut().iter_mut().zip(v.data()) {
                        *a += b;
                    }
                }
            }
            count += 1;
        }
    }
    let mut t = total.ok_or_else(|| err!(Contract, "no attention maps to average"))?;
    for v in t.data_mut() {
        *v /= count as f64;
    }
    t.zero_grad();
    Ok(t)
}
