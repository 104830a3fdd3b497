//! Static cost accounting: parameter counts and multiply-add counts.
//!
//! Parameter counts come straight from the [`crate::params::for_each_param`] walk, so
//! they agree with the real tensors by construction. Multiply-add counts are computed
//! from closed-form formulas that mirror the tape's counting conventions exactly —
//! the test suite runs a real forward pass and asserts the instrumented counter and
//! the static model agree to the last multiply-add.
//!
//! Conventions (shared with the tape): a matmul `[m×k]·[k×n]` is `m·k·n`; every
//! elementwise op, bias add, activation, normalization, and softmax counts its output
//! element count; gathers, slices, concatenations, and reshapes are free.
//!
//! Two named buckets matter for scaling claims: `attn/scores` holds everything that
//! grows quadratically with sequence length (score matmuls, scaling, softmax,
//! probability-weighted values), and `conv` holds the whole convolution branch, every
//! part of which is linear in sequence length. Doubling the sequence multiplies the
//! first by exactly 4 and the second by exactly 2.

use crate::config::ModelConfig;
use crate::error::{err, Result};
use crate::params::for_each_param;

/// One node of a cost breakdown. A parent's numbers equal the sum of its children's
/// (enforced by construction: parents are built by summing).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub name: String,
    pub params: u64,
    pub madds: u64,
    pub children: Vec<CostReport>,
}

impl CostReport {
    fn leaf(name: &str, params: u64, madds: u64) -> CostReport {
        CostReport { name: name.to_string(), params, madds, children: Vec::new() }
    }

    fn parent(name: &str, children: Vec<CostReport>) -> CostReport {
        let params = children.iter().map(|c| c.params).sum();
        let madds = children.iter().map(|c| c.madds).sum();
        CostReport { name: name.to_string(), params, madds, children }
    }

    /// Depth-first flattening into `(path, params, madds)` rows, parents first.
    pub fn flatten(&self) -> Vec<(String, u64, u64)> {
        let mut rows = Vec::new();
        self.flatten_into("", &mut rows);
        rows
    }

    fn flatten_into(&self, prefix: &str, rows: &mut Vec<(String, u64, u64)>) {
        let path =
            if prefix.is_empty() { self.name.clone() } else { format!("{prefix}/{}", self.name) };
        rows.push((path.clone(), self.params, self.madds));
        for c in &self.children {
            c.flatten_into(&path, rows);
        }
    }

    /// Indented text table: one line per node with both numbers.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<40} {:>16} {:>20}\n", "section", "params", "madds");
        self.text_into(0, &mut out);
        out
    }

    fn text_into(&self, depth: usize, out: &mut String) {
        let indent = "  ".repeat(depth);
        out.push_str(&format!(
            "{:<40} {:>16} {:>20}\n",
            format!("{indent}{}", self.name),
            self.params,
            self.madds
        ));
        for c in &self.children {
            c.text_into(depth + 1, out);
        }
    }

    /// CSV with a header row; paths use `/` separators.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,params,madds\n");
        for (path, params, madds) in self.flatten() {
            out.push_str(&format!("{path},{params},{madds}\n"));
        }
        out
    }
}

/// Parses rows written by [`CostReport::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<(String, u64, u64)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("section,params,madds") => {}
        other => return Err(err!(Input, "bad cost CSV header: {other:?}")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(path), Some(p), Some(m), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(err!(Input, "cost CSV row {}: expected 3 fields: {line:?}", i + 2));
        };
        let params = p.parse().map_err(|_| err!(Input, "cost CSV row {}: bad count {p:?}", i + 2))?;
        let madds = m.parse().map_err(|_| err!(Input, "cost CSV row {}: bad count {m:?}", i + 2))?;
        rows.push((path.to_string(), params, madds));
    }
    Ok(rows)
}

// ── parameters ──────────────────────────────────────────────────────────────────────

/// Parameter breakdown: embeddings and per-layer attention/convolution/feed-forward
/// groups, exactly as the parameter walk declares them.
pub fn count_params(cfg: &ModelConfig) -> CostReport {
    // (top-level group, sub-group, scalar count), in walk order.
    let mut rows: Vec<(String, String, u64)> = Vec::new();
    for_each_param(cfg, |spec| {
        let mut it = spec.name.split('.');
        let top = it.next().expect("names are dotted").to_string();
        let sub = it.next().expect("names have two segments").to_string();
        rows.push((top, sub, spec.numel() as u64));
    });

    // Merge by name (not adjacency) so a group interrupted by another — the
    // attention projections split around the convolution branch in the walk —
    // still becomes a single child and CSV paths stay unique.
    let mut tops: Vec<CostReport> = Vec::new();
    for (top, sub, count) in rows {
        if tops.last().map(|t| t.name != top).unwrap_or(true) {
            tops.push(CostReport::leaf(&top, 0, 0));
        }
        let t = tops.last_mut().expect("just pushed");
        let child = match t.children.iter().position(|c| c.name == sub) {
            Some(i) => &mut t.children[i],
            None => {
                t.children.push(CostReport::leaf(&sub, 0, 0));
                t.children.last_mut().expect("just pushed")
            }
        };
        child.params += count;
        t.params += count;
    }
    CostReport::parent("model", tops)
}

// ── multiply-adds ───────────────────────────────────────────────────────────────────

fn embeddings_madds(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.hidden as u64;
    let proj = if cfg.needs_embedding_projection() {
        n * cfg.embedding as u64 * d + n * d // matmul + bias
    } else {
        0
    };
    // Two table additions (position, segment) and the layer norm.
    proj + 2 * n * d + n * d
}

/// The strictly quadratic part of one layer's attention: per head, the score matmul
/// (`n²·head_dim`), score scaling (`n²`), softmax (`n²`), and the probability-
/// weighted value matmul (`n²·head_dim`).
fn scores_madds(cfg: &ModelConfig, n: u64) -> u64 {
    let w = cfg.attn_width() as u64;
    let heads = cfg.attn_heads() as u64;
    2 * n * n * w + 2 * n * n * heads
}

/// Attention projections for one layer — query/key/value in, merged context out.
fn attn_proj_madds(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.hidden as u64;
    let w = cfg.attn_width() as u64;
    let merged = if cfg.variant.has_conv() { 2 * w } else { w };
    3 * (n * d * w + n * w) + (n * merged * d + n * d)
}

/// The whole convolution branch for one layer; every term is linear in `n`.
fn conv_branch_madds(cfg: &ModelConfig, n: u64) -> u64 {
    if !cfg.variant.has_conv() {
        return 0;
    }
    let d = cfg.hidden as u64;
    let w = cfg.attn_width() as u64;
    let k = cfg.kernel_size as u64;
    let heads = cfg.attn_heads() as u64;
    let span = n * d * k + (n * d * w + n * w); // depthwise filter, then pointwise
    let values = n * d * w + n * w; // separate value projection
    let kernels = n * w + n * w * k + n * heads * k; // q⊙span, tap logits, softmax
    let mix = n * w * k; // per-position convolution
    span + values + kernels + mix
}

fn ffn_madds(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.hidden as u64;
    let f = cfg.ffn_inner as u64;
    let g = cfg.groups as u64;
    let first = n * d * f / g + n * f; // grouped matmul + bias
    let act = n * f;
    let second = n * f * d / g + n * d;
    first + act + second
}

/// Residual additions and layer norms of one layer.
fn glue_madds(cfg: &ModelConfig, n: u64) -> u64 {
    4 * n * cfg.hidden as u64
}

/// Multiply-add breakdown of one unmasked forward pass over `n` positions.
pub fn count_flops(cfg: &ModelConfig, n: usize) -> Result<CostReport> {
    if n == 0 {
        return Err(err!(Input, "sequence length must be at least 1"));
    }
    if n > cfg.max_positions {
        return Err(err!(
            Input,
            "sequence length {n} exceeds max_positions = {}",
            cfg.max_positions
        ));
    }
    let n = n as u64;
    let mut tops = vec![CostReport::leaf("embeddings", 0, embeddings_madds(cfg, n))];
    for i in 0..cfg.layers {
        let attn = CostReport::parent(
            "attn",
            vec![
                CostReport::leaf("proj", 0, attn_proj_madds(cfg, n)),
                CostReport::leaf("scores", 0, scores_madds(cfg, n)),
            ],
        );
        let mut children = vec![attn];
        if cfg.variant.has_conv() {
            children.push(CostReport::leaf("conv", 0, conv_branch_madds(cfg, n)));
        }
        children.push(CostReport::leaf("ffn", 0, ffn_madds(cfg, n)));
        children.push(CostReport::leaf("glue", 0, glue_madds(cfg, n)));
        tops.push(CostReport::parent(&format!("layer{i}"), children));
    }
    Ok(CostReport::parent("model", tops))
}

/// Total quadratic-bucket multiply-adds across all layers.
pub fn total_scores_madds(cfg: &ModelConfig, n: usize) -> u64 {
    cfg.layers as u64 * scores_madds(cfg, n as u64)
}

/// Total convolution-branch multiply-adds across all layers.
pub fn total_conv_madds(cfg: &ModelConfig, n: usize) -> u64 {
    cfg.layers as u64 * conv_branch_madds(cfg, n as u64)
}
