//! Model configuration: sizes, architectural variants, and a plain-text format.
//!
//! A [`ModelConfig`] pins every dimension of the encoder. The [`Variant`] chooses
//! which mechanisms are active:
//!
//! * `bert-baseline` — full-width self-attention, dense feed-forward, no convolution.
//! * `bnk` — attention projected into a narrower bottleneck (`hidden / reduction`).
//! * `bnk+sdconv` — bottleneck plus the span-aware convolution branch.
//! * `bnk+gl` — bottleneck plus grouped feed-forward layers.
//! * `bnk+gl+sdconv` — all three.
//!
//! Configs serialize to `key = value` lines (one per field, `#` starts a comment) so
//! training runs can be reproduced from a file checked into the experiment log.

use crate::error::{err, Error, Result};
use std::fmt;
use std::str::FromStr;

/// Which architectural mechanisms are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Bottleneck,
    BottleneckConv,
    BottleneckGrouped,
    BottleneckGroupedConv,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Bottleneck,
        Variant::BottleneckConv,
        Variant::BottleneckGrouped,
        Variant::BottleneckGroupedConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "bert-baseline",
            Variant::Bottleneck => "bnk",
            Variant::BottleneckConv => "bnk+sdconv",
            Variant::BottleneckGrouped => "bnk+gl",
            Variant::BottleneckGroupedConv => "bnk+gl+sdconv",
        }
    }

    /// Span-aware convolution branch next to self-attention?
    pub fn has_conv(self) -> bool {
        matches!(self, Variant::BottleneckConv | Variant::BottleneckGroupedConv)
    }

    /// Grouped feed-forward layers?
    pub fn has_grouping(self) -> bool {
        matches!(self, Variant::BottleneckGrouped | Variant::BottleneckGroupedConv)
    }

    /// Width-reduced attention projections?
    pub fn has_bottleneck(self) -> bool {
        !matches!(self, Variant::Baseline)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                err!(Config, "unknown variant {s:?}; expected one of {}", names.join(", "))
            })
    }
}

/// Complete structural description of one encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Encoder layers.
    pub layers: usize,
    /// Hidden width `d` carried between layers.
    pub hidden: usize,
    /// Word embedding width; projected up to `hidden` when the two differ.
    pub embedding: usize,
    /// Feed-forward inner width.
    pub ffn_inner: usize,
    /// Groups in the feed-forward linears (1 = dense).
    pub groups: usize,
    /// Head count at full width; `heads · head_dim == hidden`.
    pub heads: usize,
    /// Attention width reduction: projections are `hidden / reduction` wide.
    pub reduction: usize,
    /// Channels per attention head.
    pub head_dim: usize,
    /// Convolution taps (odd).
    pub kernel_size: usize,
    /// Token vocabulary size, including the reserved specials.
    pub vocab_size: usize,
    /// Longest representable sequence.
    pub max_positions: usize,
    /// Active mechanisms.
    pub variant: Variant,
}

/// Field order for serialization; `from_text` requires each exactly once.
const FIELDS: [&str; 12] = [
    "layers",
    "hidden",
    "embedding",
    "ffn_inner",
    "groups",
    "heads",
    "reduction",
    "head_dim",
    "kernel_size",
    "vocab_size",
    "max_positions",
    "variant",
];

impl ModelConfig {
    /// Named preset: `small`, `medium-small`, or `base`, with the given variant.
    /// Grouped variants default to two feed-forward groups for `medium-small` and
    /// dense elsewhere; bottleneck variants halve the attention width.
    pub fn preset(size: &str, variant: Variant) -> Result<ModelConfig> {
        let (hidden, embedding, ffn_inner, heads, head_dim, gl_groups) = match size {
            "small" => (256, 128, 1024, 4, 64, 1),
            "medium-small" => (384, 128, 1536, 8, 48, 2),
            "base" => (768, 768, 3072, 12, 64, 1),
            other => {
                return Err(err!(
                    Config,
                    "unknown preset {other:?}; expected small, medium-small, or base"
                ))
            }
        };
        let cfg = ModelConfig {
            layers: 12,
            hidden,
            embedding,
            ffn_inner,
            groups: if variant.has_grouping() { gl_groups } else { 1 },
            heads,
            reduction: if variant.has_bottleneck() { 2 } else { 1 },
            head_dim,
            kernel_size: 9,
            vocab_size: 30522,
            max_positions: 512,
            variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Attention branch width after reduction.
    pub fn attn_width(&self) -> usize {
        self.hidden / self.reduction
    }

    /// Heads actually used inside the (possibly reduced) attention width.
    pub fn attn_heads(&self) -> usize {
        self.attn_width() / self.head_dim
    }

    /// Whether word embeddings need a projection up to the hidden width.
    pub fn needs_embedding_projection(&self) -> bool {
        self.embedding != self.hidden
    }

    /// Checks every structural invariant, returning the first violation.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("embedding", self.embedding),
            ("ffn_inner", self.ffn_inner),
            ("groups", self.groups),
            ("heads", self.heads),
            ("reduction", self.reduction),
            ("head_dim", self.head_dim),
            ("kernel_size", self.kernel_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(err!(Config, "{name} must be at least 1"));
            }
        }
        if self.heads * self.head_dim != self.hidden {
            return Err(err!(
                Config,
                "heads ({}) x head_dim ({}) must equal hidden ({})",
                self.heads,
                self.head_dim,
                self.hidden
            ));
        }
        if !self.hidden.is_multiple_of(self.reduction) {
            return Err(err!(
                Config,
                "hidden ({}) not divisible by reduction ({})",
                self.hidden,
                self.reduction
            ));
        }
        if !self.attn_width().is_multiple_of(self.head_dim) {
            return Err(err!(
                Config,
                "attention width {} not divisible into heads of {}",
                self.attn_width(),
                self.head_dim
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(err!(Config, "kernel_size must be odd, got {}", self.kernel_size));
        }
        if !self.variant.has_bottleneck() && self.reduction != 1 {
            return Err(err!(
                Config,
                "variant {} has no bottleneck; reduction must be 1, got {}",
                self.variant,
                self.reduction
            ));
        }
        if !self.variant.has_grouping() && self.groups != 1 {
            return Err(err!(
                Config,
                "variant {} has dense feed-forward layers; groups must be 1, got {}",
                self.variant,
                self.groups
            ));
        }
        if !self.hidden.is_multiple_of(self.groups) || !self.ffn_inner.is_multiple_of(self.groups) {
            return Err(err!(
                Config,
                "groups ({}) must divide both hidden ({}) and ffn_inner ({})",
                self.groups,
                self.hidden,
                self.ffn_inner
            ));
        }
        if self.vocab_size <= crate::vocab::RESERVED {
            return Err(err!(
                Config,
                "vocab_size ({}) must exceed the {} reserved tokens",
                self.vocab_size,
                crate::vocab::RESERVED
            ));
        }
        Ok(())
    }

    /// Serializes as `key = value` lines in declaration order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for field in FIELDS {
            let value = match field {
                "layers" => self.layers.to_string(),
                "hidden" => self.hidden.to_string(),
                "embedding" => self.embedding.to_string(),
                "ffn_inner" => self.ffn_inner.to_string(),
                "groups" => self.groups.to_string(),
                "heads" => self.heads.to_string(),
                "reduction" => self.reduction.to_string(),
                "head_dim" => self.head_dim.to_string(),
                "kernel_size" => self.kernel_size.to_string(),
                "vocab_size" => self.vocab_size.to_string(),
                "max_positions" => self.max_positions.to_string(),
                "variant" => self.variant.to_string(),
                _ => unreachable!(),
            };
            out.push_str(field);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    /// Parses the `key = value` format: every field exactly once, any order, blank
    /// lines and `#` comments ignored. The result is validated.
    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut seen: Vec<(&str, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err!(Config, "line {}: expected `key = value`, got {raw:?}", lineno + 1));
            };
            let key = key.trim();
            let value = value.trim();
            let Some(&field) = FIELDS.iter().find(|&&f| f == key) else {
                return Err(err!(Config, "line {}: unknown field {key:?}", lineno + 1));
            };
            if seen.iter().any(|(f, _)| *f == field) {
                return Err(err!(Config, "line {}: duplicate field {key:?}", lineno + 1));
            }
            seen.push((field, value.to_string()));
        }
        let get = |field: &str| -> Result<&str> {
            seen.iter()
                .find(|(f, _)| *f == field)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| err!(Config, "missing field {field:?}"))
        };
        let num = |field: &str| -> Result<usize> {
            let v = get(field)?;
            v.parse().map_err(|_| err!(Config, "field {field:?}: not a count: {v:?}"))
        };
        let cfg = ModelConfig {
            layers: num("layers")?,
            hidden: num("hidden")?,
            embedding: num("embedding")?,
            ffn_inner: num("ffn_inner")?,
            groups: num("groups")?,
            heads: num("heads")?,
            reduction: num("reduction")?,
            head_dim: num("head_dim")?,
            kernel_size: num("kernel_size")?,
            vocab_size: num("vocab_size")?,
            max_positions: num("max_positions")?,
            variant: get("variant")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
