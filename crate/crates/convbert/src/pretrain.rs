//! Toy pretraining: masked-token prediction and replaced-token detection.
//!
//! Two objectives are supported, both desk-scale but mechanically faithful:
//!
//! * **MLM** — mask a random 15% of the real tokens (80% become `[MASK]`, 10% a
//!   random token, 10% stay put), then train the encoder plus a small prediction
//!   head to recover the originals with a cross-entropy loss over the masked
//!   positions only.
//! * **RTD** — a slimmed-down plain-attention *generator* fills the masked slots
//!   by sampling from its own predictions, and the main encoder (the
//!   *discriminator*) learns to flag which positions were replaced, with a
//!   per-position binary cross-entropy. The joint loss is
//!   `mlm + rtd_weight · rtd`; sampling passes no gradients from discriminator to
//!   generator. Generator and discriminator share one word-embedding table.
//!
//! [`train`] runs the loop end to end: it builds a vocabulary from the corpus,
//! steps Adam under a warmup/decay schedule, logs one CSV row per step, and
//! writes the final checkpoint and vocabulary. Every random choice flows from
//! the seed in [`TrainConfig`], so a rerun reproduces the outputs byte for byte.

use crate::config::{ModelConfig, Variant};
use crate::encoder::{self, LN_EPS};
use crate::error::{err, Error, Result};
use crate::optim::{collect_grads, lr_schedule, Adam, AdamConfig};
use crate::params::{param_specs, BoundParams, ParamKind, ParamSpec, ParamStore};
use crate::tensor::{Grads, Op, Tape, Tensor, TensorId, Values};
use crate::vocab::{Vocab, CLS, MASK, RESERVED, SEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

// ── losses ──────────────────────────────────────────────────────────────────────────

#[derive(Debug)]
struct CrossEntropy {
    logits: TensorId,
    targets: Vec<usize>,
    rows: usize,
    cols: usize,
}

impl Op for CrossEntropy {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        if !grads.wants(self.logits) {
            return;
        }
        let x = vals.data(self.logits);
        let scale = g[0] / self.rows as f64;
        grads.with(self.logits, |dx| {
            for r in 0..self.rows {
                let row = &x[r * self.cols..(r + 1) * self.cols];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                for j in 0..self.cols {
                    let p = (row[j] - mx).exp() / denom;
                    let hit = if j == self.targets[r] { 1.0 } else { 0.0 };
                    dx[r * self.cols + j] += scale * (p - hit);
                }
            }
        });
    }
}

/// Mean cross-entropy between `logits` (`[m × classes]`, one row per predicted
/// position) and integer `targets`. Log-sum-exp is computed against the row max, so
/// large logits stay finite. Returns a scalar.
pub fn cross_entropy_selected(
    tape: &mut Tape,
    logits: TensorId,
    targets: &[usize],
) -> Result<TensorId> {
    let &[rows, cols] = tape.value(logits).shape() else {
        return Err(err!(Dim, "cross-entropy expects 2-D logits, got shape {:?}", tape.value(logits).shape()));
    };
    if targets.len() != rows {
        return Err(err!(Dim, "{} logit rows but {} targets", rows, targets.len()));
    }
    if rows == 0 {
        return Err(err!(Input, "cross-entropy needs at least one target row"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
        return Err(err!(Input, "target id {t} out of range for {cols} classes"));
    }

    let x = tape.value(logits).data();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &x[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    let value = Tensor::scalar(total / rows as f64);
    let op = CrossEntropy { logits, targets: targets.to_vec(), rows, cols };
    Ok(tape.record(value, vec![logits], Box::new(op), (rows * cols) as u64))
}

#[derive(Debug)]
struct BceWithLogits {
    logits: TensorId,
    labels: Vec<f64>,
    weights: Vec<f64>,
    total_weight: f64,
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Op for BceWithLogits {
    fn backward(&self, vals: &Values<'_>, g: &[f64], grads: &mut Grads) {
        if !grads.wants(self.logits) {
            return;
        }
        let x = vals.data(self.logits);
        let scale = g[0] / self.total_weight;
        grads.with(self.logits, |dx| {
            for i in 0..x.len() {
                dx[i] += scale * self.weights[i] * (sigmoid_stable(x[i]) - self.labels[i]);
            }
        });
    }
}

/// Weighted mean binary cross-entropy on raw logits (any shape; labels and weights
/// align with the flattened elements). Uses the overflow-free form
/// `max(x,0) − x·y + ln(1+e^{−|x|})`; weights of zero drop positions from both the
/// loss and its gradient. Returns a scalar.
pub fn bce_with_logits(
    tape: &mut Tape,
    logits: TensorId,
    labels: &[f64],
    weights: &[f64],
) -> Result<TensorId> {
    let n = tape.value(logits).numel();
    if labels.len() != n || weights.len() != n {
        return Err(err!(
            Dim,
            "{n} logits but {} labels and {} weights",
            labels.len(),
            weights.len()
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| !(0.0..=1.0).contains(&y)) {
        return Err(err!(Input, "labels must lie in [0, 1], got {y}"));
    }
    if let Some(&w) = weights.iter().find(|&&w| !w.is_finite() || w < 0.0) {
        return Err(err!(Input, "weights must be finite and non-negative, got {w}"));
    }
    let total_weight: f64 = weights.iter().sum();
    if total_weight <= 0.0 {
        return Err(err!(Input, "all-zero weights leave nothing to average"));
    }

    let x = tape.value(logits).data();
    let mut total = 0.0;
    for i in 0..n {
        let term = x[i].max(0.0) - x[i] * labels[i] + (-x[i].abs()).exp().ln_1p();
        total += weights[i] * term;
    }
    let value = Tensor::scalar(total / total_weight);
    let op = BceWithLogits {
        logits,
        labels: labels.to_vec(),
        weights: weights.to_vec(),
        total_weight,
    };
    Ok(tape.record(value, vec![logits], Box::new(op), n as u64))
}

// ── prediction heads ────────────────────────────────────────────────────────────────

/// Parameters of the masked-token prediction head: a projection from the encoder
/// width back to the embedding width, a normalization, and a per-token output bias.
/// The decode matrix itself is the (shared) word-embedding table, so it is not here.
pub fn mlm_head_specs(hidden: usize, embedding: usize, vocab: usize) -> Vec<ParamSpec> {
    use ParamKind::*;
    vec![
        ParamSpec { name: "mlm.proj.weight".into(), shape: vec![hidden, embedding], kind: Weight },
        ParamSpec { name: "mlm.proj.bias".into(), shape: vec![embedding], kind: Bias },
        ParamSpec { name: "mlm.norm.gain".into(), shape: vec![embedding], kind: Gain },
        ParamSpec { name: "mlm.norm.bias".into(), shape: vec![embedding], kind: Bias },
        ParamSpec { name: "mlm.out.bias".into(), shape: vec![vocab], kind: Bias },
    ]
}

/// Token logits for selected hidden rows: project to embedding width, gelu,
/// normalize, then decode against the word table (`[vocab × embedding]`) plus bias.
/// Tying the decode matrix to the embedding table keeps input and output token
/// spaces aligned and is where the generator/discriminator sharing happens.
pub fn mlm_logits(
    tape: &mut Tape,
    head: &BoundParams,
    word_table: TensorId,
    hidden_sel: TensorId,
) -> Result<TensorId> {
    let h = tape.linear(hidden_sel, head.id("mlm.proj.weight")?, head.id("mlm.proj.bias")?)?;
    let h = tape.gelu(h)?;
    let h = tape.layer_norm(h, head.id("mlm.norm.gain")?, head.id("mlm.norm.bias")?, LN_EPS)?;
    let scores = tape.matmul_nt(h, word_table)?;
    tape.add_bias(scores, head.id("mlm.out.bias")?)
}

/// Parameters of the replaced-token detection head: one hidden dense layer and a
/// single-logit output.
pub fn rtd_head_specs(hidden: usize) -> Vec<ParamSpec> {
    use ParamKind::*;
    vec![
        ParamSpec { name: "rtd.dense.weight".into(), shape: vec![hidden, hidden], kind: Weight },
        ParamSpec { name: "rtd.dense.bias".into(), shape: vec![hidden], kind: Bias },
        ParamSpec { name: "rtd.out.weight".into(), shape: vec![hidden, 1], kind: Weight },
        ParamSpec { name: "rtd.out.bias".into(), shape: vec![1], kind: Bias },
    ]
}

/// Per-position replaced/original logits `[n × 1]` from encoder hidden states.
pub fn rtd_logits(tape: &mut Tape, head: &BoundParams, hidden: TensorId) -> Result<TensorId> {
    let h = tape.linear(hidden, head.id("rtd.dense.weight")?, head.id("rtd.dense.bias")?)?;
    let h = tape.gelu(h)?;
    tape.linear(h, head.id("rtd.out.weight")?, head.id("rtd.out.bias")?)
}

// ── masking ─────────────────────────────────────────────────────────────────────────

/// Fraction of maskable tokens selected for prediction.
pub const MASK_RATE: f64 = 0.15;
/// Of the selected tokens: this share becomes `[MASK]`…
const SHARE_MASK: f64 = 0.8;
/// …this share becomes a random real token, and the remainder stays unchanged.
const SHARE_RANDOM: f64 = 0.1;

/// One masked sequence: the corrupted input plus, for every selected position, where
/// it is and what stood there.
#[derive(Debug, Clone)]
pub struct MaskedExample {
    pub input: Vec<usize>,
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
}

/// Applies 15% / 80-10-10 masking. Special tokens (padding, separators, the mask
/// itself) are never selected; at least one position is always selected so the loss
/// is never empty. `vocab_len` bounds both the validity check and the random
/// replacements, which are drawn from the real-token range.
pub fn mask_tokens(ids: &[usize], vocab_len: usize, rng: &mut impl Rng) -> Result<MaskedExample> {
    if vocab_len <= RESERVED {
        return Err(err!(Input, "vocabulary of {vocab_len} holds no real tokens"));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab_len) {
        return Err(err!(Input, "token id {id} out of range for vocabulary of {vocab_len}"));
    }
    let eligible: Vec<usize> = (0..ids.len()).filter(|&i| !Vocab::is_special(ids[i])).collect();
    if eligible.is_empty() {
        return Err(err!(Input, "sequence holds only special tokens; nothing can be masked"));
    }

    let mut positions = Vec::new();
    for &i in &eligible {
        if rng.gen::<f64>() < MASK_RATE {
            positions.push(i);
        }
    }
    if positions.is_empty() {
        positions.push(eligible[rng.gen_range(0..eligible.len())]);
    }

    let mut input = ids.to_vec();
    let mut originals = Vec::with_capacity(positions.len());
    for &i in &positions {
        originals.push(ids[i]);
        let roll = rng.gen::<f64>();
        if roll < SHARE_MASK {
            input[i] = MASK;
        } else if roll < SHARE_MASK + SHARE_RANDOM {
            input[i] = rng.gen_range(RESERVED..vocab_len);
        }
        // Otherwise the token stays as is — the model must still predict it.
    }
    Ok(MaskedExample { input, positions, originals })
}

// ── generator scaling ───────────────────────────────────────────────────────────────

/// Derives the small generator for replaced-token training: a plain-attention,
/// ungrouped, unreduced encoder whose head count and feed-forward width shrink by
/// `multiplier` (at least one head survives). Depth, head size, embedding width,
/// vocabulary, and position budget carry over, so the generator can share the word
/// table with the main model.
pub fn generator_config(cfg: &ModelConfig, multiplier: f64) -> Result<ModelConfig> {
    if !(multiplier > 0.0 && multiplier <= 1.0) {
        return Err(err!(Config, "generator multiplier must lie in (0, 1], got {multiplier}"));
    }
    let heads = ((multiplier * cfg.attn_heads() as f64).round() as usize).max(1);
    let gen = ModelConfig {
        layers: cfg.layers,
        hidden: heads * cfg.head_dim,
        embedding: cfg.embedding,
        ffn_inner: ((multiplier * cfg.ffn_inner as f64).round() as usize).max(1),
        groups: 1,
        heads,
        reduction: 1,
        head_dim: cfg.head_dim,
        kernel_size: cfg.kernel_size,
        vocab_size: cfg.vocab_size,
        max_positions: cfg.max_positions,
        variant: Variant::Baseline,
    };
    gen.validate()?;
    Ok(gen)
}

// ── corpus ──────────────────────────────────────────────────────────────────────────

/// Encodes a corpus, one sequence per line: `[CLS] tokens [SEP]`, truncated to
/// `max_len` tokens overall. Blank lines are skipped; an empty result is an error.
pub fn load_corpus(text: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<usize>>> {
    if max_len < 3 {
        return Err(err!(Input, "sequence budget of {max_len} cannot fit delimiters plus a token"));
    }
    let mut seqs = Vec::new();
    for line in text.lines() {
        let mut toks = vocab.encode(line);
        if toks.is_empty() {
            continue;
        }
        toks.truncate(max_len - 2);
        let mut seq = Vec::with_capacity(toks.len() + 2);
        seq.push(CLS);
        seq.extend(toks);
        seq.push(SEP);
        seqs.push(seq);
    }
    if seqs.is_empty() {
        return Err(err!(Input, "corpus has no usable lines"));
    }
    Ok(seqs)
}

// ── training loop ───────────────────────────────────────────────────────────────────

/// Which pretraining objective drives the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Masked-token prediction only.
    Mlm,
    /// Generator + discriminator with the joint masked/replaced loss.
    Rtd,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mlm => "mlm",
            Objective::Rtd => "rtd",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Objective> {
        match s {
            "mlm" => Ok(Objective::Mlm),
            "rtd" => Ok(Objective::Rtd),
            other => Err(err!(Input, "unknown objective {other:?}; expected mlm or rtd")),
        }
    }
}

/// Knobs of one training run. Every stochastic choice derives from `seed`.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    /// Token budget per sequence, delimiters included.
    pub seq_len: usize,
    /// Weight of the replaced-token loss in the joint objective.
    pub rtd_weight: f64,
    /// Width multiplier for the generator.
    pub generator_multiplier: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Mlm,
            steps: 100,
            batch_size: 4,
            peak_lr: 1e-3,
            warmup: 10,
            seq_len: 64,
            rtd_weight: 50.0,
            generator_multiplier: 0.25,
            seed: 0,
        }
    }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub mlm_loss: f64,
    pub rtd_loss: f64,
    pub joint_loss: f64,
}

/// What a finished run hands back, beyond the files it wrote.
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    /// The trained main encoder (the discriminator, for replaced-token runs).
    pub model: ParamStore,
    pub vocab: Vocab,
    /// Replaced/original classification accuracy over a held-out-seed eval pass;
    /// absent for plain MLM runs.
    pub rtd_accuracy: Option<f64>,
}

/// Renders metrics as CSV, header first. Floats use the shortest round-trip form,
/// so equal runs produce equal bytes.
pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut s = String::from("step,lr,mlm_loss,rtd_loss,joint_loss\n");
    for m in metrics {
        s.push_str(&format!("{},{},{},{},{}\n", m.step, m.lr, m.mlm_loss, m.rtd_loss, m.joint_loss));
    }
    s
}

/// Parses what [`metrics_csv`] wrote.
pub fn parse_metrics(text: &str) -> Result<Vec<StepMetrics>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("step,lr,mlm_loss,rtd_loss,joint_loss") => {}
        other => return Err(err!(Input, "bad metrics header: {other:?}")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(err!(Input, "metrics row {} has {} fields, expected 5", i + 1, fields.len()));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| err!(Input, "bad number {s:?} in metrics row {}", i + 1))
        };
        out.push(StepMetrics {
            step: fields[0].parse().map_err(|_| err!(Input, "bad step {:?}", fields[0]))?,
            lr: num(fields[1])?,
            mlm_loss: num(fields[2])?,
            rtd_loss: num(fields[3])?,
            joint_loss: num(fields[4])?,
        });
    }
    Ok(out)
}

/// Samples one token from the softmax of `logits[lo..hi]`, returning an absolute
/// column index. Sampling is a data-level choice: no gradient flows through it.
fn sample_token(logits: &[f64], lo: usize, hi: usize, rng: &mut ChaCha8Rng) -> usize {
    let slice = &logits[lo..hi];
    let mx = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = slice.iter().map(|&v| (v - mx).exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (j, &p) in probs.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return lo + j;
        }
    }
    hi - 1 // reachable only through rounding at u ≈ total
}

/// Averages a non-empty list of scalar nodes on the tape.
fn mean_scalar(tape: &mut Tape, terms: &[TensorId]) -> Result<TensorId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Everything the replaced-token objective adds on top of the base model.
struct RtdParts {
    gen_cfg: ModelConfig,
    gen: ParamStore,
    head: ParamStore,
    adam_gen: Adam,
    adam_head: Adam,
}

/// Builds one replaced-token example on the tape: masks the sequence, scores the
/// masked slots with the generator, samples replacements, and labels each position
/// by whether it changed. Returns the generator loss term, the corrupted sequence,
/// and the labels.
#[allow(clippy::too_many_arguments)]
fn rtd_example(
    tape: &mut Tape,
    gen_cfg: &ModelConfig,
    b_gen: &BoundParams,
    b_mlm: &BoundParams,
    word: TensorId,
    seq: &[usize],
    vocab_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(TensorId, Vec<usize>, Vec<f64>)> {
    let segments = vec![0usize; seq.len()];
    let ex = mask_tokens(seq, vocab_len, rng)?;
    let fwd = encoder::forward(tape, gen_cfg, b_gen, &ex.input, &segments, None)?;
    let sel = tape.embed_rows(fwd.hidden, &ex.positions)?;
    let logits = mlm_logits(tape, b_mlm, word, sel)?;
    let ce = cross_entropy_selected(tape, logits, &ex.originals)?;

    let mut corrupted = seq.to_vec();
    {
        let lv = tape.value(logits);
        let cols = lv.cols();
        let data = lv.data();
        for (j, &pos) in ex.positions.iter().enumerate() {
            let row = &data[j * cols..(j + 1) * cols];
            corrupted[pos] = sample_token(row, RESERVED, vocab_len, rng);
        }
    }
    let labels: Vec<f64> =
        corrupted.iter().zip(seq).map(|(&c, &o)| if c == o { 0.0 } else { 1.0 }).collect();
    Ok((ce, corrupted, labels))
}

/// Runs the training loop and writes `metrics.csv`, `model.cvbt`, and `vocab.txt`
/// into `out_dir` (created if missing). The checkpoint holds the main encoder; the
/// heads and generator exist only for the run. With `steps = 0` the files still
/// appear, holding the initial state and a header-only log.
pub fn train(cfg: &ModelConfig, corpus: &str, tc: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if tc.batch_size == 0 {
        return Err(err!(Config, "batch size must be positive"));
    }
    if !(tc.peak_lr > 0.0 && tc.peak_lr.is_finite()) {
        return Err(err!(Config, "peak learning rate must be positive and finite, got {}", tc.peak_lr));
    }
    if !(tc.rtd_weight >= 0.0 && tc.rtd_weight.is_finite()) {
        return Err(err!(Config, "loss weight must be non-negative and finite, got {}", tc.rtd_weight));
    }
    if tc.seq_len > cfg.max_positions {
        return Err(err!(
            Config,
            "sequence budget {} exceeds the model's {} positions",
            tc.seq_len,
            cfg.max_positions
        ));
    }

    let vocab = Vocab::build(corpus, cfg.vocab_size)?;
    let seqs = load_corpus(corpus, &vocab, tc.seq_len)?;
    if seqs.len() < tc.batch_size {
        return Err(err!(
            Input,
            "corpus yields {} sequences but one batch needs {}",
            seqs.len(),
            tc.batch_size
        ));
    }

    let mut model = ParamStore::init(cfg, tc.seed);
    let mut adam_model = Adam::new(AdamConfig::default(), &model);

    // The prediction head sits on whichever encoder fills the masked slots: the model
    // itself for MLM, the generator for RTD.
    let mlm_hidden = match tc.objective {
        Objective::Mlm => cfg.hidden,
        Objective::Rtd => generator_config(cfg, tc.generator_multiplier)?.hidden,
    };
    let mut mlm_head = ParamStore::from_specs(
        mlm_head_specs(mlm_hidden, cfg.embedding, cfg.vocab_size),
        tc.seed.wrapping_add(1),
    );
    let mut adam_mlm = Adam::new(AdamConfig::default(), &mlm_head);

    let mut rtd = match tc.objective {
        Objective::Mlm => None,
        Objective::Rtd => {
            let gen_cfg = generator_config(cfg, tc.generator_multiplier)?;
            // The generator borrows the model's word table rather than owning one.
            let specs: Vec<ParamSpec> =
                param_specs(&gen_cfg).into_iter().filter(|s| s.name != "embeddings.word").collect();
            let gen = ParamStore::from_specs(specs, tc.seed.wrapping_add(2));
            let head = ParamStore::from_specs(rtd_head_specs(cfg.hidden), tc.seed.wrapping_add(3));
            let adam_gen = Adam::new(AdamConfig::default(), &gen);
            let adam_head = Adam::new(AdamConfig::default(), &head);
            Some(RtdParts { gen_cfg, gen, head, adam_gen, adam_head })
        }
    };

    let mut data_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(97));
    let mut metrics = Vec::with_capacity(tc.steps as usize);

    for step in 0..tc.steps {
        let lr = lr_schedule(tc.peak_lr, tc.warmup, tc.steps, step);
        let mut tape = Tape::new();
        let b_model = model.bind(&mut tape);
        let b_mlm = mlm_head.bind(&mut tape);
        let word = b_model.id("embeddings.word")?;
        let rtd_bound = match &rtd {
            Some(parts) => {
                let b_gen0 = parts.gen.bind(&mut tape);
                let b_gen = b_gen0.rebind("embeddings.word", word);
                let b_head = parts.head.bind(&mut tape);
                Some((b_gen0, b_gen, b_head))
            }
            None => None,
        };

        let mut mlm_terms = Vec::with_capacity(tc.batch_size);
        let mut rtd_terms = Vec::with_capacity(tc.batch_size);
        for b in 0..tc.batch_size {
            let seq = &seqs[(step as usize * tc.batch_size + b) % seqs.len()];
            match (&rtd, &rtd_bound) {
                (None, _) => {
                    let segments = vec![0usize; seq.len()];
                    let ex = mask_tokens(seq, vocab.len(), &mut data_rng)?;
                    let fwd = encoder::forward(&mut tape, cfg, &b_model, &ex.input, &segments, None)?;
                    let sel = tape.embed_rows(fwd.hidden, &ex.positions)?;
                    let logits = mlm_logits(&mut tape, &b_mlm, word, sel)?;
                    mlm_terms.push(cross_entropy_selected(&mut tape, logits, &ex.originals)?);
                }
                (Some(parts), Some((_, b_gen, b_head))) => {
                    let (ce, corrupted, labels) = rtd_example(
                        &mut tape,
                        &parts.gen_cfg,
                        b_gen,
                        &b_mlm,
                        word,
                        seq,
                        vocab.len(),
                        &mut data_rng,
                    )?;
                    mlm_terms.push(ce);
                    let segments = vec![0usize; seq.len()];
                    let fwd = encoder::forward(&mut tape, cfg, &b_model, &corrupted, &segments, None)?;
                    let logits = rtd_logits(&mut tape, b_head, fwd.hidden)?;
                    let weights = vec![1.0; seq.len()];
                    rtd_terms.push(bce_with_logits(&mut tape, logits, &labels, &weights)?);
                }
                _ => unreachable!("replaced-token bindings exist iff the parts do"),
            }
        }

        let mlm_mean = mean_scalar(&mut tape, &mlm_terms)?;
        let (joint, rtd_val) = if rtd_terms.is_empty() {
            (mlm_mean, 0.0)
        } else {
            let rtd_mean = mean_scalar(&mut tape, &rtd_terms)?;
            let weighted = tape.scale(rtd_mean, tc.rtd_weight)?;
            (tape.add(mlm_mean, weighted)?, tape.value(rtd_mean).data()[0])
        };
        let mlm_val = tape.value(mlm_mean).data()[0];
        let joint_val = tape.value(joint).data()[0];

        tape.backward(joint)?;

        let grads = collect_grads(&tape, &b_model);
        adam_model.step(&mut model, &grads, lr)?;
        let grads = collect_grads(&tape, &b_mlm);
        adam_mlm.step(&mut mlm_head, &grads, lr)?;
        if let (Some(parts), Some((b_gen0, _, b_head))) = (&mut rtd, &rtd_bound) {
            let grads = collect_grads(&tape, b_gen0);
            parts.adam_gen.step(&mut parts.gen, &grads, lr)?;
            let grads = collect_grads(&tape, b_head);
            parts.adam_head.step(&mut parts.head, &grads, lr)?;
        }

        metrics.push(StepMetrics { step, lr, mlm_loss: mlm_val, rtd_loss: rtd_val, joint_loss: joint_val });
    }

    let rtd_accuracy = match &rtd {
        None => None,
        Some(parts) => Some(rtd_eval(
            cfg,
            parts,
            &model,
            &mlm_head,
            &seqs,
            vocab.len(),
            tc.seed.wrapping_add(7919),
        )?),
    };

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&metrics))?;
    crate::checkpoint::save(&out_dir.join("model.cvbt"), cfg, &model)?;
    vocab.save(&out_dir.join("vocab.txt"))?;

    Ok(TrainOutcome { metrics, model, vocab, rtd_accuracy })
}

/// Fresh-seed evaluation of the discriminator: corrupt up to eight corpus sequences
/// with the trained generator, then score how often `logit > 0` agrees with the
/// replaced/original label, over all positions.
fn rtd_eval(
    cfg: &ModelConfig,
    parts: &RtdParts,
    model: &ParamStore,
    mlm_head: &ParamStore,
    seqs: &[Vec<usize>],
    vocab_len: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0u64;
    let mut total = 0u64;
    for seq in seqs.iter().take(8) {
        let mut tape = Tape::new();
        let b_model = model.bind(&mut tape);
        let b_mlm = mlm_head.bind(&mut tape);
        let word = b_model.id("embeddings.word")?;
        let b_gen = parts.gen.bind(&mut tape).rebind("embeddings.word", word);
        let b_head = parts.head.bind(&mut tape);

        let (_, corrupted, labels) =
            rtd_example(&mut tape, &parts.gen_cfg, &b_gen, &b_mlm, word, seq, vocab_len, &mut rng)?;
        let segments = vec![0usize; seq.len()];
        let fwd = encoder::forward(&mut tape, cfg, &b_model, &corrupted, &segments, None)?;
        let logits = rtd_logits(&mut tape, &b_head, fwd.hidden)?;
        let lv = tape.value(logits).data();
        for (i, &label) in labels.iter().enumerate() {
            if (lv[i] > 0.0) == (label > 0.5) {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}
