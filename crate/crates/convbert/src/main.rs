//! Command-line front end: cost accounting, verification suites, toy pretraining,
//! attention-map export, and scaling benchmarks.
//!
//! Exit codes: 0 on success, 1 when a verification suite reports a failure or a
//! command fails at runtime (unreadable file, invalid checkpoint, …), 2 when the
//! command line itself is invalid (unknown flag, missing required flag, bad value).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use convbert::attention;
use convbert::checkpoint;
use convbert::checks::{self, CheckOutcome, Scope};
use convbert::config::{ModelConfig, Variant};
use convbert::conv;
use convbert::cost;
use convbert::encoder::average_attention_map;
use convbert::error::{Error, Result};
use convbert::gradcheck::random_tensor;
use convbert::pretrain::{self, Objective, TrainConfig};
use convbert::tensor::Tape;
use convbert::vocab::{Vocab, CLS, RESERVED, SEP};

#[derive(Parser)]
#[command(
    name = "convbert",
    version,
    about = "Mixed-attention encoder: cost accounting, verification, training, and inspection",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Named model size, mapped onto the structural presets.
#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Small,
    MediumSmall,
    Base,
}

impl PresetArg {
    fn as_str(self) -> &'static str {
        match self {
            PresetArg::Small => "small",
            PresetArg::MediumSmall => "medium-small",
            PresetArg::Base => "base",
        }
    }
}

/// Mechanism set, named the way the size/variant grid names them.
#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    #[value(name = "bert-baseline")]
    Baseline,
    #[value(name = "bnk")]
    Bottleneck,
    #[value(name = "bnk+sdconv")]
    BottleneckConv,
    #[value(name = "bnk+gl")]
    BottleneckGrouped,
    #[value(name = "bnk+gl+sdconv")]
    BottleneckGroupedConv,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Bottleneck => Variant::Bottleneck,
            VariantArg::BottleneckConv => Variant::BottleneckConv,
            VariantArg::BottleneckGrouped => Variant::BottleneckGrouped,
            VariantArg::BottleneckGroupedConv => Variant::BottleneckGroupedConv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Op,
    Block,
    Model,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Scope {
        match s {
            ScopeArg::Op => Scope::Op,
            ScopeArg::Block => Scope::Block,
            ScopeArg::Model => Scope::Model,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Mlm,
    Rtd,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Objective {
        match o {
            ObjectiveArg::Mlm => Objective::Mlm,
            ObjectiveArg::Rtd => Objective::Rtd,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter breakdown for a preset (totals and per-section counts)
    CountParams {
        /// Model size
        #[arg(long, value_enum)]
        preset: PresetArg,
        /// Mechanism set
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Emit machine-readable CSV instead of the text table
        #[arg(long)]
        csv: bool,
    },
    /// Print the forward multiply-accumulate breakdown at a sequence length
    CountFlops {
        /// Model size
        #[arg(long, value_enum)]
        preset: PresetArg,
        /// Mechanism set
        #[arg(long, value_enum, default_value = "bnk+sdconv")]
        variant: VariantArg,
        /// Sequence length the counts are evaluated at
        #[arg(long)]
        seq_len: usize,
        /// Emit machine-readable CSV instead of the text table
        #[arg(long)]
        csv: bool,
    },
    /// Compare analytic gradients against finite differences; exit 1 on any failure
    GradCheck {
        /// Granularity: single ops, composite blocks, or a whole tiny model
        #[arg(long, value_enum)]
        scope: ScopeArg,
        /// Seed for the randomized instances
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare every structured op against its naive oracle; exit 1 on any failure
    OracleCheck {
        /// Seed for the randomized instances
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a line-per-document corpus and write checkpoint + metrics
    Train(TrainArgs),
    /// Write the head- and layer-averaged attention map for a text as an n×n CSV
    DumpAttention {
        /// Checkpoint written by `train` (or any compatible model file)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input text; whitespace-tokenized, wrapped in delimiter tokens
        #[arg(long)]
        text: String,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Token table written alongside the checkpoint; without it, tokens hash
        /// onto the non-reserved id range
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Time the attention and span-convolution ops across sequence lengths
    BenchScaling {
        /// Model size the op widths are taken from
        #[arg(long, value_enum)]
        preset: PresetArg,
        /// Mechanism set
        #[arg(long, value_enum, default_value = "bnk+sdconv")]
        variant: VariantArg,
        /// Comma-separated sequence lengths
        #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
        lens: Vec<usize>,
        /// Timing repeats per length (the minimum is reported)
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Seed for the random op inputs
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Training objective
    #[arg(long, value_enum)]
    objective: ObjectiveArg,
    /// UTF-8 corpus, one document per line
    #[arg(long)]
    corpus: PathBuf,
    /// Optimizer steps to run
    #[arg(long)]
    steps: u64,
    /// Output directory for checkpoint, token table, and metrics
    #[arg(long)]
    out: PathBuf,
    /// Model config file (as written by a checkpointed run)
    #[arg(long, required_unless_present = "preset", conflicts_with_all = ["preset", "variant"])]
    config: Option<PathBuf>,
    /// Model size preset, as an alternative to --config
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Mechanism set for --preset
    #[arg(long, value_enum, default_value = "bnk+sdconv")]
    variant: VariantArg,
    /// Peak learning rate
    #[arg(long, default_value_t = TrainConfig::default().peak_lr)]
    lr: f64,
    /// Linear warmup steps
    #[arg(long, default_value_t = TrainConfig::default().warmup)]
    warmup: u64,
    /// Sequences per step
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    /// Token budget per sequence, delimiters included
    #[arg(long, default_value_t = TrainConfig::default().seq_len)]
    seq_len: usize,
    /// Weight of the replaced-token loss in the joint objective
    #[arg(long, default_value_t = TrainConfig::default().rtd_weight)]
    rtd_weight: f64,
    /// Generator width multiplier for the replaced-token objective
    #[arg(long, default_value_t = TrainConfig::default().generator_multiplier)]
    generator_multiplier: f64,
    /// Seed all randomness derives from
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Runs one subcommand; `Ok(false)` means a verification suite reported failures.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::CountParams { preset, variant, csv } => {
            let cfg = ModelConfig::preset(preset.as_str(), variant.into())?;
            let report = cost::count_params(&cfg);
            print!("{}", if csv { report.to_csv() } else { report.to_text() });
            Ok(true)
        }
        Command::CountFlops { preset, variant, seq_len, csv } => {
            let cfg = ModelConfig::preset(preset.as_str(), variant.into())?;
            let report = cost::count_flops(&cfg, seq_len)?;
            print!("{}", if csv { report.to_csv() } else { report.to_text() });
            Ok(true)
        }
        Command::GradCheck { scope, seed } => {
            report_outcomes("grad-check", &checks::grad_suite(scope.into(), seed)?)
        }
        Command::OracleCheck { seed } => {
            report_outcomes("oracle-check", &checks::oracle_suite(seed)?)
        }
        Command::Train(args) => run_train(args),
        Command::DumpAttention { checkpoint, text, out, vocab } => {
            run_dump_attention(&checkpoint, &text, &out, vocab.as_deref())
        }
        Command::BenchScaling { preset, variant, lens, repeats, seed } => {
            run_bench(preset, variant, &lens, repeats, seed)
        }
    }
}

/// Prints one line per check and a summary line; returns whether all passed.
fn report_outcomes(suite: &str, outcomes: &[CheckOutcome]) -> Result<bool> {
    let mut failures = 0usize;
    for o in outcomes {
        let status = if o.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<24} worst {:.3e} (tolerance {:.0e})", o.name, o.worst, o.tolerance);
        if !o.passed() {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("{suite}: all {} checks passed", outcomes.len());
        Ok(true)
    } else {
        println!("{suite}: {failures} of {} checks FAILED", outcomes.len());
        Ok(false)
    }
}

fn run_train(args: TrainArgs) -> Result<bool> {
    let cfg = match (&args.config, args.preset) {
        (Some(path), None) => ModelConfig::from_text(&std::fs::read_to_string(path)?)?,
        (None, Some(preset)) => ModelConfig::preset(preset.as_str(), args.variant.into())?,
        // clap enforces exactly one of the two.
        _ => return Err(Error::Input("pass exactly one of --config or --preset".into())),
    };
    let corpus = std::fs::read_to_string(&args.corpus)?;
    let tc = TrainConfig {
        objective: args.objective.into(),
        steps: args.steps,
        batch_size: args.batch_size,
        peak_lr: args.lr,
        warmup: args.warmup,
        seq_len: args.seq_len,
        rtd_weight: args.rtd_weight,
        generator_multiplier: args.generator_multiplier,
        seed: args.seed,
    };
    let outcome = pretrain::train(&cfg, &corpus, &tc, &args.out)?;
    if let (Some(first), Some(last)) = (outcome.metrics.first(), outcome.metrics.last()) {
        println!(
            "step {}: mlm loss {:.6}  joint loss {:.6}",
            first.step, first.mlm_loss, first.joint_loss
        );
        println!(
            "step {}: mlm loss {:.6}  joint loss {:.6}",
            last.step, last.mlm_loss, last.joint_loss
        );
    }
    if let Some(acc) = outcome.rtd_accuracy {
        println!("replaced-token detection accuracy: {acc:.4}");
    }
    println!("wrote {}", args.out.join("model.cvbt").display());
    println!("wrote {}", args.out.join("vocab.txt").display());
    println!("wrote {}", args.out.join("metrics.csv").display());
    Ok(true)
}

/// 64-bit FNV-1a; a fixed, platform-independent token hash for vocab-free dumps.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn run_dump_attention(
    checkpoint: &Path,
    text: &str,
    out: &Path,
    vocab: Option<&Path>,
) -> Result<bool> {
    let (cfg, store) = checkpoint::load(checkpoint)?;
    let vocab = match vocab {
        Some(path) => Some(Vocab::load(path)?),
        None => None,
    };
    let mut ids = vec![CLS];
    for tok in text.split_whitespace() {
        let id = match &vocab {
            Some(v) => v.id(tok),
            None => {
                let span = cfg.vocab_size - RESERVED;
                RESERVED + (fnv1a(tok.as_bytes()) % span as u64) as usize
            }
        };
        ids.push(id);
    }
    ids.push(SEP);

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let segments = vec![0; ids.len()];
    let fwd = convbert::encoder::forward(&mut tape, &cfg, &bound, &ids, &segments, None)?;
    let map = average_attention_map(&tape, &fwd.maps)?;

    let n = map.rows();
    let mut csv = String::new();
    for i in 0..n {
        for j in 0..n {
            if j > 0 {
                csv.push(',');
            }
            csv.push_str(&format!("{}", map.data()[i * n + j]));
        }
        csv.push('\n');
    }
    std::fs::write(out, csv)?;
    println!("wrote {}×{n} attention map to {}", n, out.display());
    Ok(true)
}

/// Times one op builder over `repeats` runs and returns (best seconds, tape madds).
fn time_op(repeats: usize, mut build: impl FnMut() -> Result<u64>) -> Result<(f64, u64)> {
    let mut best = f64::INFINITY;
    let mut madds = 0;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        madds = build()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok((best, madds))
}

fn run_bench(
    preset: PresetArg,
    variant: VariantArg,
    lens: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<bool> {
    let cfg = ModelConfig::preset(preset.as_str(), variant.into())?;
    if lens.is_empty() {
        return Err(Error::Input("--lens needs at least one length".into()));
    }
    let (w, heads, k) = (cfg.attn_width(), cfg.attn_heads(), cfg.kernel_size);
    let d_head = cfg.head_dim;
    println!(
        "op widths from preset {} / {}: attention width {w}, {heads} heads, {k} taps",
        preset.as_str(),
        cfg.variant.name()
    );
    // Warm-up at the largest length so allocator growth and page faults are paid
    // before any measurement; otherwise the first timed length absorbs them and
    // skews the ratios.
    {
        let n_max = lens.iter().copied().max().unwrap_or(1).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_tensor(&mut rng, &[n_max, w], 1.0);
        let key = random_tensor(&mut rng, &[n_max, w], 1.0);
        let v = random_tensor(&mut rng, &[n_max, w], 1.0);
        let kw = random_tensor(&mut rng, &[heads, d_head, k], 1.0);
        let mut tape = Tape::new();
        let ids = [&q, &key, &v].map(|t| tape.leaf(t));
        attention::self_attention(&mut tape, ids[0], ids[1], ids[2], heads, None)?;
        let mut tape = Tape::new();
        let ids = [&q, &key, &v, &kw].map(|t| tape.leaf(t));
        conv::sdconv(&mut tape, ids[0], ids[1], ids[2], ids[3])?;
    }
    println!(
        "{:<8} {:<12} {:>16} {:>12} {:>14} {:>12}",
        "len", "component", "madds", "madds-ratio", "time-ms", "time-ratio"
    );
    let mut prev: Option<(u64, f64, u64, f64)> = None;
    for &n in lens {
        if n == 0 {
            return Err(Error::Input("sequence lengths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let q = random_tensor(&mut rng, &[n, w], 1.0);
        let key = random_tensor(&mut rng, &[n, w], 1.0);
        let v = random_tensor(&mut rng, &[n, w], 1.0);
        let kw = random_tensor(&mut rng, &[heads, d_head, k], 1.0);

        let (attn_s, attn_madds) = time_op(repeats, || {
            let mut tape = Tape::new();
            let (qi, ki, vi) = (tape.leaf(&q), tape.leaf(&key), tape.leaf(&v));
            attention::self_attention(&mut tape, qi, ki, vi, heads, None)?;
            Ok(tape.madds())
        })?;
        let (conv_s, conv_madds) = time_op(repeats, || {
            let mut tape = Tape::new();
            let ids = [&q, &key, &v, &kw].map(|t| tape.leaf(t));
            conv::sdconv(&mut tape, ids[0], ids[1], ids[2], ids[3])?;
            Ok(tape.madds())
        })?;

        let ratio = |num: f64, den: f64| if den > 0.0 { format!("{:.2}", num / den) } else { "-".into() };
        let (am_r, at_r, cm_r, ct_r) = match prev {
            Some((pam, pat, pcm, pct)) => (
                ratio(attn_madds as f64, pam as f64),
                ratio(attn_s, pat),
                ratio(conv_madds as f64, pcm as f64),
                ratio(conv_s, pct),
            ),
            None => ("-".into(), "-".into(), "-".into(), "-".into()),
        };
        println!(
            "{:<8} {:<12} {:>16} {:>12} {:>14.3} {:>12}",
            n,
            "attention",
            attn_madds,
            am_r,
            attn_s * 1e3,
            at_r
        );
        println!(
            "{:<8} {:<12} {:>16} {:>12} {:>14.3} {:>12}",
            n,
            "sdconv",
            conv_madds,
            cm_r,
            conv_s * 1e3,
            ct_r
        );
        prev = Some((attn_madds, attn_s, conv_madds, conv_s));
    }
    Ok(true)
}
