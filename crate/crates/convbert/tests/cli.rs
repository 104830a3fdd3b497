//! End-to-end checks of the command-line binary: the exit-code contract
//! (0 success, 1 verification/runtime failure, 2 usage error), `--help`
//! coverage, exact CSV round-trips, and deterministic training runs.

use std::path::Path;
use std::process::{Command, Output};

use convbert::config::{ModelConfig, Variant};
use convbert::cost;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_convbert"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("binary should exit, not be killed")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout should be UTF-8")
}

// ── help ───────────────────────────────────────────────────────────────────────────

#[test]
fn every_subcommand_documents_itself() {
    let top = run(&["--help"]);
    assert_eq!(code(&top), 0);
    let text = stdout(&top);
    let subcommands = [
        "count-params",
        "count-flops",
        "grad-check",
        "oracle-check",
        "train",
        "dump-attention",
        "bench-scaling",
    ];
    for sub in subcommands {
        assert!(text.contains(sub), "top-level help does not list `{sub}`");
    }

    // Each subcommand's help must exist and mention its distinctive flag.
    let flags = [
        ("count-params", "--variant"),
        ("count-flops", "--seq-len"),
        ("grad-check", "--scope"),
        ("oracle-check", "--seed"),
        ("train", "--objective"),
        ("dump-attention", "--checkpoint"),
        ("bench-scaling", "--lens"),
    ];
    for (sub, flag) in flags {
        let out = run(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "`{sub} --help` should exit 0");
        assert!(
            stdout(&out).contains(flag),
            "`{sub} --help` does not mention `{flag}`"
        );
    }
}

// ── exit codes ─────────────────────────────────────────────────────────────────────

#[test]
fn usage_errors_exit_two() {
    let cases: &[&[&str]] = &[
        &[],                                                  // no subcommand
        &["no-such-subcommand"],                              // unknown subcommand
        &["count-params"],                                    // missing required flags
        &["count-params", "--variant", "bnk"],                // missing --preset
        &["count-params", "--preset", "huge", "--variant", "bnk"], // bad value
        &["count-params", "--preset", "small", "--variant", "bnk", "--bogus"], // unknown flag
        &["count-flops", "--preset", "small"],                // missing --seq-len
        &["grad-check", "--scope", "everything"],             // bad enum value
        &["dump-attention", "--checkpoint", "x", "--out", "y"], // missing --text
    ];
    for args in cases {
        let out = run(args);
        assert_eq!(code(&out), 2, "expected usage error (2) for {args:?}");
    }

    // --config conflicts with --preset/--variant, and one of them is required.
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("m.cfg");
    std::fs::write(&cfg_path, tiny_config().to_text()).unwrap();
    let cfg_str = cfg_path.to_str().unwrap();
    let conflict = run(&[
        "train", "--objective", "mlm", "--corpus", "c.txt", "--steps", "1",
        "--out", "o", "--config", cfg_str, "--preset", "small",
    ]);
    assert_eq!(code(&conflict), 2, "--config together with --preset should be rejected");
    let neither = run(&[
        "train", "--objective", "mlm", "--corpus", "c.txt", "--steps", "1", "--out", "o",
    ]);
    assert_eq!(code(&neither), 2, "train with neither --config nor --preset should be rejected");
}

#[test]
fn runtime_failures_exit_one_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("does-not-exist");
    let missing = missing.to_str().unwrap();

    let train = run(&[
        "train", "--objective", "mlm", "--corpus", missing, "--steps", "1",
        "--out", dir.path().join("out").to_str().unwrap(), "--preset", "small",
    ]);
    assert_eq!(code(&train), 1, "missing corpus should be a runtime failure");
    assert!(!train.stderr.is_empty(), "runtime failure should explain itself on stderr");

    let dump = run(&[
        "dump-attention", "--checkpoint", missing, "--text", "a b", "--out", missing,
    ]);
    assert_eq!(code(&dump), 1, "missing checkpoint should be a runtime failure");
    assert!(!dump.stderr.is_empty());
}

#[test]
fn verification_subcommands_exit_zero_when_green() {
    let oracle = run(&["oracle-check", "--seed", "5"]);
    assert_eq!(code(&oracle), 0, "oracle-check should pass: {}", stdout(&oracle));
    assert!(stdout(&oracle).contains("PASS"));

    let grad = run(&["grad-check", "--scope", "op", "--seed", "5"]);
    assert_eq!(code(&grad), 0, "grad-check should pass: {}", stdout(&grad));
    assert!(stdout(&grad).contains("PASS"));
}

// ── cost-report CSV round-trip ─────────────────────────────────────────────────────

#[test]
fn cost_csv_output_round_trips_exactly() {
    let cfg = ModelConfig::preset("small", Variant::BottleneckConv).unwrap();

    let out = run(&["count-params", "--preset", "small", "--variant", "bnk+sdconv", "--csv"]);
    assert_eq!(code(&out), 0);
    let report = cost::count_params(&cfg);
    assert_eq!(stdout(&out), report.to_csv(), "binary CSV differs from the library's");
    assert_eq!(
        cost::parse_csv(&stdout(&out)).unwrap(),
        report.flatten(),
        "re-parsed CSV rows differ from the in-memory report"
    );

    let out = run(&[
        "count-flops", "--preset", "small", "--variant", "bnk+sdconv",
        "--seq-len", "64", "--csv",
    ]);
    assert_eq!(code(&out), 0);
    let report = cost::count_flops(&cfg, 64).unwrap();
    assert_eq!(stdout(&out), report.to_csv());
    assert_eq!(cost::parse_csv(&stdout(&out)).unwrap(), report.flatten());
}

// ── training end to end ────────────────────────────────────────────────────────────

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 16,
        embedding: 8,
        ffn_inner: 32,
        groups: 1,
        heads: 2,
        reduction: 2,
        head_dim: 8,
        kernel_size: 3,
        vocab_size: 24,
        max_positions: 16,
        variant: Variant::BottleneckConv,
    }
}

fn write_corpus(path: &Path) {
    let lines: Vec<String> = (0..8)
        .map(|i| (0..4).map(|j| format!("w{}", (i + j) % 8)).collect::<Vec<_>>().join(" "))
        .collect();
    std::fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn training_is_seed_deterministic_and_feeds_dump_attention() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.cfg");
    std::fs::write(&cfg_path, tiny_config().to_text()).unwrap();
    let corpus = dir.path().join("corpus.txt");
    write_corpus(&corpus);

    let train = |out_dir: &str, seed: &str| {
        run(&[
            "train", "--objective", "mlm",
            "--corpus", corpus.to_str().unwrap(),
            "--steps", "12", "--batch-size", "4", "--seq-len", "8",
            "--warmup", "4", "--lr", "0.001",
            "--config", cfg_path.to_str().unwrap(),
            "--out", dir.path().join(out_dir).to_str().unwrap(),
            "--seed", seed,
        ])
    };

    let a = train("a", "3");
    assert_eq!(code(&a), 0, "train failed: {}", String::from_utf8_lossy(&a.stderr));
    let b = train("b", "3");
    assert_eq!(code(&b), 0);
    let c = train("c", "4");
    assert_eq!(code(&c), 0);

    for name in ["model.cvbt", "vocab.txt", "metrics.csv"] {
        assert!(dir.path().join("a").join(name).exists(), "train should write {name}");
    }
    let metrics_a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let metrics_b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    let metrics_c = std::fs::read(dir.path().join("c/metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b, "same seed should reproduce metrics byte for byte");
    assert_ne!(metrics_a, metrics_c, "a different seed should change the trajectory");

    // The checkpoint it wrote must drive the attention dump: n tokens plus the
    // two delimiters give an (n+2)×(n+2) stochastic matrix.
    let map_path = dir.path().join("map.csv");
    let dump = run(&[
        "dump-attention",
        "--checkpoint", dir.path().join("a/model.cvbt").to_str().unwrap(),
        "--vocab", dir.path().join("a/vocab.txt").to_str().unwrap(),
        "--text", "w0 w1 w2",
        "--out", map_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&dump), 0, "dump failed: {}", String::from_utf8_lossy(&dump.stderr));
    let csv = std::fs::read_to_string(&map_path).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 5, "3 tokens + 2 delimiters should give 5 rows");
    for row in rows {
        let vals: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 5);
        let sum: f64 = vals.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "attention row sums to {sum}, not 1");
    }
}
