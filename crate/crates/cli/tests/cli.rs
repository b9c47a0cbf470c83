//! End-to-end runs of the `unigen` binary on a minimal trained checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn unigen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unigen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = unigen(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains one 8-pixel stage and returns (dir, generation config path, checkpoint path).
fn trained() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let train_cfg = dir.path().join("train.toml");
    fs::write(
        &train_cfg,
        r#"
[model]
preset = "tiny"
[train]
records_per_stage = 16
codebook_images = 16
[train.schedule]
global_batch = 4
eval_records = 4
[[train.schedule.stages]]
resolution = 8
learning_rate = 0.002
samples = 8
data = { records = 16 }
"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&train_cfg), "--output-dir", s(&out)]);
    let ck = out.join("model.ckpt");
    assert!(ck.is_file());
    assert!(out.join("loss.jsonl").is_file());

    let gen_cfg = dir.path().join("gen.toml");
    fs::write(
        &gen_cfg,
        format!(
            "[model]\npreset = \"tiny\"\n[pipeline]\nn = 1\nresolution = 8\n[sampler]\ntemperature = 0.0\n[paths]\ncheckpoint = {:?}\n",
            s(&ck)
        ),
    )
    .unwrap();
    (dir, gen_cfg, ck)
}

#[test]
fn subcommands_end_to_end() {
    let (dir, cfg, ck) = trained();
    let d = dir.path();

    // Greedy single-candidate generation is reproducible byte for byte.
    let (a, b) = (d.join("a"), d.join("b"));
    for o in [&a, &b] {
        ok(&["generate", "--config", s(&cfg), "--prompt", "a red circle", "--out", s(o)]);
    }
    let winner_a = fs::read(a.join("winner.ppm")).unwrap();
    assert_eq!(winner_a, fs::read(b.join("winner.ppm")).unwrap());
    assert!(a.join("candidates/000.ppm").is_file());
    assert!(fs::read_to_string(a.join("result.jsonl")).unwrap().lines().count() >= 2);

    // Quantize, then generate from the quantized checkpoint.
    let q = d.join("q.ckpt");
    let msg = ok(&["quantize", "--in", s(&ck), "--out", s(&q)]);
    assert!(msg.contains("smaller"), "{msg}");
    let qo = d.join("q");
    ok(&[
        "generate", "--config", s(&cfg), "--checkpoint", s(&q), "--prompt", "a blue square", "--mode", "sjd",
        "--n", "2", "--quantized", "--out", s(&qo),
    ]);
    assert!(qo.join("winner.ppm").is_file());

    // One table row per prompt and variant.
    let prompts = d.join("prompts.txt");
    fs::write(&prompts, "a red circle\na green square\n").unwrap();
    let stats = d.join("stats.jsonl");
    let table = ok(&["bench-decode", "--config", s(&cfg), "--prompts-file", s(&prompts), "--json", s(&stats)]);
    let rows = table
        .lines()
        .filter(|l| l.split_whitespace().next().is_some_and(|w| w.parse::<usize>().is_ok()))
        .count();
    assert_eq!(rows, 2 * 3, "{table}");
    assert_eq!(fs::read_to_string(&stats).unwrap().lines().count(), 6);

    // Codec table over the PPMs written above.
    let table = ok(&["eval-codec", "--corpus", s(&a.join("candidates")), "--sizes", "2,4"]);
    assert!(table.contains("PSNR"), "{table}");
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(unigen(&["generate", "--bogus"]).status.code(), Some(2));
    assert_eq!(unigen(&[]).status.code(), Some(2));
    let out = unigen(&["quantize", "--in", "/nonexistent/x.ckpt", "--out", "/tmp/never.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
