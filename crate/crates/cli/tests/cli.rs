use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn spanlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spanlab")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = spanlab(args, cwd);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const TINY: &str = "\
seed = 3
[encoder]
layers = 1
heads = 2
hidden = 8
ffn = 16
max_len = 64
[sampler]
spans_per_granularity = 2
[train]
batch_size = 4
max_steps = 4
lr = 1e-3
";

/// Pre-training corpus, vocabulary and the tiny config in a fresh directory.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["synth", "--kind", "pretrain", "--docs", "12", "--out-dir", "data"], p);
    ok(&["build-vocab", "--corpus", "data/corpus.jsonl", "--out", "vocab.tsv"], p);
    std::fs::write(p.join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = spanlab(&["pretrain", "--temperature", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(spanlab(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_inputs_report_machine_readable_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = spanlab(&["eval", "--run", "nope.txt", "--qrels", "nope.txt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "io");

    let out = spanlab(&["search"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "config");
}

#[test]
fn gradcheck_reports_the_max_error() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck"], dir.path());
    let line = stdout.lines().find(|l| l.starts_with("max_rel_error\t")).expect("max error line");
    let err: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{err}");
    assert!(stdout.contains("result\tpass"));
}

#[test]
fn eval_prints_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("qrels"), "q1 0 a 1\nq1 0 b 0\nq2 0 c 2\n").unwrap();
    std::fs::write(p.join("run"), "q1 Q0 b 1 3.0 x\nq1 Q0 a 2 2.0 x\nq2 Q0 d 1 1.0 x\n").unwrap();
    let stdout = ok(&["eval", "--run", "run", "--qrels", "qrels", "--metrics", "mrr@10,recall@1"], p);
    assert_eq!(stdout, "metric\tvalue\tqueries\nmrr@10\t0.25\t2\nrecall@1\t0\t2\n");
}

#[test]
fn ablate_temperature_writes_one_row_per_value() {
    let dir = workspace();
    let p = dir.path();
    ok(
        &["--config", "tiny.toml", "ablate", "--axis", "temperature", "--corpus", "data/corpus.jsonl", "--vocab", "vocab.tsv", "--out", "t.tsv"],
        p,
    );
    let text = String::from_utf8(bytes(p.join("t.tsv"))).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("axis\tvalue\t"));
    let values: Vec<&str> = lines[1..].iter().map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(values, ["10", "1", "0.1", "0.01"]);
    for l in &lines[1..] {
        assert_eq!(l.split('\t').count(), 8);
        assert!(l.ends_with("\tNA\tNA"));
    }
}

#[test]
fn config_file_and_flags_agree() {
    let dir = workspace();
    let p = dir.path();
    let full = format!("{TINY}[loss]\ntau = 0.5\nlambda = 0.2\n");
    std::fs::write(p.join("full.toml"), full).unwrap();
    let common = ["--corpus", "data/corpus.jsonl", "--vocab", "vocab.tsv"];

    let mut a = vec!["--config", "full.toml", "pretrain", "--out-dir", "a"];
    a.extend(common);
    ok(&a, p);

    let mut b = vec![
        "--seed", "3", "pretrain", "--out-dir", "b", "--layers", "1", "--heads", "2", "--hidden", "8", "--ffn", "16",
        "--max-len", "64", "--spans-per-granularity", "2", "--batch-size", "4", "--max-steps", "4", "--lr", "1e-3",
        "--tau", "0.5", "--lambda", "0.2",
    ];
    b.extend(common);
    ok(&b, p);

    let mut c = vec!["--config", "tiny.toml", "pretrain", "--out-dir", "c", "--tau", "0.5", "--lambda", "0.2"];
    c.extend(common);
    ok(&c, p);

    for f in ["loss.tsv", "final.ckpt", "spans.tsv"] {
        assert_eq!(bytes(p.join("a").join(f)), bytes(p.join("b").join(f)), "{f}");
        assert_eq!(bytes(p.join("a").join(f)), bytes(p.join("c").join(f)), "{f}");
    }
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = workspace();
    let p = dir.path();
    for (threads, tag) in [("1", "x"), ("4", "y")] {
        ok(
            &["--config", "tiny.toml", "--threads", threads, "sample-spans", "--corpus", "data/corpus.jsonl", "--vocab", "vocab.tsv", "--out", &format!("{tag}.spans")],
            p,
        );
        ok(
            &["--config", "tiny.toml", "--threads", threads, "pretrain", "--corpus", "data/corpus.jsonl", "--vocab", "vocab.tsv", "--out-dir", tag],
            p,
        );
    }
    assert_eq!(bytes(p.join("x.spans")), bytes(p.join("y.spans")));
    assert_eq!(bytes(p.join("x.spans")), bytes(p.join("x/spans.tsv")));
    for f in ["loss.tsv", "final.ckpt"] {
        assert_eq!(bytes(p.join("x").join(f)), bytes(p.join("y").join(f)), "{f}");
    }
    let other_seed = ["--config", "tiny.toml", "--seed", "4", "sample-spans", "--corpus", "data/corpus.jsonl", "--vocab", "vocab.tsv", "--out", "z.spans"];
    ok(&other_seed, p);
    assert_ne!(bytes(p.join("x.spans")), bytes(p.join("z.spans")));
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let dir = workspace();
    let p = dir.path();
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "--config", "tiny.toml", "pretrain", "--corpus", "data/corpus.jsonl", "--vocab", "vocab.tsv", "--max-steps", "6",
            "--checkpoint-every", "3", "--out-dir", out,
        ];
        args.extend(extra);
        ok(&args, p);
    };
    run("full", &[]);
    run("cut", &[]);
    let log = String::from_utf8(bytes(p.join("cut/loss.tsv"))).unwrap();
    let head: Vec<&str> = log.lines().take(4).collect();
    std::fs::write(p.join("cut/loss.tsv"), format!("{}\n", head.join("\n"))).unwrap();
    std::fs::remove_file(p.join("cut/final.ckpt")).unwrap();
    run("cut", &["--resume", "cut/step-000003.ckpt"]);
    assert_eq!(bytes(p.join("full/loss.tsv")), bytes(p.join("cut/loss.tsv")));
    assert_eq!(bytes(p.join("full/final.ckpt")), bytes(p.join("cut/final.ckpt")));
}

#[test]
fn retrieval_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("r.toml"),
        "[encoder]\nlayers = 1\nheads = 2\nhidden = 8\nffn = 16\nmax_len = 64\n[finetune]\nepochs = 1\nlr = 1e-3\n",
    )
    .unwrap();
    ok(&["synth", "--topics", "4", "--docs-per-topic", "3", "--out-dir", "data"], p);
    ok(&["build-vocab", "--corpus", "data/corpus.jsonl", "--out", "vocab.tsv"], p);
    let corpus = ["--corpus", "data/corpus.jsonl", "--vocab", "vocab.tsv"];
    let with = |head: &[&str], tail: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = vec!["--config".into(), "r.toml".into()];
        v.extend(head.iter().map(|s| s.to_string()));
        v.extend(corpus.iter().map(|s| s.to_string()));
        v.extend(tail.iter().map(|s| s.to_string()));
        v
    };
    let call = |v: Vec<String>| ok(&v.iter().map(String::as_str).collect::<Vec<_>>(), p);

    call(with(
        &["mine-negatives", "--lexical", "--negatives", "3"],
        &["--queries", "data/queries-train.jsonl", "--qrels", "data/qrels.txt", "--out-dir", "mine"],
    ));
    call(with(
        &["finetune"],
        &["--queries", "data/queries-train.jsonl", "--triples", "mine/triples-iter0.tsv", "--out", "ft.ckpt", "--log", "ft.tsv"],
    ));
    call(with(&["build-index"], &["--checkpoint", "ft.ckpt", "--out", "index.bin"]));
    ok(
        &["--config", "r.toml", "search", "--vocab", "vocab.tsv", "--queries", "data/queries-test.jsonl", "--checkpoint", "ft.ckpt", "--index", "index.bin", "--topk", "5", "--out", "run.txt"],
        p,
    );
    let run = String::from_utf8(bytes(p.join("run.txt"))).unwrap();
    assert_eq!(run.lines().count(), 4 * 5);
    let stdout = ok(&["eval", "--run", "run.txt", "--qrels", "data/qrels.txt"], p);
    assert_eq!(stdout.lines().count(), 5);

    call(with(
        &["mine-negatives", "--negatives", "3", "--topk", "6", "--iterations", "2"],
        &["--queries", "data/queries-train.jsonl", "--qrels", "data/qrels.txt", "--checkpoint", "ft.ckpt", "--out-dir", "mine"],
    ));
    for f in ["triples-iter1.tsv", "triples-iter2.tsv", "finetune-iter1.ckpt", "finetune-iter2.ckpt"] {
        assert!(p.join("mine").join(f).exists(), "{f}");
    }

    let other = PathBuf::from("other.ckpt");
    call(with(&["finetune", "--init-from", "ft.ckpt"], &["--queries", "data/queries-train.jsonl", "--triples", "mine/triples-iter1.tsv", "--out", other.to_str().unwrap()]));
    let out = spanlab(
        &["search", "--vocab", "vocab.tsv", "--queries", "data/queries-test.jsonl", "--checkpoint", "other.ckpt", "--index", "index.bin", "--out", "x.txt"],
        p,
    );
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "fingerprint_mismatch");
}
