use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cmam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to launch cmam")
}

fn ok(args: &[&str]) -> Output {
    let out = cmam(args);
    assert!(
        out.status.success(),
        "cmam {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small synthetic corpus with vocabulary and embeddings.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        ok(&["synth", "--out-dir", p(&f.path("data")), "--sentences", "600", "--seed", "3"]);
        ok(&[
            "embed",
            "--corpus",
            p(&f.path("data/corpus.txt")),
            "--out-embeddings",
            p(&f.path("emb.txt")),
            "--out-vocab",
            p(&f.path("vocab.tsv")),
            "--dim",
            "8",
            "--epochs",
            "1",
            "--center",
        ]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Vec<u8> {
        let out_dir = self.path(out);
        let mut args = vec![
            "train",
            "--corpus",
            p(&self.path("data/corpus.txt")),
            "--vocab",
            p(&self.path("vocab.tsv")),
            "--embeddings",
            p(&self.path("emb.txt")),
            "--out-dir",
            p(&out_dir),
            "--aspects",
            "4",
            "--epochs",
            "2",
            "--batch-size",
            "32",
        ]
        .into_iter()
        .map(str::to_owned)
        .collect::<Vec<_>>();
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
        fs::read(out_dir.join("epoch-2.ckpt")).unwrap()
    }
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let f = Fixture::new();
    let a = f.train("a", &[]);
    let b = f.train("b", &["--threads", "2"]);
    assert_eq!(a, b);
    assert!(f.path("a/epoch-1.ckpt").is_file());
    let log = fs::read_to_string(f.path("a/loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,batch,h,u,t,total"));
    assert_eq!(log.lines().count(), 1 + 2 * 19);
    assert_eq!(log, fs::read_to_string(f.path("b/loss.csv")).unwrap());

    let model = |name: &str| -> Vec<String> {
        vec![
            "--checkpoint".into(),
            p(&f.path(&format!("{name}/epoch-2.ckpt"))).into(),
            "--vocab".into(),
            p(&f.path("vocab.tsv")).into(),
            "--embeddings".into(),
            p(&f.path("emb.txt")).into(),
        ]
    };
    let mut args: Vec<String> = vec!["aspects".into()];
    args.extend(model("a"));
    args.extend(["--topics", p(&f.path("data/topics.tsv")), "--out", p(&f.path("map.tsv"))].map(String::from));
    let listing = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let mapping = fs::read_to_string(f.path("map.tsv")).unwrap();
    assert_eq!(String::from_utf8(listing.stdout).unwrap(), mapping);
    assert_eq!(mapping.lines().count(), 4);

    for (run, out) in [("a", "pred_a.jsonl"), ("b", "pred_b.jsonl")] {
        let mut args: Vec<String> = vec!["predict".into()];
        args.extend(model(run));
        args.extend(
            [
                "--input",
                p(&f.path("data/corpus.txt")),
                "--out",
                p(&f.path(out)),
                "--mapping",
                p(&f.path("map.tsv")),
            ]
            .map(String::from),
        );
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let preds = fs::read(f.path("pred_a.jsonl")).unwrap();
    assert_eq!(preds, fs::read(f.path("pred_b.jsonl")).unwrap());
    let first: serde_json::Value = serde_json::from_str(std::str::from_utf8(&preds).unwrap().lines().next().unwrap()).unwrap();
    assert!(first["sentence"].is_string() && first["aspects"].is_array());
    assert_eq!(std::str::from_utf8(&preds).unwrap().lines().count(), 600);

    let eval = ok(&[
        "eval",
        "--predictions",
        p(&f.path("pred_a.jsonl")),
        "--gold",
        p(&f.path("data/gold.jsonl")),
        "--mapping",
        p(&f.path("map.tsv")),
        "--json",
        p(&f.path("report.json")),
    ]);
    let table = String::from_utf8(eval.stdout).unwrap();
    assert!(table.contains("Aspect extraction") && table.contains("micro-average"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("report.json")).unwrap()).unwrap();
    assert!(report["pair_micro"]["f1"].is_number());
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let f = Fixture::new();
    let cfg = f.path("run.cfg");
    fs::write(&cfg, "# training overrides\nlr = 0.01\ntlas = false\n").unwrap();
    let by_flag = f.train("flag", &["--lr", "0.01", "--no-tlas"]);
    let by_file = f.train("file", &["--config", p(&cfg)]);
    assert_eq!(by_flag, by_file);
    let flag_wins = f.train("both", &["--config", p(&cfg), "--lr", "0.02"]);
    let flag_only = f.train("only", &["--lr", "0.02", "--no-tlas"]);
    assert_eq!(flag_wins, flag_only);
    assert_ne!(flag_wins, by_file);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = cmam(&["embed", "--corpus", p(&missing), "--out-embeddings", "e", "--out-vocab", "v"]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour = red\n").unwrap();
    assert_eq!(cmam(&["gradcheck", "--config", p(&cfg)]).status.code(), Some(2));
    assert_eq!(cmam(&["gradcheck", "--bogus"]).status.code(), Some(2));
    assert_eq!(cmam(&["gradcheck", "--threads", "0"]).status.code(), Some(2));

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "the and of\n").unwrap();
    let out = cmam(&[
        "embed",
        "--corpus",
        p(&empty),
        "--out-embeddings",
        p(&dir.path().join("e")),
        "--out-vocab",
        p(&dir.path().join("v")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let garbled = dir.path().join("garbled.ckpt");
    fs::write(&garbled, b"not a checkpoint").unwrap();
    let f = Fixture::new();
    let out = cmam(&[
        "aspects",
        "--checkpoint",
        p(&garbled),
        "--vocab",
        p(&f.path("vocab.tsv")),
        "--embeddings",
        p(&f.path("emb.txt")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn checkpoint_vocabulary_must_match() {
    let f = Fixture::new();
    f.train("a", &[]);
    let other = f.path("other_vocab.tsv");
    let text = fs::read_to_string(f.path("vocab.tsv")).unwrap();
    let (head, rest) = text.split_once('\n').unwrap();
    let mut fields: Vec<&str> = head.split('\t').collect();
    let bumped = (fields[2].parse::<u64>().unwrap() + 1).to_string();
    fields[2] = &bumped;
    fs::write(&other, format!("{}\n{rest}", fields.join("\t"))).unwrap();
    let out = cmam(&[
        "aspects",
        "--checkpoint",
        p(&f.path("a/epoch-2.ckpt")),
        "--vocab",
        p(&other),
        "--embeddings",
        p(&f.path("emb.txt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_pass_and_fail() {
    let out = ok(&["gradcheck", "--instances", "5", "--seed", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS"));
    for term in ["H ", "U ", "T ", "L "] {
        assert!(text.lines().any(|l| l.starts_with(term)), "{term} missing in {text}");
    }
    let out = cmam(&["gradcheck", "--instances", "3", "--tolerance", "1e-300"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
}

#[test]
fn help_documents_defaults() {
    let train = String::from_utf8(ok(&["train", "--help"]).stdout).unwrap();
    for needle in ["0.0005", "default 64", "0.5", "0.3", "--no-tlas", "default 1,3,5"] {
        assert!(train.contains(needle), "train --help lacks {needle}");
    }
    let predict = String::from_utf8(ok(&["predict", "--help"]).stdout).unwrap();
    for needle in ["--q-as", "default 0.9", "default 2", "default 3"] {
        assert!(predict.contains(needle), "predict --help lacks {needle}");
    }
    let top = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    assert!(top.contains("ortho_offset") && top.contains("--threads"));
}
