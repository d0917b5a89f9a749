//! Command-line entry points run in-process.

use memir_core::evaluation::load_dialogues;
use memir_core::encoders::load_corpus;
use memir_service::cli::run;

fn memir(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("memir").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, out) = memir(&["gen-synthetic", "--images", "40", "--rounds", "3", "--dim", "8", "--out", d]);
    assert_eq!(code, 0, "{out}");
    let corpus = load_corpus(dir.path().join("corpus.jsonl")).unwrap();
    let dialogues = load_dialogues(dir.path().join("dialogues.jsonl")).unwrap();
    assert_eq!((corpus.len(), corpus.dim()), (40, 8));
    assert!(dialogues.iter().all(|x| x.rounds.len() == 2));

    let c = format!("{d}/corpus.jsonl");
    let q = format!("{d}/dialogues.jsonl");
    let ck = format!("{d}/m.ckpt");
    let train = ["train", "--corpus", &c, "--dialogues", &q, "--out", &ck, "--epochs", "2", "--batch-size", "16"];
    let (code, out) = memir(&train);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let first = std::fs::read(&ck).unwrap();
    assert_eq!(memir(&train).0, 0);
    assert_eq!(std::fs::read(&ck).unwrap(), first);

    let (code, out) = memir(&["eval", "--checkpoint", &ck, "--corpus", &c, "--dialogues", &q, "--json"]);
    assert_eq!(code, 0, "{out}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["rounds"].as_array().unwrap().len(), 3);
    let (code, table) = memir(&["eval", "--checkpoint", &ck, "--corpus", &c, "--dialogues", &q, "--threads", "1"]);
    assert_eq!(code, 0);
    assert!(!table.is_empty());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(memir(&["no-such-command"]).0, 1);
    assert_eq!(memir(&["train"]).0, 1);
    assert_eq!(memir(&["--help"]).0, 0);
    assert_eq!(memir(&["gen-synthetic", "--out", d, "--images", "20", "--dim", "4"]).0, 0);
    let c = format!("{d}/corpus.jsonl");
    let q = format!("{d}/dialogues.jsonl");
    let missing = format!("{d}/missing.ckpt");
    assert_eq!(memir(&["eval", "--checkpoint", &missing, "--corpus", &c, "--dialogues", &q]).0, 2);
    std::fs::write(format!("{d}/bad.ckpt"), b"garbage").unwrap();
    let bad = format!("{d}/bad.ckpt");
    assert_eq!(memir(&["eval", "--checkpoint", &bad, "--corpus", &c, "--dialogues", &q]).0, 2);
    std::fs::write(format!("{d}/broken.jsonl"), "{\"id\": \n").unwrap();
    let broken = format!("{d}/broken.jsonl");
    let out = format!("{d}/x.ckpt");
    assert_eq!(memir(&["train", "--corpus", &broken, "--dialogues", &q, "--out", &out]).0, 2);
    assert_eq!(memir(&["cost", "--round-tokens", "0"]).0, 1);
    assert_eq!(memir(&["check-gradients", "--seeds", "0"]).0, 1);
}

#[test]
fn cost_reports_published_figures() {
    let (code, out) = memir(&["cost"]);
    assert_eq!(code, 0);
    assert!(out.contains("reduction 86.4%"), "{out}");
    let ratio: f64 = out
        .lines()
        .find(|l| l.contains("25 -> 122"))
        .and_then(|l| l.rsplit(' ').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(ratio >= 4.0);
    let (code, json) = memir(&["cost", "--json"]);
    assert_eq!(code, 0);
    serde_json::from_str::<serde_json::Value>(&json).unwrap();
}

#[test]
fn gradient_check_command() {
    let (code, out) = memir(&["check-gradients", "--seeds", "1", "--dim", "8"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.lines().any(|l| l.starts_with("full_pipeline") && l.ends_with("ok")), "{out}");
    assert_eq!(memir(&["check-gradients", "--seeds", "1", "--dim", "8", "--tol", "1e-30"]).0, 2);
}
