mod common;

use std::path::Path;
use std::process::{Command, Output};

use dialogeval::text::build_vocabulary;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dialogeval"));
    c.env_remove(dialogeval::pipeline::CHECKPOINT_ENV)
        .env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn toml_path(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn zero_evaluator(root: &Path) {
    let dialogs = dialogeval::toy::toy_corpus(20, 1);
    let mut ev = common::evaluator(build_vocabulary(&dialogs, 100).unwrap(), 6, 6, 2);
    ev.zero_output_layers();
    ev.save(&root.join("evaluator")).unwrap();
}

#[test]
fn score_turn_prints_half_for_zeroed_heads() {
    let dir = tempfile::tempdir().unwrap();
    zero_evaluator(dir.path());
    let context =
        r#"{"context": [{"user": "hello", "system": "hi there"}], "user": "do you like music ?"}"#;
    let out = run(bin()
        .arg("score-turn")
        .arg("--checkpoints")
        .arg(dir.path())
        .args(["--context", context, "--response", "yes i love jazz ."]));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let obj = json.as_object().unwrap();
    assert_eq!(obj.len(), 4);
    for v in obj.values() {
        assert_eq!(v.as_f64().unwrap(), 0.5);
    }

    let file = dir.path().join("ctx.json");
    std::fs::write(&file, context).unwrap();
    let again = run(bin()
        .arg("score-turn")
        .env(dialogeval::pipeline::CHECKPOINT_ENV, dir.path())
        .arg("--context")
        .arg(&file)
        .args(["--response", "yes i love jazz ."]));
    assert_eq!(again.stdout, out.stdout);

    let bad = bin()
        .arg("score-turn")
        .arg("--checkpoints")
        .arg(dir.path())
        .args(["--context", "{\"user\": ", "--response", "x"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("context"));
}

#[test]
fn missing_checkpoint_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("score-turn")
        .arg("--checkpoints")
        .arg(dir.path())
        .args(["--context", r#"{"user": "hi"}"#, "--response", "hello"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-evaluator"), "{err}");
}

#[test]
fn metrics_subcommand_reports_each_hypothesis_file() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("ref.txt");
    let same = dir.path().join("copy.txt");
    let other = dir.path().join("other.txt");
    std::fs::write(&r, "i like jazz music a lot\nthe weather is nice today\n").unwrap();
    std::fs::write(
        &same,
        "i like jazz music a lot\nthe weather is nice today\n",
    )
    .unwrap();
    std::fs::write(&other, "no\nmaybe later\n").unwrap();
    let out = run(bin()
        .arg("metrics")
        .arg("--ref")
        .arg(&r)
        .arg("--hyp")
        .arg(&same)
        .arg("--hyp")
        .arg(&other));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["System"], "copy");
    assert_eq!(rows[0]["BLEU-4"].as_f64().unwrap(), 100.0);
    assert_eq!(rows[1]["BLEU-4"].as_f64().unwrap(), 0.0);

    std::fs::write(&other, "just one line\n").unwrap();
    let bad = bin()
        .arg("metrics")
        .arg("--ref")
        .arg(&r)
        .arg("--hyp")
        .arg(&other)
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn toy_corpus_subcommand_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    run(bin().arg("toy-corpus").arg("--out").arg(dir.path()).args([
        "--dialogs",
        "30",
        "--seed",
        "4",
    ]));
    let loaded = dialogeval::corpus::load_corpus(
        dir.path().join("corpus.jsonl"),
        dialogeval::corpus::SCHEMA_VERSION,
    )
    .unwrap();
    assert_eq!(loaded, dialogeval::toy::toy_corpus(30, 4));
    assert!(
        std::fs::read_to_string(dir.path().join("gazetteer.txt"))
            .unwrap()
            .lines()
            .count()
            > 0
    );
}

#[test]
fn staged_run_generates_and_reports_two_variants() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    let reports = dir.path().join("reports");
    let config = common::toy_config_path();
    let sets = [
        format!("paths.reports={}", toml_path(&reports)),
        "encoder_epochs=1".into(),
        "beam_width=3".into(),
        "evaluator.max_epochs=2".into(),
        "generator.max_epochs=2".into(),
        "reranker.epochs=2".into(),
    ];
    let stage = |name: &str| {
        let mut c = bin();
        c.arg(name)
            .arg("--config")
            .arg(&config)
            .arg("--checkpoints")
            .arg(&ck);
        for s in &sets {
            c.arg("--set").arg(s);
        }
        c.args(["--variant", "s2s", "--variant", "s2s_rr"]);
        c
    };

    let early = stage("generate").output().unwrap();
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("run stage"));

    for s in [
        "prepare-data",
        "train-encoder",
        "train-evaluator",
        "train-generator",
        "mine-beams",
        "train-reranker",
        "generate",
    ] {
        run(&mut stage(s));
    }
    let recorded = std::fs::read_to_string(ck.join("pipeline.toml")).unwrap();
    assert!(recorded.contains("beam_width = 3"));

    let out = run(&mut stage("evaluate"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("S2S_RR"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reports.join("generation.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        for key in ["BLEU-4", "ROUGE-2", "Distinct-2"] {
            assert!(row[key].as_f64().unwrap().is_finite());
        }
    }

    let corpus = dir.path().join("two.jsonl");
    let dialogs = dialogeval::toy::toy_corpus(2, 9);
    dialogeval::corpus::save_corpus(&corpus, &dialogs).unwrap();
    let decoded = run(bin()
        .arg("decode")
        .arg("--generator")
        .arg(ck.join("generator"))
        .arg("--input")
        .arg(&corpus)
        .args(["--nbest", "3"]));
    let lines: Vec<&str> = std::str::from_utf8(&decoded.stdout)
        .unwrap()
        .lines()
        .collect();
    assert_eq!(
        lines.len(),
        dialogs.iter().map(|d| d.turns.len()).sum::<usize>()
    );
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert!(first["candidates"].as_array().unwrap().len() <= 3);
}

#[test]
fn unknown_override_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("prepare-data")
        .arg("--config")
        .arg(common::toy_config_path())
        .arg("--checkpoints")
        .arg(dir.path())
        .args(["--set", "generator.no_such_knob=3"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn encoder_can_pretrain_on_an_external_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let external = dir.path().join("chat.jsonl");
    let mut dialogs = dialogeval::toy::toy_corpus(12, 77);
    for d in &mut dialogs {
        d.annotations = None;
    }
    dialogeval::corpus::save_corpus(&external, &dialogs).unwrap();
    let stage = |name: &str| {
        let mut c = bin();
        c.arg(name)
            .arg("--config")
            .arg(common::toy_config_path())
            .arg("--checkpoints")
            .arg(dir.path().join("ck"))
            .args(["--set", "encoder_epochs=1"])
            .arg("--set")
            .arg(format!("paths.encoder_corpus={}", toml_path(&external)));
        c
    };
    run(&mut stage("prepare-data"));
    let out = run(&mut stage("train-encoder"));
    let log: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(log["inputs"]["encoder_corpus"].is_string(), "{log}");
}
