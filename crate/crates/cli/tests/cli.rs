//! End-to-end runs of the `tus` binary on tiny settings.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const TINY_TRAIN: &str = r#"{
  "net": {"d_model": 16, "n_layers": 1, "n_heads": 2, "ff_dim": 32, "dropout": 0.0,
          "slot_classes": 6, "domain_head_dim": 6, "learning_rate": 0.003,
          "domain_loss": true, "seed": 0},
  "window": 3, "epochs": 2, "batch_size": 16, "l_d": 6, "l_s": 10,
  "index_features": true, "patience": null
}"#;

fn tus(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tus"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = tus(dir, args);
    assert!(
        out.status.success(),
        "tus {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small corpus plus a two-epoch TUS checkpoint.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    ok(
        dir,
        &[
            "gen-corpus",
            "--seed",
            "1",
            "--n-dialogues",
            "60",
            "--run-dir",
            "corpus",
        ],
    );
    std::fs::write(dir.join("tiny.json"), TINY_TRAIN).unwrap();
    ok(
        dir,
        &[
            "train-us",
            "--seed",
            "2",
            "--corpus",
            "corpus/corpus.jsonl",
            "--train-config",
            "tiny.json",
            "--run-dir",
            "us",
        ],
    );
    (dir.join("corpus/corpus.jsonl"), dir.join("us/tus.ckpt"))
}

/// Every file of a run directory except the timestamped log.
fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "log.jsonl" {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_corpus_twice_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for name in ["a", "b"] {
        ok(
            dir,
            &[
                "gen-corpus",
                "--seed",
                "1",
                "--n-dialogues",
                "40",
                "--run-dir",
                name,
            ],
        );
    }
    let a = artifacts(&dir.join("a"));
    assert_eq!(a, artifacts(&dir.join("b")));
    let names: Vec<_> = a
        .iter()
        .map(|(p, _)| p.to_string_lossy().into_owned())
        .collect();
    for expected in [
        "corpus.jsonl",
        "corpus.stats.json",
        "config.json",
        "split/train.json",
    ] {
        assert!(
            names.iter().any(|n| n == expected),
            "missing {expected} in {names:?}"
        );
    }
    let stats = read_json(dir.join("a/corpus.stats.json"));
    assert_eq!(stats["schema"], "report/1");
    assert_eq!(stats["body"]["n_dialogues"], 40);

    ok(
        dir,
        &[
            "gen-corpus",
            "--seed",
            "2",
            "--n-dialogues",
            "40",
            "--run-dir",
            "c",
        ],
    );
    assert_ne!(
        std::fs::read(dir.join("a/corpus.jsonl")).unwrap(),
        std::fs::read(dir.join("c/corpus.jsonl")).unwrap()
    );
}

#[test]
fn saved_configs_replay_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    ok(
        dir,
        &["run", "--config", "us/config.json", "--run-dir", "us-again"],
    );
    assert_eq!(artifacts(&dir.join("us")), artifacts(&dir.join("us-again")));

    let policy = [
        "train-policy",
        "--seed",
        "4",
        "--policy-epochs",
        "2",
        "--dialogues-per-epoch",
        "20",
        "--n-eval",
        "20",
        "--run-dir",
        "tp",
    ];
    ok(dir, &policy);
    ok(
        dir,
        &[
            "--jobs",
            "1",
            "run",
            "--config",
            "tp/config.json",
            "--run-dir",
            "tp-again",
        ],
    );
    assert_eq!(artifacts(&dir.join("tp")), artifacts(&dir.join("tp-again")));
    let report = read_json(dir.join("tp/report.json"));
    assert_eq!(report["kind"], "train-policy");
    assert_eq!(report["body"]["curve"].as_array().unwrap().len(), 2);
}

#[test]
fn run_directories_are_timestamped_and_self_describing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = ok(dir, &["make-db", "--seed", "3", "--out", "runs"]);
    let run = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(run.starts_with(dir.join("runs")));
    assert!(run
        .file_name()
        .unwrap()
        .to_string_lossy()
        .starts_with("make-db-"));
    let config = read_json(run.join("config.json"));
    assert_eq!(config["seed"], 3);
    assert_eq!(config["command"]["make-db"]["entities_per_domain"], 20);
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    let events: Vec<Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events.first().unwrap()["event"], "start");
    assert_eq!(events.last().unwrap()["event"], "done");
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    assert_eq!(code(&tus(dir, &["gen-corpus", "--n-dialogues", "5"])), 2);
    assert_eq!(code(&tus(dir, &["no-such-command"])), 2);

    std::fs::write(
        dir.join("bad.json"),
        r#"{"schema": "runconfig/1", "colour": "red"}"#,
    )
    .unwrap();
    let out = tus(dir, &["run", "--config", "bad.json"]);
    assert_eq!(code(&out), 3);
    let err: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"]["kind"], "config");

    assert_eq!(
        code(&tus(
            dir,
            &["train-us", "--seed", "1", "--corpus", "nope.jsonl"]
        )),
        4
    );

    // A checkpoint trained on the toy ontology does not load under another.
    let (corpus, ckpt) = fixture(dir);
    ok(dir, &["make-ontology", "--run-dir", "onto"]);
    let mut onto = read_json(dir.join("onto/ontology.json"));
    onto["domains"][0]["slots"][0]["name"] = "district".into();
    std::fs::write(dir.join("other.json"), onto.to_string()).unwrap();
    let out = tus(
        dir,
        &[
            "eval-us-corpus",
            "--ontology",
            "other.json",
            "--corpus",
            corpus.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));

    // An entropy floor above the maximum possible entropy aborts at once.
    let mut schedule: Value =
        serde_json::to_value(tus_core::experiments::PolicySchedule::default()).unwrap();
    schedule["ppo"]["entropy_floor"] = 100.0.into();
    schedule["ppo"]["dialogues_per_epoch"] = 5.into();
    std::fs::write(dir.join("collapse.json"), schedule.to_string()).unwrap();
    let out = tus(
        dir,
        &[
            "train-policy",
            "--seed",
            "1",
            "--policy-config",
            "collapse.json",
        ],
    );
    assert_eq!(code(&out), 6, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn chat_reads_the_act_grammar_from_stdin() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (_, ckpt) = fixture(dir);
    let mut child = Command::new(env!("CARGO_BIN_EXE_tus"))
        .current_dir(dir)
        .args([
            "chat",
            "--seed",
            "1",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--run-dir",
            "chat",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"recommend lodging area=north\ngeneral.reqmore\n\nnot an act at all\nrequest lodging stars\n\nquit\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("user goal:"));
    assert!(stdout.contains("could not parse \"not an act at all\""));
    assert!(stdout.matches("user: ").count() >= 2);

    let transcript = std::fs::read_to_string(dir.join("chat/transcript.jsonl")).unwrap();
    let turns: Vec<Value> = transcript
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(turns.len(), 3);
    assert_eq!(turns[0]["system"], serde_json::json!([]));
    assert_eq!(
        turns[1]["system"],
        serde_json::json!([
            {"intent": "recommend", "domain": "lodging", "slot": "area", "value": "north"},
            {"intent": "reqmore", "domain": "general"}
        ])
    );
    assert_eq!(turns[2]["system"][0]["value"], "?");
}

#[test]
fn experiment_commands_write_reports_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (corpus, ckpt) = fixture(dir);
    let corpus = corpus.to_str().unwrap();
    let tus_spec = format!("tus:{}", ckpt.display());

    ok(
        dir,
        &[
            "ablation",
            "--seed",
            "1",
            "--corpus",
            corpus,
            "--train-config",
            "tiny.json",
            "--us-epochs",
            "1",
            "--run-dir",
            "abl",
        ],
    );
    let abl = read_json(dir.join("abl/report.json"));
    let names: Vec<&str> = abl["body"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["basic", "+index", "+domain-loss"]);
    for ckpt in ["basic.ckpt", "index.ckpt", "domain-loss.ckpt"] {
        assert!(dir.join("abl").join(ckpt).is_file(), "{ckpt}");
    }
    assert_eq!(
        std::fs::read_to_string(dir.join("abl/ablation.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    ok(
        dir,
        &[
            "cross-eval",
            "--seed",
            "5",
            "--simulator",
            "abus",
            "--simulator",
            &tus_spec,
            "--policy-epochs",
            "1",
            "--dialogues-per-epoch",
            "10",
            "--n-eval",
            "10",
            "--n-seeds",
            "2",
            "--run-dir",
            "ce",
        ],
    );
    let matrix = read_json(dir.join("ce/matrix.json"));
    for train in ["abus", "tus"] {
        for eval in ["abus", "tus"] {
            let s = matrix[train][eval].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
    }
    let report = read_json(dir.join("ce/report.json"));
    assert_eq!(
        report["body"]["cells"][0]["seeds"],
        serde_json::json!([5, 6])
    );

    ok(
        dir,
        &[
            "simulate",
            "--seed",
            "3",
            "--user",
            &tus_spec,
            "--n-dialogues",
            "5",
            "--max-turns",
            "6",
            "--run-dir",
            "sim",
        ],
    );
    assert_eq!(
        read_json(dir.join("sim/report.json"))["body"]["stats"]["n"],
        5
    );

    ok(
        dir,
        &[
            "dump-features",
            "--corpus",
            corpus,
            "--dialogue",
            "dlg-000003",
            "--run-dir",
            "df",
        ],
    );
    let dump = read_json(dir.join("df/features.json"));
    assert_eq!(dump["width"], 66);
    let turn0 = &dump["turns"][0];
    assert_eq!(turn0["features"][0].as_array().unwrap().len(), 66);
    assert_eq!(
        turn0["slots"].as_array().unwrap().len(),
        turn0["targets"].as_array().unwrap().len()
    );
    assert_eq!(
        code(&tus(
            dir,
            &["dump-features", "--corpus", corpus, "--dialogue", "missing"]
        )),
        4
    );

    ok(
        dir,
        &[
            "plot-curves",
            "abl/report.json",
            "ce/report.json",
            "us/report.json",
            "--run-dir",
            "plots",
        ],
    );
    for name in ["0-ablation.svg", "1-cross-eval.svg", "2-train-us.svg"] {
        let svg = std::fs::read_to_string(dir.join("plots").join(name)).unwrap();
        assert!(svg.starts_with("<svg"), "{name}");
    }
    assert_eq!(code(&tus(dir, &["plot-curves", "sim/report.json"])), 3);
}
