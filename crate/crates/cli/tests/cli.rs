use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proxysteer::align_train::{save_examples, FinalPointers, Split, TrainingExample};
use proxysteer::micro_lm::{model_vocabulary, MicroLM, MicroLmConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_proxysteer"));
    c.env_remove("PROXYSTEER_CONFIG").env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A tiny untrained model, a dataset over its words, and their paths.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let prefixes = "Please provide a truthful and accurate answer: fictional or untrue";
    let words: std::collections::BTreeSet<&str> = ["who", "is", "a", "b", "c", "d", "x", "y"]
        .into_iter()
        .chain(prefixes.split_whitespace())
        .collect();
    let vocab = model_vocabulary("toy", words).unwrap();
    let model = MicroLM::new(
        vocab,
        MicroLmConfig {
            d_model: 8,
            d_hidden: 8,
            seed: 3,
            init_range: 0.3,
        },
    )
    .unwrap();
    let model_path = dir.join("base.json");
    model.save(&model_path).unwrap();
    let data = vec![
        TrainingExample::new("q0", "who is a", "x", "y").with_split(Split::Train),
        TrainingExample::new("q1", "who is b", "y", "x").with_split(Split::Train),
        TrainingExample::new("q2", "who is c", "x", "y").with_split(Split::Train),
        TrainingExample::new("q3", "who is d", "y", "x").with_split(Split::Val),
    ];
    let data_path = dir.join("data.jsonl");
    save_examples(&data_path, &data).unwrap();
    (model_path, data_path)
}

fn train_args(run_dir: &str) -> Vec<&str> {
    vec![
        "--run-dir",
        run_dir,
        "train",
        "--data",
        "data.jsonl",
        "--base",
        "base.json",
        "--k",
        "3",
        "--seed",
        "7",
        "--epochs",
        "2",
        "--lr",
        "0.01",
        "--hdp-epochs",
        "2",
        "--batch-size",
        "2",
    ]
}

fn final_pointers(dir: &Path) -> FinalPointers {
    serde_json::from_slice(&std::fs::read(dir.join("final.json")).unwrap()).unwrap()
}

#[test]
fn train_twice_gives_identical_fap() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    ok(&run(tmp.path(), &train_args("r1")));
    ok(&run(tmp.path(), &train_args("r2")));
    let (a, b) = (
        final_pointers(&tmp.path().join("r1")),
        final_pointers(&tmp.path().join("r2")),
    );
    assert_eq!(a.fap_hash, b.fap_hash);
    assert_eq!(a.hdp_hash, b.hdp_hash);
    for f in [
        "config.toml",
        "train_config.json",
        "iterations/iteration_3.json",
        "checkpoints/hdp.json",
    ] {
        assert!(tmp.path().join("r1").join(f).exists(), "{f}");
    }

    // the snapshot alone reproduces the run
    let snap = tmp.path().join("r1/config.toml");
    let out = run(
        tmp.path(),
        &[
            "--config",
            snap.to_str().unwrap(),
            "--run-dir",
            "r3",
            "train",
        ],
    );
    ok(&out);
    assert_eq!(final_pointers(&tmp.path().join("r3")).fap_hash, a.fap_hash);
}

#[test]
fn flags_override_file_and_env_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    std::fs::write(
        tmp.path().join("cfg.toml"),
        "seed = 7\n[train]\ndata = \"data.jsonl\"\nbase = \"base.json\"\n[train.run.refine]\niterations = 1\n[train.run.refine.sgd]\nepochs = 1\n",
    )
    .unwrap();
    let out = bin()
        .current_dir(tmp.path())
        .env("PROXYSTEER_CONFIG", "cfg.toml")
        .args(["--run-dir", "r", "train", "--k", "2"])
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert!(stdout.contains("round 2"), "{stdout}");
    assert!(!stdout.contains("round 3"));
    let snap: toml::Value =
        toml::from_str(&std::fs::read_to_string(tmp.path().join("r/config.toml")).unwrap())
            .unwrap();
    assert_eq!(snap["seed"].as_integer(), Some(7));
    assert_eq!(
        snap["train"]["run"]["refine"]["iterations"].as_integer(),
        Some(2)
    );
    assert_eq!(
        snap["train"]["run"]["refine"]["sgd"]["epochs"].as_integer(),
        Some(1)
    );
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["decode", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));

    let out = run(tmp.path(), &["--run-dir", "r", "decode", "--prompt", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing --target"));

    std::fs::write(tmp.path().join("bad.toml"), "sede = 1\n").unwrap();
    let out = run(tmp.path(), &["--config", "bad.toml", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("config"));

    let out = run(
        tmp.path(),
        &[
            "--run-dir",
            "r",
            "train",
            "--data",
            "d",
            "--base",
            "b",
            "--ablation",
            "no_guidance,no_negative",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1_and_name_the_module() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &[
            "--run-dir",
            "r",
            "decode",
            "--prompt",
            "x",
            "--target",
            "lm:missing.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("error: providers:"),
        "{}",
        stderr(&out)
    );
    // the snapshot is written before the work starts
    assert!(tmp.path().join("r/config.toml").exists());
}

#[test]
fn same_proxy_twice_warns_and_matches_unsteered() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    let steered = bin()
        .current_dir(tmp.path())
        .env("RUST_LOG", "warn")
        .args([
            "--run-dir",
            "s",
            "decode",
            "--prompt",
            "who is a",
            "--target",
            "lm:base.json",
            "--fap",
            "lm:base.json",
            "--hdp",
            "lm:base.json",
            "--max-new-tokens",
            "6",
            "--trace-out",
            "trace.jsonl",
        ])
        .output()
        .unwrap();
    let text = ok(&steered);
    assert!(stderr(&steered).contains("steering is identically zero"));
    let plain = ok(&run(
        tmp.path(),
        &[
            "--run-dir",
            "u",
            "decode",
            "--prompt",
            "who is a",
            "--target",
            "lm:base.json",
            "--max-new-tokens",
            "6",
        ],
    ));
    assert_eq!(text, plain);

    let out = ok(&run(
        tmp.path(),
        &["inspect-trace", "trace.jsonl", "--replay", "--steps"],
    ));
    assert!(out.contains("replay   ok"), "{out}");
    assert!(out.contains("proxysteer.trace/1"));
}

#[test]
fn decode_then_eval_over_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    ok(&run(
        tmp.path(),
        &[
            "--run-dir",
            "d",
            "decode",
            "--data",
            "data.jsonl",
            "--target",
            "lm:base.json",
            "--max-new-tokens",
            "3",
            "--threads",
            "2",
        ],
    ));
    let preds = std::fs::read_to_string(tmp.path().join("d/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);
    assert!(preds.starts_with("{\"id\":\"q0\""));
    std::fs::write(
        tmp.path().join("specs.jsonl"),
        "{\"id\":\"q0\",\"gt_keywords\":[\"x\"],\"hal_keywords\":[\"y\"]}\n",
    )
    .unwrap();
    let table = ok(&run(
        tmp.path(),
        &[
            "--run-dir",
            "e",
            "eval",
            "--pred",
            "d/predictions.jsonl",
            "--data",
            "data.jsonl",
            "--specs",
            "specs.jsonl",
            "--label",
            "toy",
        ],
    ));
    assert!(table.starts_with("Run "), "{table}");
    assert!(table.contains("toy"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("e/report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregates"]["n"], 4);
    assert!(report["fcr_formula"].as_str().unwrap().starts_with("fcr/1"));
}

#[test]
fn augment_with_mock_client() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("src.jsonl"),
        "{\"id\":\"s0\",\"question\":\"When did the tower open?\",\"correct_answer\":\"It opened in 1889.\"}\n\
         {\"id\":\"s1\",\"question\":\"What is 2+2?\",\"correct_answer\":\"4\",\"hallucinated_answer\":\"5\"}\n",
    )
    .unwrap();
    std::fs::write(
        tmp.path().join("ext.txt"),
        "What do people use to cut paper?\n",
    )
    .unwrap();
    let out = ok(&run(
        tmp.path(),
        &[
            "--run-dir",
            "a",
            "--seed",
            "3",
            "augment",
            "--in",
            "src.jsonl",
            "--client",
            "mock",
            "--external",
            "ext.txt",
        ],
    ));
    assert!(
        out.contains("-> a/dataset.jsonl") || out.contains("dataset.jsonl"),
        "{out}"
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("a/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["client"], "mock");
    assert_eq!(manifest["seed"], 3);
    let n = std::fs::read_to_string(tmp.path().join("a/dataset.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(
        n as u64,
        manifest["train"].as_u64().unwrap() + manifest["val"].as_u64().unwrap()
    );
    assert!(tmp.path().join("a/config.toml").exists());

    let bad = run(
        tmp.path(),
        &[
            "--run-dir",
            "a",
            "augment",
            "--in",
            "src.jsonl",
            "--ops",
            "paraphrase,rewrite",
        ],
    );
    assert_eq!(bad.status.code(), Some(2));
}
