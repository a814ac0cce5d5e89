// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const TINY: &str = r#"
seed = 4

[corpus]
n_per_style = 12

[model]
n_layers = 2
hidden_dim = 16
n_heads = 2

[model.train]
steps = 20
learning_rate = 0.01
warmup_steps = 2

[judge]
epochs = 50

[experiments]
seeds_per_cell = 2
max_len = 30
single_alphas = [0.5]
alpha_max = 0.1
fusion_ratios = [0.1, 0.9]
fusion_pairs = 1
"#;

const PIPELINE: [&str; 8] = [
    "gen-corpus",
    "train",
    "localize",
    "build-vectors",
    "eval",
    "sweep-alpha",
    "sweep-fusion",
    "project",
];

fn stylesteer(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylesteer"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn error_json(o: &Output) -> Value {
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().unwrap();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

struct Fixture {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    outs: [PathBuf; 2],
    localize_stdout: String,
}

/// Runs the tiny pipeline twice into separate output roots.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let outs = [tmp.path().join("a"), tmp.path().join("b")];
        let mut localize_stdout = String::new();
        for out in &outs {
            for cmd in PIPELINE {
                let stdout = ok(stylesteer(&config, out, &[cmd]));
                if cmd == "localize" {
                    localize_stdout = stdout;
                }
            }
        }
        Fixture {
            _tmp: tmp,
            config,
            outs,
            localize_stdout,
        }
    })
}

fn run_dir(out: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    dirs.pop().unwrap()
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_outputs_are_byte_identical_across_runs() {
    let f = fixture();
    let (a, b) = (run_dir(&f.outs[0]), run_dir(&f.outs[1]));
    assert_eq!(a.file_name(), b.file_name());
    let names = files(&a);
    assert_eq!(names, files(&b));
    for required in ["corpus.jsonl", "checkpoint.json", "localization.json", "judge.json"] {
        assert!(names.contains(&PathBuf::from(required)), "{required}");
    }
    let reports: Vec<_> = names.iter().filter(|p| p.starts_with("reports")).collect();
    assert_eq!(reports.len(), 8, "{reports:?}");
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?}");
    }
}

#[test]
fn reports_have_expected_columns() {
    let f = fixture();
    let dir = run_dir(&f.outs[0]);
    let report = files(&dir)
        .into_iter()
        .find(|p| p.ends_with("sweep-alpha.csv"))
        .unwrap();
    let text = fs::read_to_string(dir.join(report)).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header,
        "trial_id,prompt_style,target_style,alpha,w1,seed,p_target,p_Alpha,p_Beta,p_Gamma,p_Delta,parse_valid,was_gated_count"
    );
    // 3 targets x 3 prompts x 3 alphas x 2 seeds.
    assert_eq!(text.lines().count(), 1 + 54);

    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.join(files(&dir).into_iter().find(|p| p.ends_with("sweep-alpha.json")).unwrap())).unwrap())
            .unwrap();
    assert_eq!(summary["reference"]["label"], "published reference (not reproduced)");
    assert_eq!(summary["summary"].as_array().unwrap().len(), 3);
}

#[test]
fn zero_alpha_steer_equals_no_steering() {
    let f = fixture();
    for prompt in ["Alpha", "Gamma"] {
        let zero = ok(stylesteer(
            &f.config,
            &f.outs[0],
            &["steer", "--prompt-style", prompt, "--target", "Beta", "--alpha", "0", "--sample-seed", "9"],
        ));
        let plain = ok(stylesteer(
            &f.config,
            &f.outs[0],
            &["steer", "--prompt-style", prompt, "--no-steering", "--sample-seed", "9"],
        ));
        assert_eq!(zero, plain);
        assert!(!zero.trim().is_empty());
    }
}

#[test]
fn steer_json_carries_probabilities() {
    let f = fixture();
    let out = ok(stylesteer(
        &f.config,
        &f.outs[0],
        &["steer", "--weights", "Alpha=0.7,Beta=0.3", "--alpha", "0.5", "--json"],
    ));
    let v: Value = serde_json::from_str(&out).unwrap();
    let probs = v["result"]["probabilities"].as_object().unwrap();
    assert!(probs.contains_key("Alpha") && probs.contains_key("Beta"));
    assert_eq!(v["request"]["targets"][0][0], "Alpha");
}

#[test]
fn localize_stdout_matches_stored_report() {
    let f = fixture();
    let stored = fs::read_to_string(run_dir(&f.outs[1]).join("localization.json")).unwrap();
    assert_eq!(f.localize_stdout, stored);
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let e = error_json(&stylesteer(&f.config, tmp.path(), &["train"]));
    assert_eq!(e["error"]["kind"], "MissingArtifact");
    assert!(e["error"]["message"].as_str().unwrap().contains("gen-corpus"));

    let e = error_json(&stylesteer(&f.config, &f.outs[0], &["steer", "--target", "Zeta"]));
    assert_eq!(e["error"]["kind"], "UnknownStyle");

    let e = error_json(&stylesteer(&f.config, &f.outs[0], &["steer", "--weights", "Alpha=NaN"]));
    assert_eq!(e["error"]["kind"], "NonFinite");

    let e = error_json(&stylesteer(&f.config, &f.outs[0], &["steer", "--alpha", "0.5"]));
    assert_eq!(e["error"]["kind"], "Usage");

    let e = error_json(&stylesteer(&f.config, &f.outs[0], &["localize", "--bogus"]));
    assert_eq!(e["error"]["kind"], "Usage");

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[model]\nlayers = 3\n").unwrap();
    let e = error_json(&stylesteer(&bad, tmp.path(), &["gen-corpus"]));
    assert_eq!(e["error"]["kind"], "InvalidConfig");
}

#[test]
fn help_documents_flags_for_every_subcommand() {
    let expect: [(&str, &[&str]); 10] = [
        ("gen-corpus", &["--config", "--seed", "--out"]),
        ("train", &["--seed"]),
        ("localize", &["--out"]),
        ("build-vectors", &["--layer", "--centered"]),
        (
            "steer",
            &["--target", "--weights", "--alpha", "--no-steering", "--no-format-gate", "--no-norm-preserve", "--temperature", "--layer"],
        ),
        ("sweep-alpha", &["--target", "--temperature"]),
        ("sweep-fusion", &["--pair", "--alpha"]),
        ("eval", &["--alpha", "--no-format-gate"]),
        ("project", &["--layer"]),
        ("serve", &["--addr"]),
    ];
    for (cmd, flags) in expect {
        let o = Command::new(env!("CARGO_BIN_EXE_stylesteer"))
            .args([cmd, "--help"])
            .output()
            .unwrap();
        let text = ok(o);
        for flag in flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}
