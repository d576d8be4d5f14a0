use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn irene(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irene"))
        .args(args)
        .current_dir(cwd)
        .env("IRENE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = irene(args, cwd);
    assert!(
        out.status.success(),
        "irene {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file below `dir` with its bytes, sorted by relative path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

const TINY_SPEC: &str = r#"{"clips": 16, "clip_seconds": 4, "motif_windows": 2}"#;
const TINY_CONFIG: &str = r#"{
  "model": {"encoder": {"hidden": 8, "blocks": 1}, "graph": {"pooled_dim": 4, "critic_hidden": 8}},
  "train": {"max_epochs": 2, "finetune_max_epochs": 4, "train_batch": 8}
}"#;

fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("spec.json"), TINY_SPEC).unwrap();
    fs::write(dir.path().join("config.json"), TINY_CONFIG).unwrap();
    ok(
        &[
            "synth",
            "--spec",
            "spec.json",
            "--out",
            "data",
            "--seed",
            "3",
        ],
        dir.path(),
    );
    ok(
        &[
            "synth",
            "--spec",
            "spec.json",
            "--out",
            "test",
            "--seed",
            "4",
        ],
        dir.path(),
    );
    dir
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 7] = [
        ("synth", &["--spec", "--out", "--seed"]),
        (
            "pretrain",
            &[
                "--data",
                "--config",
                "--out",
                "--seed",
                "--epochs",
                "--log",
                "--no-adjacency",
            ],
        ),
        (
            "finetune",
            &[
                "--data",
                "--ckpt",
                "--out",
                "--seeds",
                "--seed",
                "--unfreeze",
                "--task",
                "--test",
                "--config",
                "--epochs",
            ],
        ),
        ("eval", &["--data", "--model", "--task", "--out"]),
        (
            "graphs",
            &["--data", "--model", "--method", "--config", "--out"],
        ),
        (
            "compare-graphs",
            &["--data", "--methods", "--model", "--config", "--out"],
        ),
        ("gradcheck", &["--scope", "--eps"]),
    ];
    let tmp = TempDir::new().unwrap();
    for (cmd, flags) in cases {
        let help = String::from_utf8(ok(&[cmd, "--help"], tmp.path()).stdout).unwrap();
        for f in flags {
            assert!(help.contains(f), "{cmd} --help is missing {f}");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(
        irene(&["pretrain", "--bogus"], tmp.path()).status.code(),
        Some(2)
    );
    assert_eq!(irene(&["frobnicate"], tmp.path()).status.code(), Some(2));
    assert_eq!(
        irene(&["gradcheck", "--scope", "everything"], tmp.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        irene(&["graphs", "--data", "x", "--out", "y"], tmp.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn data_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let out = irene(
        &["pretrain", "--data", "missing", "--out", "m.irnc"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    fs::write(tmp.path().join("junk.irnc"), b"not a checkpoint").unwrap();
    let out = irene(
        &[
            "eval",
            "--data",
            "missing",
            "--model",
            "junk.irnc",
            "--out",
            "e",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("spec.json"), TINY_SPEC).unwrap();
    for d in ["a", "b"] {
        ok(
            &["synth", "--spec", "spec.json", "--out", d, "--seed", "9"],
            tmp.path(),
        );
    }
    ok(
        &["synth", "--spec", "spec.json", "--out", "c", "--seed", "10"],
        tmp.path(),
    );
    let a = tree(&tmp.path().join("a"));
    assert!(a.iter().any(|(p, _)| p == Path::new("manifest.json")));
    assert_eq!(a, tree(&tmp.path().join("b")));
    assert_ne!(a, tree(&tmp.path().join("c")));
}

#[test]
fn gradcheck_passes_and_fails_on_threshold() {
    let tmp = TempDir::new().unwrap();
    let out = ok(&["gradcheck", "--scope", "loss"], tmp.path());
    let text = String::from_utf8(out.stdout).unwrap();
    for target in [
        "self_expressive",
        "infonce",
        "donsker_varadhan",
        "smoothness",
        "reconstruction",
        "pretrain_total",
    ] {
        assert!(text.contains(target), "missing {target} in\n{text}");
    }
    // a step this small drowns the differences in rounding error
    let out = irene(
        &["gradcheck", "--scope", "loss", "--eps", "1e-9"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn pipeline_runs_are_reproducible() {
    let ws = workspace();
    let w = ws.path();
    for run in ["r1", "r2"] {
        let pre = format!("{run}/pre.irnc");
        let out = ok(
            &[
                "pretrain",
                "--data",
                "data",
                "--config",
                "config.json",
                "--out",
                &pre,
                "--log",
                &format!("{run}/pre.jsonl"),
            ],
            w,
        );
        assert!(out.stdout.is_empty());
        ok(
            &[
                "finetune",
                "--data",
                "data",
                "--ckpt",
                &pre,
                "--out",
                &format!("{run}/ft"),
                "--seeds",
                "2",
                "--test",
                "test",
            ],
            w,
        );
        ok(
            &[
                "eval",
                "--data",
                "test",
                "--model",
                &format!("{run}/ft/seed_0/model.irnc"),
                "--out",
                &format!("{run}/eval"),
            ],
            w,
        );
        ok(
            &[
                "graphs",
                "--data",
                "test",
                "--model",
                &pre,
                "--out",
                &format!("{run}/graphs"),
            ],
            w,
        );
        ok(
            &[
                "compare-graphs",
                "--data",
                "test",
                "--model",
                &pre,
                "--methods",
                "ib,xcorr,distance",
                "--out",
                &format!("{run}/cmp.csv"),
            ],
            w,
        );
    }
    let r1 = tree(&w.join("r1"));
    assert_eq!(r1, tree(&w.join("r2")));

    let log = fs::read_to_string(w.join("r1/pre.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in [
            "epoch",
            "seed",
            "lr",
            "total",
            "self_expressive",
            "val_metric",
            "val_score",
        ] {
            assert!(v.get(key).is_some(), "log line lacks {key}");
        }
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.join("r1/ft/report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([0, 1]));
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 2);
    assert!(report["mean"]["auroc"].is_f64() && report["std"]["f1"].is_f64());
    assert!(w.join("r1/ft/seed_1/model.irnc").is_file());

    let confusion = fs::read_to_string(w.join("r1/eval/confusion.csv")).unwrap();
    assert!(confusion.starts_with("true\\pred,0,1\n"));
    let adjacency: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(w.join("r1/graphs/adjacency/clip_0000.json")).unwrap(),
    )
    .unwrap();
    let first = &adjacency[0];
    assert_eq!(first["t"], 0);
    assert_eq!(first["N"], 8);
    for e in first["entries"].as_array().unwrap() {
        let w = e[2].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&w) && e[0] != e[1]);
    }
    let cmp = fs::read_to_string(w.join("r1/cmp.csv")).unwrap();
    assert!(cmp.starts_with("method,mean_density,precision,recall\nib,"));
}

#[test]
fn constant_model_scores_chance_auroc() {
    let ws = workspace();
    let w = ws.path();
    let balanced =
        r#"{"clips": 16, "clip_seconds": 4, "motif_windows": 2, "seizure_fraction": 0.5}"#;
    fs::write(w.join("balanced.json"), balanced).unwrap();
    ok(
        &[
            "synth",
            "--spec",
            "balanced.json",
            "--out",
            "bal",
            "--seed",
            "5",
        ],
        w,
    );
    ok(
        &[
            "pretrain",
            "--data",
            "data",
            "--config",
            "config.json",
            "--out",
            "pre.irnc",
            "--epochs",
            "0",
        ],
        w,
    );
    // zero epochs keep the zero-initialized output layer: every clip gets p = 0.5
    ok(
        &[
            "finetune", "--data", "data", "--ckpt", "pre.irnc", "--out", "ft", "--epochs", "0",
        ],
        w,
    );
    ok(
        &[
            "eval",
            "--data",
            "bal",
            "--model",
            "ft/seed_0/model.irnc",
            "--task",
            "detect",
            "--out",
            "ev",
        ],
        w,
    );
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["mean"]["auroc"], 0.5);
    assert_eq!(m["mean"]["accuracy"], 0.5);
}

#[test]
fn eval_rejects_pretrained_checkpoint() {
    let ws = workspace();
    let w = ws.path();
    ok(
        &[
            "pretrain",
            "--data",
            "data",
            "--config",
            "config.json",
            "--out",
            "pre.irnc",
            "--epochs",
            "1",
        ],
        w,
    );
    let out = irene(
        &[
            "eval", "--data", "test", "--model", "pre.irnc", "--out", "ev",
        ],
        w,
    );
    assert_eq!(out.status.code(), Some(2));
}
