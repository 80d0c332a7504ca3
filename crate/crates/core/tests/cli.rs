use std::fs;
use std::path::Path;
use std::process::Command;

use clap::Parser;
use noise2map::cli::{run, Cli};
use noise2map::evaluation::{read_report, RankEntry};
use noise2map::training::LogRecord;
use tempfile::tempdir;

fn cli(args: &[&str]) -> noise2map::Result<std::path::PathBuf> {
    let mut argv = vec!["noise2map"];
    argv.extend_from_slice(args);
    run(&Cli::try_parse_from(argv).unwrap())
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).display().to_string()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let d = tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        cli(&["--seed", "1", "--out", out.to_str().unwrap(), "synth", "--n", "32", "--size", "64"]).unwrap();
    }
    let ta = tree(&a);
    assert_eq!(ta.len(), 2 * 32 + 3 + 1);
    assert_eq!(ta, tree(&b));
}

const TINY: &str = r#"
[model]
stage_channels = [8, 16]
num_resolutions = 2
time_embed_dim = 16
[train]
epochs = 2
batch_size = 2
[pretrain]
epochs = 1
batch_size = 2
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, format!("{extra}\n{TINY}")).unwrap();
    p.display().to_string()
}

#[test]
fn pretrain_train_eval_sweep_pipeline() {
    let d = tempdir().unwrap();
    let data = d.path().join("data");
    let out = d.path().join("runs");
    let o = out.to_str().unwrap();
    cli(&["--out", data.to_str().unwrap(), "synth", "--n", "4", "--n-val", "2", "--size", "16"]).unwrap();
    let config = write_config(d.path(), &format!("[data]\nss_root = {:?}", data.display().to_string()));

    let pre = cli(&["--out", o, "pretrain", "--config", &config]).unwrap();
    assert!(pre.exists());
    let ckpt = cli(&["--out", o, "train", "--config", &config, "--task", "ss", "--from-checkpoint", pre.to_str().unwrap()]).unwrap();
    assert_eq!(ckpt, out.join("ss").join("best.ckpt"));
    assert!(ckpt.exists() && out.join("ss").join("last.ckpt").exists());
    let log = fs::read_to_string(out.join("ss").join("train.log")).unwrap();
    let records: Vec<LogRecord> = log.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(records.len(), 2);

    let report_path = cli(&["--out", o, "--seed", "5", "eval", "--config", &config, "--checkpoint", ckpt.to_str().unwrap()]).unwrap();
    let report = read_report(&report_path).unwrap();
    assert_eq!((report.task.as_str(), report.seed, report.timestep), ("ss", 5, 1000));
    assert_eq!(report.per_class.len(), 2);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in ["task", "dataset", "per_class", "mean_f1", "mean_iou", "param_count", "schedule", "seed"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }

    let export = d.path().join("sweep");
    cli(&[
        "--out", o, "sweep", "--config", &config, "--checkpoint", ckpt.to_str().unwrap(), "--timesteps", "0,500,1000", "--export-dir",
        export.to_str().unwrap(),
    ])
    .unwrap();
    assert_eq!(fs::read_dir(&export).unwrap().count(), 2 * 4 + 1);
}

#[test]
fn multitask_training_needs_both_roots() {
    let d = tempdir().unwrap();
    let data = d.path().join("ss");
    cli(&["--out", data.to_str().unwrap(), "synth", "--n", "2", "--size", "16"]).unwrap();
    let config = write_config(d.path(), &format!("[data]\nss_root = {:?}", data.display().to_string()));
    let err = cli(&["--out", d.path().to_str().unwrap(), "train", "--config", &config, "--task", "mt"]).unwrap_err();
    assert_eq!(err.category(), "config");
    assert!(err.to_string().contains("data.cd_root"));
}

#[test]
fn rank_prints_and_writes_json() {
    let d = tempdir().unwrap();
    let path = cli(&["--out", d.path().to_str().unwrap(), "rank", &fixture("table1_ss.csv")]).unwrap();
    let entries: Vec<RankEntry> = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(entries[0].model, "Noise2Map");
    assert_eq!(entries[1].model, "UNet++");
    assert_eq!(entries[7].model, "DPT");
}

fn binary(args: &[&str], seed_env: Option<&str>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_noise2map"));
    cmd.args(args).env_remove("NOISE2MAP_SEED");
    if let Some(s) = seed_env {
        cmd.env("NOISE2MAP_SEED", s);
    }
    cmd.output().unwrap()
}

#[test]
fn binary_reports_failures_with_a_category() {
    let d = tempdir().unwrap();
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "bogus = 1\n[train]\nlearning_rate = 1\n[model]\nwidth = 3\n").unwrap();
    let out = binary(&["train", "--config", bad.to_str().unwrap()], None);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    assert!(line.starts_with("error[config]"), "{stderr}");
    for key in ["bogus", "train.learning_rate", "model.width"] {
        assert!(line.contains(key), "{line}");
    }

    let out = binary(&["rank", d.path().join("missing.csv").to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("error[io]"));
}

#[test]
fn seed_comes_from_the_environment_unless_given() {
    let d = tempdir().unwrap();
    let run_synth = |name: &str, flag: Option<&str>, env: Option<&str>| {
        let out = d.path().join(name);
        let mut args = vec!["--out", out.to_str().unwrap()];
        if let Some(s) = flag {
            args.extend(["--seed", s]);
        }
        args.extend(["synth", "--n", "2", "--size", "16"]);
        assert!(binary(&args, env).status.success());
        tree(&out)
    };
    let env3 = run_synth("env3", None, Some("3"));
    assert_eq!(env3, run_synth("flag3", Some("3"), None));
    assert_eq!(run_synth("flag0", Some("0"), Some("3")), run_synth("default", None, None));
    assert_ne!(env3, run_synth("default2", None, None));
}

#[test]
fn help_lists_defaults() {
    let out = binary(&["synth", "--help"], None);
    let help = String::from_utf8(out.stdout).unwrap();
    for flag in ["--n <N>", "--size <SIZE>", "--task <TASK>", "--seed <SEED>"] {
        assert!(help.contains(flag), "{help}");
    }
    assert!(help.contains("[default: 64]") && help.contains("[default: 32]"));
}
