//! End-to-end runs of the `physdiff` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
m = 3
n = 2

[synth]
n_tracks = 12
min_len = 10
max_len = 12
channels = 2
grid = 8

[model]
d_model = 12
d_embedding = 4
d_env = 6
heads = 2
k_enc = 1
k_dec = 1
latent_hidden = 8
gru_hidden = 8
env_channels = 2
env_grid = 8

[diffusion]
steps = 10

[train]
epochs = 1
batch_size = 4
max_steps = 3
lr = 0.001

[eval]
members = 2
max_windows = 6
"#;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physdiff")).args(args).current_dir(cwd).env("PHYSDIFF_THREADS", "1").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

/// Runs `train` and returns the run directory it printed.
fn train(cwd: &Path, cfg: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", "runs"];
    args.extend_from_slice(extra);
    let o = bin(&args, cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    cwd.join(stdout(&o).lines().last().unwrap().trim())
}

#[test]
fn synth_data_is_deterministic() {
    let (dir, _) = setup();
    for out in ["a", "b"] {
        let o = bin(&["synth-data", "--seed", "7", "--tracks", "5", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["manifest.toml", "tracks.csv", "env.pdef"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let manifest = std::fs::read_to_string(dir.path().join("a/manifest.toml")).unwrap();
    assert!(manifest.contains("n_tracks = 5"), "{manifest}");
}

#[test]
fn grad_check_passes_and_fails_with_exit_codes() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    let ok = bin(&["grad-check", "--config", c, "--samples", "60"], dir.path());
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("max_rel_err="), "{}", stdout(&ok));
    let fail = bin(&["grad-check", "--config", c, "--samples", "20", "--tol", "0"], dir.path());
    assert_eq!(fail.status.code(), Some(1));
    let err = stderr(&fail);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=grad-check code=1 msg="), "{err}");
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let (dir, cfg) = setup();
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["train", "--ablate", "no-fengwu"],
        vec!["train", "--config", bad_cfg.to_str().unwrap()],
        vec!["train", "--config", cfg.to_str().unwrap(), "--set", "model.d_model=13"],
        vec!["forecast", "--config", cfg.to_str().unwrap()],
    ] {
        let o = bin(&args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error kind="), "{err}");
    }
    let missing = bin(&["evaluate", "--checkpoint", "nope.pdck"], dir.path());
    assert_eq!(missing.status.code(), Some(1), "{}", stderr(&missing));
}

#[test]
fn help_lists_every_flag_with_units() {
    let (dir, _) = setup();
    let o = bin(&["train", "--help"], dir.path());
    assert!(o.status.success());
    let help = stdout(&o);
    for flag in ["--config <PATH>", "--seed <U64>", "--out <DIR>", "--ablate <VARIANT>", "--members <N>", "--leads <N>", "--data <PATH>"] {
        assert!(help.contains(flag), "missing {flag}");
    }
    assert!(help.contains("6-hour steps"));
    let o = bin(&["grad-check", "--help"], dir.path());
    assert!(stdout(&o).contains("--samples <N>"));
}

#[test]
fn train_then_evaluate_propagates_the_ablation_tag() {
    let (dir, cfg) = setup();
    let run = train(dir.path(), &cfg, &["--ablate", "no-piga"]);
    for sub in ["config/run.toml", "checkpoints/last.pdck", "checkpoints/best.pdck", "metrics/train.jsonl", "forecasts"] {
        assert!(run.join(sub).exists(), "{sub}");
    }
    let log = std::fs::read_to_string(run.join("metrics/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().all(|l| l.contains("\"grad_norm\"")));

    let o = bin(&["evaluate", "--run", run.to_str().unwrap(), "--per-sample"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().nth(1).unwrap().starts_with("no-piga"), "{text}");
    let json = std::fs::read_to_string(run.join("metrics/metrics-no-piga.json")).unwrap();
    let table: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(table["tag"], "no-piga");
    assert!(table["rows"].as_array().unwrap().iter().all(|r| r["tag"] == "no-piga" && r["count"] == 6));
    assert!(run.join("metrics/errors-no-piga.csv").exists());

    // the checkpoint refuses to load into a full-model config
    let full = bin(&["evaluate", "--run", run.to_str().unwrap(), "--ablate", "none"], dir.path());
    assert_eq!(full.status.code(), Some(1));
    assert!(stderr(&full).contains("kind=checkpoint"), "{}", stderr(&full));

    // no PIGA streams to export
    let fx = bin(&["export-features", "--run", run.to_str().unwrap()], dir.path());
    assert_eq!(fx.status.code(), Some(2));
}

#[test]
fn runs_are_bitwise_reproducible() {
    let (dir, cfg) = setup();
    let a = train(dir.path(), &cfg, &["--seed", "11"]);
    let b = train(dir.path(), &cfg, &["--seed", "11"]);
    assert_ne!(a, b);
    for f in ["checkpoints/last.pdck", "checkpoints/best.pdck", "metrics/train.jsonl", "config/run.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    for run in [&a, &b] {
        let o = bin(&["forecast", "--run", run.to_str().unwrap(), "--write-members"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let o = bin(&["evaluate", "--run", run.to_str().unwrap()], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["forecasts/forecast-none.csv", "forecasts/members-none.csv", "metrics/metrics-none.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    // a forecast CSV scores the same as sampling from the checkpoint
    let fc = a.join("forecasts/forecast-none.csv");
    let out = dir.path().join("scored");
    let o = bin(
        &["evaluate", "--config", a.join("config/run.toml").to_str().unwrap(), "--forecasts", fc.to_str().unwrap(), "--tag", "none", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("metrics-none.json")).unwrap(), std::fs::read(a.join("metrics/metrics-none.json")).unwrap());
}

#[test]
fn export_features_writes_three_streams_per_window() {
    let (dir, cfg) = setup();
    let run = train(dir.path(), &cfg, &[]);
    let o = bin(&["export-features", "--run", run.to_str().unwrap(), "--step", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(run.join("forecasts/features-t2.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "track_id,origin,stream,f0,f1,f2,f3");
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 6 * 3);
    assert!(rows[0].contains(",traj,") && rows[1].contains(",wind,") && rows[2].contains(",pres,"));
}

#[test]
fn ablate_writes_all_four_tables() {
    let (dir, cfg) = setup();
    let o = bin(&["ablate", "--config", cfg.to_str().unwrap(), "--out", "abl", "--set", "train.max_steps=1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join(stdout(&o).lines().last().unwrap().trim());
    let all: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics/ablation.json")).unwrap()).unwrap();
    let tags: Vec<_> = all.as_array().unwrap().iter().map(|t| t["tag"].as_str().unwrap().to_string()).collect();
    assert_eq!(tags, ["none", "no-piga", "no-future", "no-both", "persistence"]);
    let counts: Vec<_> = all.as_array().unwrap().iter().map(|t| t["rows"][0]["count"].clone()).collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
}
