use std::path::Path;

use forceadapt::cli::run;

const TINY: &str = "[train]
model = mini-humanoid
mode = dual_agent
force_curriculum = on
seed = 3
num_envs = 8
rollout_steps = 16
total_steps = 384
hidden = 16 16
episode_seconds = 2

[eval]
episodes = 4
levels = 0 1
";

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv: Vec<&str> = std::iter::once("forceadapt").chain(args.iter().copied()).collect();
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn data_rows(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

fn train_tiny(dir: &Path, name: &str) -> std::path::PathBuf {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run_dir = dir.join(name);
    let (code, out, err) = cli(&["train", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--progress", "1"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.trim().ends_with("checkpoint.ckpt"));
    assert_eq!(err.lines().filter(|l| l.starts_with("update ")).count(), 3);
    run_dir
}

#[test]
fn train_eval_sweep_and_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(tmp.path(), "a");
    for f in ["checkpoint.ckpt", "train_log.csv", "config.cfg"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    assert_eq!(data_rows(&std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap()).len(), 3);

    let ckpt = run_dir.join("checkpoint.ckpt");
    let (code, first, err) = cli(&["eval", ckpt.to_str().unwrap(), "--alpha", "0.5"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(data_rows(&first).len(), 1);
    let (_, second, _) = cli(&["eval", ckpt.to_str().unwrap(), "--alpha", "0.5"]);
    assert_eq!(first, second);

    let root = tmp.path().to_str().unwrap();
    let (code, sweep, err) = cli(&["sweep", root, "--levels", "0,1"]);
    assert_eq!(code, 0, "{err}");
    assert!(tmp.path().join("sweep.csv").is_file());
    assert!(data_rows(&sweep).len() >= 2);

    let (code, out, err) = cli(&["plot-data", root]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 3);
    let alpha = std::fs::read_to_string(tmp.path().join("plot_alpha.csv")).unwrap();
    assert_eq!(data_rows(&alpha).len(), 3);
    let noise = std::fs::read_to_string(tmp.path().join("plot_action_std.csv")).unwrap();
    assert_eq!(data_rows(&noise).len(), 6);
}

#[test]
fn equal_seeds_give_identical_logs_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_tiny(tmp.path(), "a");
    let b = train_tiny(tmp.path(), "b");
    for f in ["train_log.csv", "checkpoint.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    assert_eq!(cli(&["eval", missing.to_str().unwrap()]).0, 2);
    assert_eq!(cli(&["sweep", missing.to_str().unwrap()]).0, 1);
    assert_eq!(cli(&["plot-data", tmp.path().to_str().unwrap()]).0, 2);
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "[train]\nmode = sideways\n").unwrap();
    assert_eq!(cli(&["train", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]).0, 1);
    assert_eq!(cli(&["sweep", tmp.path().to_str().unwrap(), "--levels", "0,2"]).0, 1);
}
