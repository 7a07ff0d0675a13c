//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{EvalError, ModelError, TrainError};
use crate::eval::{envelope_report, eval_checkpoint, grid_entries, report_csv, sweep, MetricsReport, REPORT_COLUMNS};
use crate::force_curriculum::ClipBox;
use crate::robot_model::{resolve_model, RobotModel};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::config::TrainerConfig;
use crate::trainer::Trainer;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.cfg";

#[derive(Debug, Parser)]
#[command(name = "forceadapt", version, about = "Force-adaptive humanoid loco-manipulation training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print a robot model summary.
    ModelInfo { model: String },
    /// Sample random arm poses and write their admissible force envelopes.
    Envelope {
        model: String,
        #[arg(long, default_value_t = 100)]
        poses: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "narrow")]
        clip: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a config file; writes checkpoint, log and config to --out.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print a progress line every this many updates (0 disables).
        #[arg(long, default_value_t = 10)]
        progress: usize,
    },
    /// Evaluate a checkpoint at one force level.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate every run under a directory at each force level.
    Sweep {
        run_dir: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated force levels.
        #[arg(long)]
        levels: Option<String>,
    },
    /// Write training-curve CSVs for every run under a directory.
    PlotData { run_dir: PathBuf },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Format(_) | TrainError::Model(ModelError::Parse(_)) => {
                CliError::Usage(e.to_string())
            }
            TrainError::Model(ModelError::Validation { .. }) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Argument(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_model(name: &str) -> Result<RobotModel, CliError> {
    resolve_model(name).map_err(|e| match e {
        ModelError::Io { .. } => CliError::Usage(format!("unknown model `{name}`: {e}")),
        other => CliError::Usage(other.to_string()),
    })
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(CliError::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> Result<(), CliError> {
    match cmd {
        Command::ModelInfo { model } => {
            let m = load_model(&model)?;
            out.write_all(model_info(&m).as_bytes()).map_err(runtime)
        }
        Command::Envelope {
            model,
            poses,
            out: path,
            clip,
            seed,
        } => {
            let m = load_model(&model)?;
            let clip_box =
                ClipBox::preset(&clip).ok_or_else(|| CliError::Usage(format!("unknown clip box `{clip}`")))?;
            let report = envelope_report(&m, poses, &clip_box, seed);
            let csv = report.to_csv(&model_hash(&m), seed);
            match path {
                Some(p) => {
                    write_file(&p, &csv)?;
                    out.write_all(report.summary().as_bytes()).map_err(runtime)
                }
                None => out.write_all(csv.as_bytes()).map_err(runtime),
            }
        }
        Command::Train {
            config,
            seed,
            out: dir,
            progress,
        } => {
            let mut cfg = TrainerConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = dir.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}-{}-seed{}", cfg.mode, cfg.force_curriculum, cfg.seed))
            });
            train(cfg, &dir, progress, err)?;
            let _ = writeln!(out, "{}", dir.join(CHECKPOINT_FILE).display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            alpha,
            episodes,
            seed,
        } => {
            let ckpt = Checkpoint::load(&checkpoint).map_err(|e| runtime(format!("{}: {e}", checkpoint.display())))?;
            let episodes = episodes.unwrap_or(ckpt.config.eval_episodes);
            let seed = seed.unwrap_or(ckpt.config.eval_seed);
            let r = eval_checkpoint(&ckpt, alpha, episodes, seed)?;
            let mut csv = format!(
                "# format=1 config_hash={} seed={seed}\n{REPORT_COLUMNS}\n",
                ckpt.config.hash()
            );
            csv.push_str(&metrics_line(&r, ckpt.config.seed));
            out.write_all(csv.as_bytes()).map_err(runtime)
        }
        Command::Sweep {
            run_dir,
            episodes,
            seed,
            levels,
        } => {
            let runs = find_runs(&run_dir)?;
            let first = runs.first().map(|r| r.1.config.clone()).unwrap_or_default();
            let episodes = episodes.unwrap_or(first.eval_episodes);
            let seed = seed.unwrap_or(first.eval_seed);
            let levels = match levels {
                Some(l) => parse_levels(&l)?,
                None => first.eval_levels.clone(),
            };
            let list: Vec<_> = runs
                .iter()
                .map(|(p, c)| (c.config.mode, c.config.force_curriculum, c.config.seed, p.clone()))
                .collect();
            let entries = grid_entries(&list);
            let rows = sweep(&entries, &levels, episodes, seed, |r| {
                let status = if r.report.is_some() { "done" } else { "absent" };
                let _ = writeln!(err, "{} {} alpha {}: {status}", r.mode, r.curriculum, r.alpha);
            })?;
            let csv = report_csv(&rows, &first.hash(), seed);
            write_file(&run_dir.join("sweep.csv"), &csv)?;
            out.write_all(csv.as_bytes()).map_err(runtime)
        }
        Command::PlotData { run_dir } => {
            let written = plot_data(&run_dir)?;
            for p in written {
                let _ = writeln!(out, "{}", p.display());
            }
            Ok(())
        }
    }
}

fn parse_levels(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|x| {
            let v: f64 = x
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad force level `{x}`")))?;
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(CliError::Usage(format!("force level {v} outside [0, 1]")))
            }
        })
        .collect()
}

fn model_hash(m: &RobotModel) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(m.serialize().as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn model_info(m: &RobotModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model: {}", m.name);
    let _ = writeln!(
        s,
        "base: mass {} kg, default height {} m",
        m.base.mass, m.base.default_height
    );
    let _ = writeln!(s, "total mass: {:.3} kg", m.total_mass());
    let _ = writeln!(s, "actuated dof: {} ({} arm joints)", m.dof(), m.upper_dof_count());
    for arm in &m.arms {
        let _ = writeln!(s, "arm {} ({} joints, {:.3} kg):", arm.side.as_str(), arm.dof(), arm.total_mass());
        for j in &arm.joints {
            let _ = writeln!(
                s,
                "  {:<16} limits [{:.3}, {:.3}] rad  torque {:.1} N·m  kp {} kd {}",
                j.name, j.position_limits.0, j.position_limits.1, j.torque_limit, j.pd_gains.0, j.pd_gains.1
            );
        }
    }
    s
}

fn metrics_line(r: &MetricsReport, seed: u64) -> String {
    format!(
        "{},{},{seed},{},ok,{},{},{},{},{},{},{},{},{},{}\n",
        r.mode,
        r.curriculum,
        r.alpha,
        r.episodes,
        r.upper_error,
        r.upper_error_std,
        r.root_error,
        r.root_error_std,
        r.root_channels[0],
        r.root_channels[1],
        r.root_channels[2],
        r.fall_rate,
        r.feasibility
    )
}

fn train(cfg: TrainerConfig, dir: &Path, progress: usize, err: &mut dyn std::io::Write) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join(CONFIG_FILE), &cfg.render())?;
    let mut trainer = Trainer::new(cfg)?;
    let total = trainer.total_updates();
    let result = trainer.train(|r| {
        if progress > 0 && (r.update % progress == 0 || r.update == total) {
            let _ = writeln!(
                err,
                "update {}/{} steps {} alpha {:.2} upper_error {:.4} root_error {:.4} fall_rate {:.3}",
                r.update, total, r.env_steps, r.alpha, r.upper_error, r.root_error, r.fall_rate
            );
        }
    });
    write_file(&dir.join(LOG_FILE), &trainer.log_csv())?;
    match result {
        Ok(()) => trainer
            .save_checkpoint(&dir.join(CHECKPOINT_FILE))
            .map_err(CliError::from),
        Err(e) => {
            let dump = dir.join("crash.ckpt");
            let _ = trainer.save_checkpoint(&dump);
            Err(runtime(format!("{e} (state dumped to {})", dump.display())))
        }
    }
}

/// Checkpoints in `dir` and its immediate subdirectories, sorted by path.
fn find_runs(dir: &Path) -> Result<Vec<(PathBuf, Checkpoint)>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut candidates = vec![dir.join(CHECKPOINT_FILE)];
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(runtime)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    candidates.extend(subdirs.iter().map(|d| d.join(CHECKPOINT_FILE)));
    let mut runs = Vec::new();
    for c in candidates {
        if c.is_file() {
            let ckpt = Checkpoint::load(&c).map_err(|e| runtime(format!("{}: {e}", c.display())))?;
            runs.push((c, ckpt));
        }
    }
    Ok(runs)
}

/// Run directories (the directory itself or its subdirectories) that hold a
/// training log, sorted by path.
fn find_logs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut dirs = vec![dir.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(runtime)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    dirs.extend(subdirs);
    Ok(dirs.into_iter().filter(|d| d.join(LOG_FILE).is_file()).collect())
}

/// Curve CSVs from training logs: force scale, tracking errors and action
/// noise std per update.
fn plot_data(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let runs = find_logs(dir)?;
    if runs.is_empty() {
        return Err(CliError::Runtime(format!("no {LOG_FILE} under {}", dir.display())));
    }
    let mut alpha = String::from("# format=1\nrun,update,env_steps,alpha\n");
    let mut tracking = String::from("# format=1\nrun,update,env_steps,upper_error,root_error,fall_rate\n");
    let mut noise = String::from("# format=1\nrun,update,env_steps,agent,action_std\n");
    for run in &runs {
        let name = run
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| ".".into());
        let text = std::fs::read_to_string(run.join(LOG_FILE)).map_err(runtime)?;
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| runtime(format!("{}: empty log", run.display())))?
            .split(',')
            .collect();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| *h == name)
                .ok_or_else(|| runtime(format!("{}: missing column `{name}`", run.display())))
        };
        let (cu, cs, ca) = (col("update")?, col("env_steps")?, col("alpha")?);
        let (ce, cr, cf) = (col("upper_error")?, col("root_error")?, col("fall_rate")?);
        let std_cols: Vec<(String, usize)> = header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_suffix("_action_std").map(|a| (a.to_string(), i)))
            .collect();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(runtime(format!("{}: ragged row", run.display())));
            }
            let _ = writeln!(alpha, "{name},{},{},{}", f[cu], f[cs], f[ca]);
            let _ = writeln!(tracking, "{name},{},{},{},{},{}", f[cu], f[cs], f[ce], f[cr], f[cf]);
            for (agent, i) in &std_cols {
                let _ = writeln!(noise, "{name},{},{},{agent},{}", f[cu], f[cs], f[*i]);
            }
        }
    }
    let files = [
        ("plot_alpha.csv", alpha),
        ("plot_tracking.csv", tracking),
        ("plot_action_std.csv", noise),
    ];
    let mut written = Vec::new();
    for (file, text) in files {
        let p = dir.join(file);
        write_file(&p, &text)?;
        written.push(p);
    }
    Ok(written)
}
