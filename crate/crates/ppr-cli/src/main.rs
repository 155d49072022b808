//! Command-line front end: train agents, expand ablation presets into
//! run matrices, evaluate checkpoints, and merge learning curves.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime
//! failure.

mod presets;

use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use clap::{Parser, Subcommand};
use ppr_core::checkpoint;
use ppr_core::config::ExperimentConfig;
use ppr_core::error::Error;
use ppr_core::metrics::{extract_curve, merge_curves, read_metrics, write_merged_csv};
use ppr_core::trainer::{eval_seed, evaluate, load_params, run_experiment, EvalMode, EvalSummary};

use presets::{expand, Preset, PresetRun};

#[derive(Parser)]
#[command(name = "ppr", version, about = "Hierarchical recurrent agents on desk-scale memory tasks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one agent from a config file and write metrics, CSV, and a
    /// checkpoint into the output directory.
    Train {
        /// Path to a `key = value` config file.
        config: PathBuf,
        /// Override config keys, e.g. `--set agent.tau=16`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
        /// Validate and print the resolved config without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Expand a named ablation preset from a base config and run every
    /// member under the output directory.
    Ablate {
        /// One of: architectures, loss_combos, prediction_rollout, tau_sweep.
        preset: String,
        /// Path to the base config file.
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "runs/ablate")]
        out_dir: PathBuf,
        /// List the expanded run names without training.
        #[arg(long)]
        dry_run: bool,
        /// Worker processes for training runs (1 = in-process, sequential).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a trained checkpoint on fresh evaluation episodes.
    Eval {
        /// Path to a checkpoint written by `train`.
        checkpoint: PathBuf,
        /// Config file describing the agent and environment.
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Action selection: behavior, fixed_k, branch_follow, or random.
        #[arg(long, default_value = "behavior")]
        mode: String,
        /// Rollout horizon for the prediction-driven modes.
        #[arg(long)]
        k: Option<u64>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Merge learning curves from several runs into one CSV on a shared
    /// step grid (linear interpolation inside each run's range).
    Curves {
        /// Metrics files, one per run.
        files: Vec<PathBuf>,
        /// Which metric to extract from each file.
        #[arg(long, default_value = "eval_return")]
        key: String,
        #[arg(long, default_value = "curves.csv")]
        out: PathBuf,
    },
}

struct CliError {
    code: i32,
    msg: String,
}

fn usage(e: impl Display) -> CliError {
    CliError {
        code: 2,
        msg: e.to_string(),
    }
}

fn runtime(e: impl Display) -> CliError {
    CliError {
        code: 3,
        msg: e.to_string(),
    }
}

type CliResult = Result<(), CliError>;

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Train {
            config,
            set,
            out_dir,
            dry_run,
        } => cmd_train(&config, &set, &out_dir, dry_run),
        Cmd::Ablate {
            preset,
            config,
            set,
            out_dir,
            dry_run,
            jobs,
        } => cmd_ablate(&preset, &config, &set, &out_dir, dry_run, jobs),
        Cmd::Eval {
            checkpoint,
            config,
            set,
            mode,
            k,
            episodes,
        } => cmd_eval(&checkpoint, &config, &set, &mode, k, episodes),
        Cmd::Curves { files, key, out } => cmd_curves(&files, &key, &out),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.msg);
        std::process::exit(e.code);
    }
}

/// Load, override, and validate a config; all failures here are usage
/// errors.
fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    if !path.is_file() {
        return Err(usage(format!("config file not found: {}", path.display())));
    }
    let mut cfg = ExperimentConfig::from_file(path).map_err(usage)?;
    cfg.apply_overrides(overrides).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn cmd_train(config: &Path, set: &[String], out_dir: &Path, dry_run: bool) -> CliResult {
    let cfg = load_config(config, set)?;
    if dry_run {
        print!("{}", cfg.to_lines());
        return Ok(());
    }
    let summary = run_experiment(&cfg, out_dir).map_err(runtime)?;
    println!("metrics: {}", out_dir.join("metrics.txt").display());
    println!("checkpoint: {}", out_dir.join("checkpoint.bin").display());
    println!(
        "env steps: {}  updates: {}",
        summary.env_steps, summary.updates
    );
    if let Some(e) = summary.final_eval {
        println!("final eval: {}", format_eval(&e));
    }
    Ok(())
}

fn format_eval(e: &EvalSummary) -> String {
    format!(
        "mean return {:.4} ± {:.4} over {} episodes, success rate {:.3}",
        e.mean_return, e.stderr, e.episodes, e.success_rate
    )
}

fn cmd_ablate(
    preset: &str,
    config: &Path,
    set: &[String],
    out_dir: &Path,
    dry_run: bool,
    jobs: usize,
) -> CliResult {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let base = load_config(config, set)?;
    match expand(preset, &base).map_err(usage)? {
        Preset::Training(runs) => {
            if dry_run {
                for r in &runs {
                    println!("{}", r.name);
                }
                return Ok(());
            }
            if jobs > 1 {
                run_workers(&runs, out_dir, jobs)
            } else {
                for r in &runs {
                    let dir = out_dir.join(&r.name);
                    let summary = run_experiment(&r.cfg, &dir).map_err(runtime)?;
                    match summary.final_eval {
                        Some(e) => println!("{}: {}", r.name, format_eval(&e)),
                        None => println!("{}: done", r.name),
                    }
                }
                Ok(())
            }
        }
        Preset::PredictionRollout { train, horizons } => {
            if dry_run {
                println!("{}", train.name);
                for k in &horizons {
                    println!("eval fixed_k k={k}  branch_follow k={k}");
                }
                return Ok(());
            }
            run_prediction_rollout(&train, &horizons, out_dir)
        }
    }
}

/// Train preset members in parallel worker processes, `jobs` at a time.
/// Each worker is this same binary running `train` on a config file
/// written into the member's output directory.
fn run_workers(runs: &[PresetRun], out_dir: &Path, jobs: usize) -> CliResult {
    let exe = std::env::current_exe().map_err(runtime)?;
    for wave in runs.chunks(jobs) {
        let mut children = Vec::new();
        for r in wave {
            let dir = out_dir.join(&r.name);
            fs::create_dir_all(&dir).map_err(runtime)?;
            let cfg_path = dir.join("config.txt");
            fs::write(&cfg_path, r.cfg.to_lines()).map_err(runtime)?;
            let child = Command::new(&exe)
                .arg("train")
                .arg(&cfg_path)
                .arg("--out-dir")
                .arg(&dir)
                .stdout(Stdio::null())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(runtime)?;
            children.push((r.name.clone(), child));
        }
        for (name, mut child) in children {
            let status = child.wait().map_err(runtime)?;
            if !status.success() {
                return Err(runtime(format!("run `{name}` failed ({status})")));
            }
            println!("{name}: done");
        }
    }
    Ok(())
}

/// Train the prediction-head agent once, then score the three action
/// selection schemes at each horizon on paired evaluation episodes.
fn run_prediction_rollout(train: &PresetRun, horizons: &[u64], out_dir: &Path) -> CliResult {
    let dir = out_dir.join(&train.name);
    run_experiment(&train.cfg, &dir).map_err(runtime)?;
    let data = checkpoint::load(&dir.join("checkpoint.bin")).map_err(runtime)?;
    let store = load_params(&train.cfg, &data).map_err(runtime)?;
    let mcfg = train.cfg.model_config();
    let env_cfg = train.cfg.env_config();
    let seed = eval_seed(train.cfg.seed);
    let episodes = train.cfg.eval_episodes;

    let schemes: [(&str, fn(u64) -> EvalMode); 3] = [
        ("behavior", |_| EvalMode::BehaviorPi),
        ("fixed_k", EvalMode::PredictionFixedK),
        ("branch_follow", EvalMode::PredictionBranchFollow),
    ];
    let mut rows = Vec::new();
    for (name, mode) in schemes {
        let mut cells = Vec::new();
        for &k in horizons {
            let summary = evaluate(&store, &mcfg, &env_cfg, episodes, mode(k), seed)
                .map_err(runtime)?;
            cells.push(summary);
        }
        rows.push((name, cells));
    }

    let header = horizons
        .iter()
        .map(|k| format!("{:>16}", format!("k={k}")))
        .collect::<String>();
    println!("{:<14}{header}", "scheme");
    let mut csv = String::from("scheme,k,mean_return,stderr,success_rate\n");
    for (name, cells) in &rows {
        let mut line = format!("{name:<14}");
        for (k, s) in horizons.iter().zip(cells) {
            line.push_str(&format!("{:>16}", format!("{:.3}±{:.3}", s.mean_return, s.stderr)));
            csv.push_str(&format!(
                "{name},{k},{},{},{}\n",
                s.mean_return, s.stderr, s.success_rate
            ));
        }
        println!("{line}");
    }
    let table_path = out_dir.join("rollout_table.csv");
    fs::File::create(&table_path)
        .and_then(|mut f| f.write_all(csv.as_bytes()))
        .map_err(runtime)?;
    println!("table: {}", table_path.display());
    Ok(())
}

fn parse_mode(mode: &str, k: Option<u64>) -> Result<EvalMode, CliError> {
    let need_k = || {
        k.ok_or_else(|| usage(format!("mode `{mode}` needs --k")))
    };
    match mode {
        "behavior" => Ok(EvalMode::BehaviorPi),
        "random" => Ok(EvalMode::UniformRandom),
        "fixed_k" => Ok(EvalMode::PredictionFixedK(need_k()?)),
        "branch_follow" => Ok(EvalMode::PredictionBranchFollow(need_k()?)),
        other => Err(usage(format!(
            "unknown mode `{other}`; valid modes: behavior, fixed_k, branch_follow, random"
        ))),
    }
}

fn cmd_eval(
    ckpt: &Path,
    config: &Path,
    set: &[String],
    mode: &str,
    k: Option<u64>,
    episodes: usize,
) -> CliResult {
    let cfg = load_config(config, set)?;
    if episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    let mode = parse_mode(mode, k)?;
    if !ckpt.is_file() {
        return Err(usage(format!("checkpoint not found: {}", ckpt.display())));
    }
    let data = checkpoint::load(ckpt).map_err(runtime)?;
    let store = load_params(&cfg, &data).map_err(usage)?;
    let summary = evaluate(
        &store,
        &cfg.model_config(),
        &cfg.env_config(),
        episodes,
        mode,
        eval_seed(cfg.seed),
    )
    .map_err(|e| match e {
        Error::EvalModeMismatch { .. } | Error::Domain { .. } => usage(e),
        other => runtime(other),
    })?;
    println!("{}", format_eval(&summary));
    Ok(())
}

fn cmd_curves(files: &[PathBuf], key: &str, out: &Path) -> CliResult {
    if files.is_empty() {
        return Err(usage("need at least one metrics file"));
    }
    let mut names = Vec::new();
    let mut curves = Vec::new();
    for (i, f) in files.iter().enumerate() {
        if !f.is_file() {
            return Err(usage(format!("metrics file not found: {}", f.display())));
        }
        let records = read_metrics(f).map_err(runtime)?;
        let curve = extract_curve(&records, key);
        if curve.is_empty() {
            return Err(usage(format!(
                "no `{key}` entries in {}",
                f.display()
            )));
        }
        names.push(run_name(f, i, &names));
        curves.push(curve);
    }
    let (grid, columns) = merge_curves(&curves);
    write_merged_csv(out, &names, &grid, &columns).map_err(runtime)?;
    println!("wrote {} rows to {}", grid.len(), out.display());
    Ok(())
}

/// Column name for a metrics file: its parent directory (the run
/// directory), falling back to the file stem, de-duplicated by index.
fn run_name(path: &Path, index: usize, taken: &[String]) -> String {
    let base = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("run{index}"));
    if taken.contains(&base) {
        format!("{base}_{index}")
    } else {
        base
    }
}
