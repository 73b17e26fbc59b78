//! `spd`: command-line front end for teacher training, distillation runs,
//! ablations, sweeps, subset-sum checks and experiment presets.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric abort, 1 other.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spd_core::checkpoint::Checkpoint;
use spd_core::config::{RunConfig, Strategy};
use spd_core::model::EncoderModel;
use spd_core::preset::{
    run_members, run_preset, strategy_members, sweep_members, write_batch_report,
    write_bound_files, ExperimentPreset, PresetName, SweepParam,
};
use spd_core::subsum::{failure_rate, fit_c, TargetGrid};
use spd_core::train::{train_teacher, SpdRun};
use spd_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "spd",
    version,
    about = "Sparse progressive distillation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense teacher with cross-entropy.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One distillation run; trains a teacher first unless one is given.
    SpdRun {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Teacher checkpoint written by train-teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<String>,
        /// Graft nothing until pruning has finished.
        #[arg(long)]
        no_graft_while_prune: bool,
    },
    /// All four strategies under every seed.
    AblateStrategies {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seed: Vec<u64>,
    },
    /// Grid over one knob: p0, lr, theta or prune_end.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seed: Vec<u64>,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Empirical failure rate of subset-sum coverage.
    VerifyBound {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "4,8,12,16,20")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0.01)]
        grid_step: f64,
    },
    /// A named experiment preset.
    RunPreset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        name: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seed: Vec<u64>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_train_teacher(common: &Common, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = cfg.task.build()?;
    let out = train_teacher(&cfg, &data)?;
    std::fs::create_dir_all(&common.out)?;
    let mut ck = Checkpoint::new();
    ck.put_model(&out.model)?;
    ck.meta.insert("seed".into(), cfg.seed.into());
    ck.meta.insert("data".into(), data.content_hash().into());
    ck.save(&common.out.join("teacher.ckpt"))?;
    out.log.write(&common.out.join("metrics.csv"))?;
    write_json(
        &common.out.join("summary.json"),
        &serde_json::json!({
            "seed": cfg.seed,
            "train_metric": out.train_metric,
            "dev_metric": out.dev_metric,
        }),
    )?;
    println!("teacher train {} dev {}", out.train_metric, out.dev_metric);
    Ok(())
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    Strategy::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
}

fn cmd_spd_run(
    common: &Common,
    seed: Option<u64>,
    teacher: Option<&Path>,
    strategy: Option<&str>,
    no_graft_while_prune: bool,
) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = strategy {
        cfg.strategy = parse_strategy(s)?;
    }
    if no_graft_while_prune {
        cfg.graft_while_prune = false;
    }
    cfg.validate()?;
    let data = cfg.task.build()?;
    std::fs::create_dir_all(&common.out)?;
    let teacher: EncoderModel = match teacher {
        Some(p) => Checkpoint::load(p)?.model()?,
        None => {
            let t = train_teacher(&cfg, &data)?;
            let mut ck = Checkpoint::new();
            ck.put_model(&t.model)?;
            ck.save(&common.out.join("teacher.ckpt"))?;
            t.model
        }
    };
    let mut run = SpdRun::new(&cfg, &teacher, &data)?;
    if let Err(e) = run.run_with(|_, _| Ok(())) {
        run.log().write(&common.out.join("metrics.csv"))?;
        run.checkpoint()?.save(&common.out.join("last_good.ckpt"))?;
        eprintln!(
            "aborted after {} steps; last good state in last_good.ckpt",
            run.steps_done()
        );
        return Err(e);
    }
    let o = run.finish()?;
    o.log.write(&common.out.join("metrics.csv"))?;
    o.checkpoint.save(&common.out.join("student.ckpt"))?;
    write_json(
        &common.out.join("summary.json"),
        &serde_json::json!({
            "seed": cfg.seed,
            "strategy": cfg.strategy.name(),
            "train_metric": o.train_metric,
            "dev_metric": o.dev_metric,
            "gap": o.gap(),
            "teacher_forwards": o.teacher_forwards,
        }),
    )?;
    println!(
        "student train {} dev {} gap {}",
        o.train_metric,
        o.dev_metric,
        o.gap()
    );
    Ok(())
}

fn report_batch(
    members: &[spd_core::preset::Member],
    batch: &spd_core::preset::RunBatch,
    out: &Path,
) -> Result<()> {
    let summary = write_batch_report(members, batch, out)?;
    for (run, s) in &summary {
        println!(
            "{run}: train {:.4} dev {:.4} gap {:.4} ± {:.4}",
            s.train_metric.mean, s.dev_metric.mean, s.gap.mean, s.gap.std
        );
    }
    if let Some(f) = batch.failures.first() {
        return Err(Error::Input(format!(
            "{} of {} runs failed; first: {} seed {}: {}",
            batch.failures.len(),
            batch.failures.len() + batch.results.len(),
            f.run,
            f.seed,
            f.error
        )));
    }
    Ok(())
}

fn cmd_ablate(common: &Common, seeds: &[u64]) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let members = strategy_members(&cfg);
    let batch = run_members(&members, seeds, Some(&common.out));
    report_batch(&members, &batch, &common.out)
}

fn cmd_sweep(common: &Common, seeds: &[u64], param: &str, values: &[f64]) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let members = sweep_members(&cfg, param.parse::<SweepParam>()?, values)?;
    let batch = run_members(&members, seeds, Some(&common.out));
    report_batch(&members, &batch, &common.out)
}

fn cmd_verify_bound(
    out: &Path,
    seed: u64,
    ns: &[usize],
    epsilon: f64,
    trials: usize,
    grid_step: f64,
) -> Result<()> {
    let grid = TargetGrid {
        step: grid_step,
        ..TargetGrid::default()
    };
    grid.points().map_err(|e| Error::Config(e.to_string()))?;
    if trials == 0 || ns.is_empty() {
        return Err(Error::Config("need at least one n and one trial".into()));
    }
    let reports = ns
        .iter()
        .map(|&n| failure_rate(n, epsilon, trials, &grid, seed))
        .collect::<Result<Vec<_>>>()?;
    write_bound_files(&reports, out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "reports": reports,
            "fitted_c": fit_c(&reports),
        }))?
    );
    Ok(())
}

fn cmd_run_preset(common: &Common, name: &str, seeds: &[u64]) -> Result<()> {
    let name: PresetName = name.parse()?;
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => name.default_base(),
    };
    let preset = ExperimentPreset::new(name, base, seeds.to_vec());
    let report = run_preset(&preset, &common.out)?;
    for (run, s) in &report.summary {
        println!(
            "{run}: train {:.4} dev {:.4} gap {:.4} ± {:.4}",
            s.train_metric.mean, s.dev_metric.mean, s.gap.mean, s.gap.std
        );
    }
    for r in &report.bound {
        println!("seed {} n {}: delta_hat {}", r.seed, r.n, r.delta_hat);
    }
    if !report.batch.failures.is_empty() {
        return Err(Error::Input(format!(
            "{} runs failed; see failures.json",
            report.batch.failures.len()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { common, seed } => cmd_train_teacher(&common, seed),
        Command::SpdRun {
            common,
            seed,
            teacher,
            strategy,
            no_graft_while_prune,
        } => cmd_spd_run(
            &common,
            seed,
            teacher.as_deref(),
            strategy.as_deref(),
            no_graft_while_prune,
        ),
        Command::AblateStrategies { common, seed } => cmd_ablate(&common, &seed),
        Command::Sweep {
            common,
            seed,
            param,
            values,
        } => cmd_sweep(&common, &seed, &param, &values),
        Command::VerifyBound {
            out,
            seed,
            n,
            epsilon,
            trials,
            grid_step,
        } => cmd_verify_bound(&out, seed, &n, epsilon, trials, grid_step),
        Command::RunPreset { common, name, seed } => cmd_run_preset(&common, &name, &seed),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
