//! Named experiment presets: a base config, a seed list and a rule for
//! deriving member runs. Running a preset writes one directory per member
//! and seed plus aggregate tables and charts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Strategy};
use crate::data::{Dataset, TaskSource, TaskSpec};
use crate::error::{Error, Result};
use crate::log::{num, MetricLog};
use crate::model::{EncoderModel, ModelConfig};
use crate::optim::{AdamWConfig, OptimizerMode, LR_GRID};
use crate::report::{self, Chart, Failure, RunResult, RunSummary, Series};
use crate::subsum::{failure_rate, BoundReport, TargetGrid};
use crate::train::{run_spd, train_teacher, with_strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    GapVsSparsity,
    FourStrategies,
    GraftVsNograft,
    P0Sweep,
    PruneEndSweep,
    OneVsTwoOptimizers,
    LrSweep,
    BoundSweep,
}

impl PresetName {
    pub const ALL: [PresetName; 8] = [
        PresetName::GapVsSparsity,
        PresetName::FourStrategies,
        PresetName::GraftVsNograft,
        PresetName::P0Sweep,
        PresetName::PruneEndSweep,
        PresetName::OneVsTwoOptimizers,
        PresetName::LrSweep,
        PresetName::BoundSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PresetName::GapVsSparsity => "gap_vs_sparsity",
            PresetName::FourStrategies => "four_strategies",
            PresetName::GraftVsNograft => "graft_vs_nograft",
            PresetName::P0Sweep => "p0_sweep",
            PresetName::PruneEndSweep => "prune_end_sweep",
            PresetName::OneVsTwoOptimizers => "one_vs_two_optimizers",
            PresetName::LrSweep => "lr_sweep",
            PresetName::BoundSweep => "bound_sweep",
        }
    }

    /// The experiment this preset reproduces, in plain words.
    pub fn mirrors(self) -> &'static str {
        match self {
            PresetName::GapVsSparsity => {
                "train-dev gap curves at increasing target sparsity on the small-data task"
            }
            PresetName::FourStrategies => {
                "train-dev gap of progressive vs. all-at-once students, with and without distillation"
            }
            PresetName::GraftVsNograft => "pruning with and without grafting during the pruning phase",
            PresetName::P0Sweep => "sensitivity of the final metric to the initial grafting probability",
            PresetName::PruneEndSweep => "effect of the step at which the pruning ramp ends",
            PresetName::OneVsTwoOptimizers => {
                "a single optimizer over the whole run vs. a fresh optimizer for the finetuning phase"
            }
            PresetName::LrSweep => "sensitivity of the final metric to the peak learning rate",
            PresetName::BoundSweep => {
                "empirical failure rate of the subset-sum approximation as the pool size grows"
            }
        }
    }

    /// Base config used when the caller does not supply one.
    pub fn default_base(self) -> RunConfig {
        match self {
            PresetName::GapVsSparsity | PresetName::FourStrategies => small_data_config(),
            _ => parity_config(),
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

/// Desk-scale models want larger steps than the reference grid, which was
/// tuned for a much larger network.
pub const DESK_LR_SCALE: f64 = 5.0;

/// Parity over 7 bits. Without position embeddings the encoder can only
/// count, which is exactly what parity needs; 96 examples then suffice.
pub fn parity_config() -> RunConfig {
    RunConfig {
        seed: 0,
        strategy: Strategy::ProgKd,
        batch_size: 32,
        eval_every: 50,
        train_eval_size: 0,
        model: ModelConfig {
            num_layers: 2,
            d_model: 32,
            num_heads: 2,
            d_ff: 64,
            vocab_size: 8,
            max_seq_len: 16,
            num_classes: 2,
            position_embeddings: false,
        },
        task: TaskSpec {
            name: "parity".into(),
            source: TaskSource::Parity,
            n_train: 96,
            n_dev: 32,
            seq_len: 7,
            vocab_size: 8,
            ..TaskSpec::default()
        },
        teacher: crate::config::TeacherConfig {
            steps: 3000,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            eval_every: 500,
        },
        sparsity: crate::prune::SparsitySchedule {
            target: 0.5,
            ..Default::default()
        },
        graft: crate::graft::GraftSchedule {
            p0: 0.6,
            t1: 300,
            t2: 500,
            t3: 600,
        },
        optimizer: crate::optim::OptimizerConfig {
            a: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            ..Default::default()
        },
        ..RunConfig::default()
    }
}

/// Pair matching with 10% label noise. The teacher learns from 2000
/// examples; distillation sees only the first 400 of them.
pub fn small_data_config() -> RunConfig {
    RunConfig {
        seed: 0,
        strategy: Strategy::ProgKd,
        batch_size: 32,
        eval_every: 100,
        train_eval_size: 0,
        spd_train_size: 400,
        model: ModelConfig {
            num_layers: 4,
            d_model: 32,
            num_heads: 2,
            d_ff: 64,
            vocab_size: 12,
            max_seq_len: 16,
            num_classes: 2,
            position_embeddings: false,
        },
        task: TaskSpec {
            name: "pair_match".into(),
            source: TaskSource::PairMatch,
            n_train: 2000,
            n_dev: 400,
            seq_len: 4,
            vocab_size: 12,
            label_noise: 0.1,
            ..TaskSpec::default()
        },
        teacher: crate::config::TeacherConfig {
            steps: 3000,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            eval_every: 500,
        },
        sparsity: crate::prune::SparsitySchedule {
            target: 0.8,
            ..Default::default()
        },
        graft: crate::graft::GraftSchedule {
            p0: 0.6,
            t1: 600,
            t2: 1000,
            t3: 1200,
        },
        optimizer: crate::optim::OptimizerConfig {
            a: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            ..Default::default()
        },
        ..RunConfig::default()
    }
}

/// Knob varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    P0,
    Lr,
    Theta,
    PruneEnd,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::P0 => "p0",
            SweepParam::Lr => "lr",
            SweepParam::Theta => "theta",
            SweepParam::PruneEnd => "prune_end",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepParam::P0,
            SweepParam::Lr,
            SweepParam::Theta,
            SweepParam::PruneEnd,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown sweep parameter {s:?}")))
    }
}

/// One configuration inside a preset, run once per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub run: String,
    /// Position on the sweep axis, when the preset is a sweep.
    pub x: Option<f64>,
    pub config: RunConfig,
}

pub fn sweep_members(base: &RunConfig, param: SweepParam, values: &[f64]) -> Result<Vec<Member>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            match param {
                SweepParam::P0 => c.graft.p0 = v,
                SweepParam::Lr => {
                    c.optimizer.a.lr = v;
                    if let Some(b) = c.optimizer.b.as_mut() {
                        b.lr = v;
                    }
                }
                SweepParam::Theta => {
                    c.sparsity.target = v;
                    c.sparsity.per_layer = None;
                }
                SweepParam::PruneEnd => {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(Error::Config(format!("prune end {v} is not a step")));
                    }
                    c.sparsity.end_step = Some(v as usize);
                }
            }
            c.validate()?;
            Ok(Member {
                run: format!("{}_{}", param.name(), num(v)),
                x: Some(v),
                config: c,
            })
        })
        .collect()
}

pub fn strategy_members(base: &RunConfig) -> Vec<Member> {
    Strategy::ALL
        .into_iter()
        .map(|s| Member {
            run: s.name().into(),
            x: None,
            config: with_strategy(base, s),
        })
        .collect()
}

/// Subset-sum failure-rate sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSweep {
    pub ns: Vec<usize>,
    pub epsilon: f64,
    pub trials: usize,
    pub grid: TargetGrid,
}

impl Default for BoundSweep {
    fn default() -> Self {
        BoundSweep {
            ns: vec![4, 8, 12, 16, 20],
            epsilon: 0.05,
            trials: 500,
            grid: TargetGrid::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPreset {
    pub name: PresetName,
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    /// Overrides the default sweep values of sweep presets.
    pub values: Option<Vec<f64>>,
    pub bound: BoundSweep,
}

impl ExperimentPreset {
    pub fn new(name: PresetName, base: RunConfig, seeds: Vec<u64>) -> Self {
        ExperimentPreset {
            name,
            base,
            seeds,
            values: None,
            bound: BoundSweep::default(),
        }
    }

    fn values_or(&self, default: Vec<f64>) -> Vec<f64> {
        self.values.clone().unwrap_or(default)
    }

    /// Member runs; empty for the subset-sum sweep, which trains nothing.
    pub fn members(&self) -> Result<Vec<Member>> {
        if self.seeds.is_empty() {
            return Err(Error::Config("preset needs at least one seed".into()));
        }
        self.base.validate()?;
        let g = &self.base.graft;
        match self.name {
            PresetName::GapVsSparsity => sweep_members(
                &self.base,
                SweepParam::Theta,
                &self.values_or(vec![0.0, 0.8, 0.95]),
            ),
            PresetName::FourStrategies => Ok(strategy_members(&self.base)),
            PresetName::GraftVsNograft => Ok([true, false]
                .into_iter()
                .map(|on| {
                    let mut c = self.base.clone();
                    c.graft_while_prune = on;
                    Member {
                        run: if on {
                            "graft_while_prune"
                        } else {
                            "no_graft_while_prune"
                        }
                        .into(),
                        x: None,
                        config: c,
                    }
                })
                .collect()),
            PresetName::P0Sweep => sweep_members(
                &self.base,
                SweepParam::P0,
                &self.values_or((1..=9).map(|i| i as f64 / 10.0).collect()),
            ),
            PresetName::PruneEndSweep => sweep_members(
                &self.base,
                SweepParam::PruneEnd,
                &self.values_or(vec![
                    (g.t1 / 2) as f64,
                    g.t1 as f64,
                    g.t2 as f64,
                    g.t3 as f64,
                ]),
            ),
            PresetName::OneVsTwoOptimizers => Ok([OptimizerMode::One, OptimizerMode::Two]
                .into_iter()
                .map(|mode| {
                    let mut c = self.base.clone();
                    c.optimizer.mode = mode;
                    Member {
                        run: match mode {
                            OptimizerMode::One => "one_optimizer",
                            OptimizerMode::Two => "two_optimizers",
                        }
                        .into(),
                        x: None,
                        config: c,
                    }
                })
                .collect()),
            PresetName::LrSweep => sweep_members(
                &self.base,
                SweepParam::Lr,
                &self.values_or(LR_GRID.iter().map(|lr| lr * DESK_LR_SCALE).collect()),
            ),
            PresetName::BoundSweep => Ok(Vec::new()),
        }
    }
}

/// Outcome of a batch of member runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunBatch {
    pub results: Vec<RunResult>,
    pub failures: Vec<Failure>,
    /// Metric log of every completed run, keyed by (run, seed).
    pub logs: BTreeMap<(String, u64), MetricLog>,
}

fn teacher_key(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string(&(
        cfg.seed,
        &cfg.model,
        &cfg.task,
        &cfg.teacher,
    ))?)
}

/// Runs every member under every seed. A failing run is recorded and the
/// rest continue. Teachers are trained once per distinct (seed, model,
/// task, teacher settings). With `out`, each run leaves `metrics.csv` and
/// `student.ckpt` under `runs/<run>/seed<seed>/`.
pub fn run_members(members: &[Member], seeds: &[u64], out: Option<&Path>) -> RunBatch {
    let mut batch = RunBatch::default();
    let mut teachers: BTreeMap<String, (Dataset, EncoderModel)> = BTreeMap::new();
    for &seed in seeds {
        for m in members {
            let mut cfg = m.config.clone();
            cfg.seed = seed;
            let outcome = (|| -> Result<_> {
                let key = teacher_key(&cfg)?;
                if !teachers.contains_key(&key) {
                    let data = cfg.task.build()?;
                    let t = train_teacher(&cfg, &data)?;
                    if let Some(dir) = out {
                        let mut ck = crate::checkpoint::Checkpoint::new();
                        ck.put_model(&t.model)?;
                        let tdir = dir.join("teachers");
                        std::fs::create_dir_all(&tdir)?;
                        ck.save(&tdir.join(format!("seed{seed}_{}.ckpt", short_hash(&key))))?;
                    }
                    teachers.insert(key.clone(), (data, t.model));
                }
                let (data, teacher) = &teachers[&key];
                let o = run_spd(&cfg, teacher, data)?;
                if let Some(dir) = out {
                    let rdir = dir.join("runs").join(&m.run).join(format!("seed{seed}"));
                    std::fs::create_dir_all(&rdir)?;
                    o.log.write(&rdir.join("metrics.csv"))?;
                    o.checkpoint.save(&rdir.join("student.ckpt"))?;
                    std::fs::write(rdir.join("config.toml"), cfg.to_toml()?)?;
                }
                Ok(o)
            })();
            match outcome {
                Ok(o) => {
                    batch.results.push(RunResult {
                        run: m.run.clone(),
                        seed,
                        train_metric: o.train_metric,
                        dev_metric: o.dev_metric,
                    });
                    batch.logs.insert((m.run.clone(), seed), o.log);
                }
                Err(e) => batch.failures.push(Failure {
                    run: m.run.clone(),
                    seed,
                    error: e.to_string(),
                }),
            }
        }
    }
    batch
}

fn short_hash(s: &str) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(s.as_bytes())
        .iter()
        .take(4)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PresetReport {
    pub name: PresetName,
    pub batch: RunBatch,
    pub summary: BTreeMap<String, RunSummary>,
    pub bound: Vec<BoundReport>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes `summary.json`, `failures.json` and SVG charts for a batch.
/// Curves use the first seed that completed for each run; sweep charts
/// plot seed means against the sweep value.
pub fn write_batch_report(
    members: &[Member],
    batch: &RunBatch,
    out: &Path,
) -> Result<BTreeMap<String, RunSummary>> {
    std::fs::create_dir_all(out)?;
    let summary = if batch.results.is_empty() {
        BTreeMap::new()
    } else {
        report::summarize(&batch.results)?
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("failures.json"), &batch.failures)?;
    let charts = out.join("charts");
    std::fs::create_dir_all(&charts)?;
    let curves: Vec<(String, &MetricLog)> = members
        .iter()
        .filter_map(|m| {
            batch
                .logs
                .iter()
                .find(|((run, _), _)| run == &m.run)
                .map(|((run, seed), log)| (format!("{run} (seed {seed})"), log))
        })
        .collect();
    if !curves.is_empty() {
        for (column, file) in [
            ("gap", "gap.svg"),
            ("dev_metric", "dev.svg"),
            ("train_metric", "train.svg"),
            ("loss", "loss.svg"),
        ] {
            std::fs::write(
                charts.join(file),
                report::render_curves(column, column, &curves)?,
            )?;
        }
    }
    let swept: Vec<(f64, &RunSummary)> = members
        .iter()
        .filter_map(|m| Some((m.x?, summary.get(&m.run)?)))
        .collect();
    if !swept.is_empty() {
        let series = |name: &str, f: fn(&RunSummary) -> f64| Series {
            name: name.into(),
            points: swept.iter().map(|&(x, s)| (x, f(s))).collect(),
        };
        let chart = Chart {
            title: "final metrics".into(),
            x_label: "value".into(),
            y_label: "mean over seeds".into(),
            series: vec![
                series("train", |s| s.train_metric.mean),
                series("dev", |s| s.dev_metric.mean),
                series("gap", |s| s.gap.mean),
            ],
        };
        std::fs::write(charts.join("sweep.svg"), report::render_svg(&chart)?)?;
    }
    Ok(summary)
}

/// Executes a preset and writes its report directory.
pub fn run_preset(preset: &ExperimentPreset, out: &Path) -> Result<PresetReport> {
    let members = preset.members()?;
    std::fs::create_dir_all(out)?;
    write_json(
        &out.join("meta.json"),
        &serde_json::json!({
            "preset": preset.name.name(),
            "mirrors": preset.name.mirrors(),
            "seeds": preset.seeds,
            "runs": members.iter().map(|m| &m.run).collect::<Vec<_>>(),
        }),
    )?;
    std::fs::write(out.join("base.toml"), preset.base.to_toml()?)?;
    if preset.name == PresetName::BoundSweep {
        let bound = run_bound_sweep(&preset.bound, &preset.seeds, out)?;
        return Ok(PresetReport {
            name: preset.name,
            batch: RunBatch::default(),
            summary: BTreeMap::new(),
            bound,
        });
    }
    let batch = run_members(&members, &preset.seeds, Some(out));
    let summary = write_batch_report(&members, &batch, out)?;
    Ok(PresetReport {
        name: preset.name,
        batch,
        summary,
        bound: Vec::new(),
    })
}

/// Failure rate for every pool size and seed; writes `bound.json`,
/// `bound.csv` and a chart of the rate against n.
pub fn run_bound_sweep(sweep: &BoundSweep, seeds: &[u64], out: &Path) -> Result<Vec<BoundReport>> {
    if seeds.is_empty() {
        return Err(Error::Config("bound sweep needs at least one seed".into()));
    }
    let mut reports = Vec::new();
    for &seed in seeds {
        for &n in &sweep.ns {
            reports.push(failure_rate(
                n,
                sweep.epsilon,
                sweep.trials,
                &sweep.grid,
                seed,
            )?);
        }
    }
    write_bound_files(&reports, out)?;
    Ok(reports)
}

pub fn write_bound_files(reports: &[BoundReport], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_json(&out.join("bound.json"), &reports)?;
    let mut log = MetricLog::new([
        "row",
        "seed",
        "n",
        "epsilon",
        "trials",
        "failures",
        "delta_hat",
        "implied_c",
    ]);
    for (i, r) in reports.iter().enumerate() {
        log.push(vec![
            i.to_string(),
            r.seed.to_string(),
            r.n.to_string(),
            num(r.epsilon),
            r.trials.to_string(),
            r.failures.to_string(),
            num(r.delta_hat),
            crate::log::opt_num(r.implied_c),
        ])?;
    }
    log.write(&out.join("bound.csv"))?;
    let mut by_seed: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in reports {
        by_seed
            .entry(r.seed)
            .or_default()
            .push((r.n as f64, r.delta_hat));
    }
    if !by_seed.is_empty() {
        let chart = Chart {
            title: "subset-sum failure rate".into(),
            x_label: "n".into(),
            y_label: "delta_hat".into(),
            series: by_seed
                .into_iter()
                .map(|(seed, points)| Series {
                    name: format!("seed {seed}"),
                    points,
                })
                .collect(),
        };
        let charts = out.join("charts");
        std::fs::create_dir_all(&charts)?;
        std::fs::write(charts.join("bound.svg"), report::render_svg(&chart)?)?;
    }
    Ok(())
}
