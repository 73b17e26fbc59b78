//! Acceptance run: one PASS/FAIL line per criterion, each timed against its
//! runtime budget. Runs without the libtest harness so the lines always
//! print; exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::grad::{
    case_error, end_to_end_error, kd_configs, layer_loss_error, op_cases, END_TO_END_TOL, OP_TOL,
    SEEDS,
};
use common::{binomial_sigma, brute_force_projection_cost, random_tensor};
use spd_core::checkpoint::Checkpoint;
use spd_core::config::{RunConfig, Strategy};
use spd_core::data::Dataset;
use spd_core::graft::{draw_mask, GraftSchedule};
use spd_core::model::{EncoderModel, PrunableMatrix};
use spd_core::preset::{parity_config, small_data_config};
use spd_core::prune::{project, zero_count, SparsityMask};
use spd_core::rng::Rng;
use spd_core::subsum::{
    best_subset_error, best_subset_error_naive, failure_rate, SubsetInstance, TargetGrid,
};
use spd_core::train::{run_spd, train_teacher, with_strategy, SpdRun};

type Outcome = Result<String, String>;

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
}

const CRITERIA: [Criterion; 9] = [
    Criterion {
        id: 1,
        name: "gradient correctness",
        budget: Duration::from_secs(60),
    },
    Criterion {
        id: 2,
        name: "projection exactness and optimality",
        budget: Duration::from_secs(60),
    },
    Criterion {
        id: 3,
        name: "mask persistence",
        budget: Duration::from_secs(300),
    },
    Criterion {
        id: 4,
        name: "grafting statistics",
        budget: Duration::from_secs(10),
    },
    Criterion {
        id: 5,
        name: "degeneracy equivalence",
        budget: Duration::from_secs(300),
    },
    Criterion {
        id: 6,
        name: "overfitting-gap ordering",
        budget: Duration::from_secs(1800),
    },
    Criterion {
        id: 7,
        name: "end-to-end recovery",
        budget: Duration::from_secs(900),
    },
    Criterion {
        id: 8,
        name: "subset-sum bound",
        budget: Duration::from_secs(600),
    },
    Criterion {
        id: 9,
        name: "reproducibility",
        budget: Duration::from_secs(300),
    },
];

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: spd_core::Error) -> String {
    e.to_string()
}

/// Parity teachers by seed, shared by the criteria that distill them.
struct Teachers {
    base: RunConfig,
    data: Dataset,
    models: BTreeMap<u64, (EncoderModel, f64)>,
}

impl Teachers {
    fn new() -> Self {
        let base = parity_config();
        let data = base.task.build().expect("parity task");
        Teachers {
            base,
            data,
            models: BTreeMap::new(),
        }
    }

    fn config(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            ..self.base.clone()
        }
    }

    fn get(&mut self, seed: u64) -> Result<(EncoderModel, f64), String> {
        if !self.models.contains_key(&seed) {
            let out = train_teacher(&self.config(seed), &self.data).map_err(err)?;
            self.models.insert(seed, (out.model, out.dev_metric));
        }
        Ok(self.models[&seed].clone())
    }
}

fn gradients() -> Outcome {
    let mut worst_op = (0.0f64, "");
    for case in op_cases() {
        let e = case_error(&case);
        if e > worst_op.0 {
            worst_op = (e, case.name);
        }
    }
    ensure(worst_op.0 < OP_TOL, || {
        format!(
            "{} relative error {:e} >= {OP_TOL:e}",
            worst_op.1, worst_op.0
        )
    })?;
    let mut worst_e2e = (0.0f64, String::new());
    for seed in 0..SEEDS {
        for cfg in &kd_configs() {
            let (e, name) = end_to_end_error(seed, cfg);
            if e > worst_e2e.0 {
                worst_e2e = (e, format!("seed {seed} {name}"));
            }
        }
        for i in 1..=3 {
            let e = layer_loss_error(seed, i);
            if e > worst_e2e.0 {
                worst_e2e = (e, format!("seed {seed} layer loss {i}"));
            }
        }
    }
    ensure(worst_e2e.0 < END_TO_END_TOL, || {
        format!(
            "{} relative error {:e} >= {END_TO_END_TOL:e}",
            worst_e2e.1, worst_e2e.0
        )
    })?;
    Ok(format!(
        "worst per-op {:.1e} ({}), worst end-to-end {:.1e} ({}), {SEEDS} seeds",
        worst_op.0, worst_op.1, worst_e2e.0, worst_e2e.1
    ))
}

fn projection() -> Outcome {
    let mut checked = 0;
    for seed in 0..100u64 {
        let mut rng = Rng::new(seed);
        let w = random_tensor(&[3, 3], &mut rng);
        let arbitrary = rng.uniform_range(0.0, 0.999);
        let integral = (0..9).map(|k| k as f64 / 9.0);
        for theta in integral.chain([arbitrary]) {
            let (p, mask) = project(&w, theta).map_err(err)?;
            let zeros = 9 - mask.bits().iter().filter(|k| **k).count();
            ensure(mask.sparsity() >= theta, || {
                format!(
                    "seed {seed} theta {theta}: sparsity {} below target",
                    mask.sparsity()
                )
            })?;
            if theta != arbitrary {
                let keep = (9.0 * (1.0 - theta) - 1e-9).ceil() as usize;
                ensure(9 - zeros == keep, || {
                    format!("seed {seed} theta {theta}: kept {} not {keep}", 9 - zeros)
                })?;
            }
            ensure(zeros == zero_count(9, theta) && mask.holds(&p), || {
                format!("seed {seed} theta {theta}: mask inconsistent")
            })?;
            let cost: f64 = w
                .data()
                .iter()
                .zip(p.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let best = brute_force_projection_cost(w.data(), zeros);
            ensure((cost - best).abs() <= 1e-12, || {
                format!("seed {seed} theta {theta}: cost {cost} vs brute force {best}")
            })?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} projections of 100 random 3x3 matrices optimal over all masks"
    ))
}

fn mask_persistence(teachers: &mut Teachers) -> Outcome {
    let (teacher, _) = teachers.get(0)?;
    let mut cfg = teachers.config(0);
    cfg.sparsity.target = 0.5;
    cfg.graft = GraftSchedule {
        t1: 300,
        t2: 700,
        t3: 1000,
        ..cfg.graft
    };
    let t1 = cfg.graft.t1;
    let mut run = SpdRun::new(&cfg, &teacher, &teachers.data).map_err(err)?;
    let mut frozen: Option<Vec<SparsityMask>> = None;
    let mut checked = 0;
    run.run_with(|r, rec| {
        if rec.step < t1 {
            return Ok(());
        }
        let masks = r.masks();
        let snapshot = frozen.get_or_insert_with(|| masks.to_vec());
        let still = masks == &snapshot[..]
            && masks.iter().zip(r.bank()).all(|(m, l)| m.holds(l))
            && masks.iter().all(|m| m.realized_sparsity() >= 0.5);
        if !still {
            return Err(spd_core::Error::Contract(format!(
                "pruned coordinate moved at step {}",
                rec.step
            )));
        }
        checked += 1;
        Ok(())
    })
    .map_err(err)?;
    let zeros: usize = frozen
        .unwrap_or_default()
        .iter()
        .flat_map(|m| PrunableMatrix::ALL.map(|w| m.get(w).zeros()))
        .sum();
    Ok(format!(
        "{zeros} pruned coordinates exactly zero at all {checked} steps from t1 = {t1} to 1000"
    ))
}

fn grafting() -> Outcome {
    const DRAWS: usize = 10_000;
    const LAYERS: usize = 4;
    let mut worst = 0.0f64;
    for (i, p) in [0.2, 0.6, 0.9].into_iter().enumerate() {
        let mut rng = Rng::new(100 + i as u64);
        let mut hits = [0usize; LAYERS];
        for _ in 0..DRAWS {
            for (h, b) in hits.iter_mut().zip(draw_mask(p, LAYERS, &mut rng).bits) {
                *h += usize::from(b);
            }
        }
        let band = 3.0 * binomial_sigma(p, DRAWS);
        for (layer, h) in hits.iter().enumerate() {
            let freq = *h as f64 / DRAWS as f64;
            ensure((freq - p).abs() <= band, || {
                format!("p {p} layer {layer}: frequency {freq} outside {p} ± {band:.4}")
            })?;
            worst = worst.max((freq - p).abs() / band);
        }
    }
    let mut rng = Rng::new(7);
    for _ in 0..1000 {
        let t1 = rng.below(500);
        let t2 = t1 + 1 + rng.below(500);
        let p0 = rng.uniform_range(0.01, 1.0);
        let g = GraftSchedule {
            p0,
            t1,
            t2,
            t3: t2 + rng.below(100),
        };
        ensure(
            g.probability_at(t1) == p0 && g.probability_at(t2) == 1.0,
            || format!("schedule {g:?} misses its boundary values"),
        )?;
    }
    Ok(format!(
        "largest deviation {:.2} of the 3-sigma band; schedule boundaries exact on 1000 draws",
        worst
    ))
}

fn degeneracy(teachers: &mut Teachers) -> Outcome {
    let (teacher, _) = teachers.get(0)?;
    let mut cfg = teachers.config(0);
    cfg.sparsity.target = 0.0;
    cfg.graft.p0 = 1.0;
    let spd = run_spd(
        &with_strategy(&cfg, Strategy::ProgKd),
        &teacher,
        &teachers.data,
    )
    .map_err(err)?;
    let kd = run_spd(
        &with_strategy(&cfg, Strategy::NoProgKd),
        &teacher,
        &teachers.data,
    )
    .map_err(err)?;
    let (a, b) = (spd.log.to_csv(), kd.log.to_csv());
    ensure(a == b, || "metrics CSV differs between the two runs".into())?;
    let (ca, cb) = (spd.student.named_params(), kd.student.named_params());
    ensure(ca == cb, || "student weights differ".into())?;
    Ok(format!(
        "{} CSV bytes and all student weights identical",
        a.len()
    ))
}

fn gap_ordering() -> Outcome {
    let base = small_data_config();
    let data = base.task.build().map_err(err)?;
    let runs: [(&str, Strategy, f64); 5] = [
        ("prog_kd@0.8", Strategy::ProgKd, 0.8),
        ("no_prog_kd@0.8", Strategy::NoProgKd, 0.8),
        ("no_prog_no_kd@0.8", Strategy::NoProgNoKd, 0.8),
        ("prog_kd@0.95", Strategy::ProgKd, 0.95),
        ("prog_kd@0", Strategy::ProgKd, 0.0),
    ];
    let seeds = [0u64, 1, 2, 3, 4];
    let mut gaps: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in seeds {
        let cfg = RunConfig {
            seed,
            ..base.clone()
        };
        let teacher = train_teacher(&cfg, &data).map_err(err)?.model;
        for (name, strategy, theta) in runs {
            let mut c = with_strategy(&cfg, strategy);
            c.sparsity.target = theta;
            let out = run_spd(&c, &teacher, &data).map_err(err)?;
            gaps.entry(name).or_default().push(out.gap());
        }
    }
    let mean = |k: &str| gaps[k].iter().sum::<f64>() / gaps[k].len() as f64;
    let (pk, k, none) = (
        mean("prog_kd@0.8"),
        mean("no_prog_kd@0.8"),
        mean("no_prog_no_kd@0.8"),
    );
    let (hi, lo) = (mean("prog_kd@0.95"), mean("prog_kd@0"));
    let mark = |ok: bool| if ok { "holds" } else { "fails" };
    let detail = format!(
        "mean gap over {} seeds: prog_kd {pk:.4} < no_prog_kd {k:.4} {}; \
         prog_kd {pk:.4} < no_prog_no_kd {none:.4} {}; \
         prog_kd at 0.95 {hi:.4} > at 0 {lo:.4} {}",
        seeds.len(),
        mark(pk < k),
        mark(pk < none),
        mark(hi > lo)
    );
    ensure(pk < k && pk < none && hi > lo, || detail.clone())?;
    Ok(detail)
}

fn recovery(teachers: &mut Teachers) -> Outcome {
    let (mut t_sum, mut s_sum) = (0.0, 0.0);
    let seeds = [0u64, 1, 2];
    let mut per = Vec::new();
    for seed in seeds {
        let (teacher, t_dev) = teachers.get(seed)?;
        let mut cfg = teachers.config(seed);
        cfg.sparsity.target = 0.5;
        let out = run_spd(&cfg, &teacher, &teachers.data).map_err(err)?;
        t_sum += t_dev;
        s_sum += out.dev_metric;
        per.push(format!("{:.3}/{t_dev:.3}", out.dev_metric));
    }
    let n = seeds.len() as f64;
    let ratio = (s_sum / n) / (t_sum / n);
    let detail = format!(
        "student/teacher dev {}; mean recovery {:.1}%",
        per.join(", "),
        100.0 * ratio
    );
    ensure(ratio >= 0.95, || detail.clone())?;
    Ok(detail)
}

fn bound() -> Outcome {
    let mut rng = Rng::new(8);
    for i in 0..50 {
        let n = 1 + i % 20;
        let inst = SubsetInstance::sample(n, &mut rng);
        for _ in 0..4 {
            let target = rng.uniform_range(-0.5, 0.5);
            let fast = best_subset_error(&inst, target).map_err(err)?;
            let slow = best_subset_error_naive(&inst, target).map_err(err)?;
            ensure(fast.0 == slow.0, || {
                format!(
                    "instance {i} n {n} target {target}: {} vs {}",
                    fast.0, slow.0
                )
            })?;
        }
    }

    let grid = TargetGrid::default();
    let ns = [4usize, 8, 12, 16, 20];
    let reports = ns
        .iter()
        .map(|&n| failure_rate(n, 0.05, 500, &grid, 0))
        .collect::<spd_core::Result<Vec<_>>>()
        .map_err(err)?;
    for w in reports.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let sigma = (binomial_sigma(a.delta_hat, a.trials).powi(2)
            + binomial_sigma(b.delta_hat, b.trials).powi(2))
        .sqrt();
        ensure(b.delta_hat <= a.delta_hat + 2.0 * sigma, || {
            format!(
                "delta_hat rises from {} at n {} to {} at n {}",
                a.delta_hat, a.n, b.delta_hat, b.n
            )
        })?;
    }
    for &n in &ns {
        for eps in [0.5, 0.75] {
            let r = failure_rate(n, eps, 100, &grid, 1).map_err(err)?;
            ensure(r.delta_hat == 0.0, || {
                format!("n {n} epsilon {eps}: delta_hat {}", r.delta_hat)
            })?;
        }
    }
    let curve: Vec<String> = reports
        .iter()
        .map(|r| format!("{}:{}", r.n, r.delta_hat))
        .collect();
    Ok(format!(
        "MITM = enumeration on 50 instances; delta_hat(n) at epsilon 0.05 = [{}]; zero for epsilon >= 0.5",
        curve.join(" ")
    ))
}

fn reproducibility() -> Outcome {
    let mut cfg = parity_config();
    cfg.seed = 11;
    cfg.teacher.steps = 400;
    cfg.graft = GraftSchedule {
        t1: 100,
        t2: 200,
        t3: 250,
        ..cfg.graft
    };
    let data = cfg.task.build().map_err(err)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files: Vec<Vec<Vec<u8>>> = Vec::new();
    for round in 0..2 {
        let out = dir.path().join(format!("round{round}"));
        std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
        let t = train_teacher(&cfg, &data).map_err(err)?;
        let mut ck = Checkpoint::new();
        ck.put_model(&t.model).map_err(err)?;
        ck.save(&out.join("teacher.ckpt")).map_err(err)?;
        t.log.write(&out.join("teacher.csv")).map_err(err)?;
        let s = run_spd(&cfg, &t.model, &data).map_err(err)?;
        s.log.write(&out.join("metrics.csv")).map_err(err)?;
        s.checkpoint.save(&out.join("student.ckpt")).map_err(err)?;
        let names = ["teacher.ckpt", "teacher.csv", "metrics.csv", "student.ckpt"];
        files.push(
            names
                .iter()
                .map(|n| std::fs::read(out.join(n)))
                .collect::<std::io::Result<_>>()
                .map_err(|e| e.to_string())?,
        );
    }
    ensure(files[0] == files[1], || {
        "outputs differ between identical runs".into()
    })?;
    let student = &files[0][3];
    let back = Checkpoint::from_bytes(student).map_err(err)?;
    ensure(&back.to_bytes().map_err(err)? == student, || {
        "checkpoint round trip changed bytes".into()
    })?;
    let bytes: usize = files[0].iter().map(Vec::len).sum();
    Ok(format!(
        "{bytes} bytes over 4 files identical across two runs; round trip bit-exact"
    ))
}

fn main() -> ExitCode {
    let mut teachers = Teachers::new();
    let mut failed = 0;
    for c in &CRITERIA {
        let start = Instant::now();
        let outcome = match c.id {
            1 => gradients(),
            2 => projection(),
            3 => mask_persistence(&mut teachers),
            4 => grafting(),
            5 => degeneracy(&mut teachers),
            6 => gap_ordering(),
            7 => recovery(&mut teachers),
            8 => bound(),
            _ => reproducibility(),
        };
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let (verdict, detail) = match (&outcome, in_budget) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("over budget; {d}")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {}: {verdict} {} ({:.1}s of {}s) {detail}",
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        CRITERIA.len() - failed,
        CRITERIA.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
