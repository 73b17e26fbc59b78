//! Subset-sum approximation experiments: how well sums of subsets of random
//! weights cover every target in `[-0.5, 0.5]`.
//!
//! Weights are drawn on the dyadic grid `k / 2^40`, so every subset sum of up
//! to 30 weights is exact in `f64` and the meet-in-the-middle search returns
//! the same error as naive enumeration, bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const GRID_BITS: i32 = 40;
/// Largest instance the exact search accepts.
pub const MAX_EXACT_N: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetInstance {
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl SubsetInstance {
    /// `n` weights uniform on `[-1, 1]`, quantized to multiples of `2^-40`.
    pub fn sample(n: usize, rng: &mut Rng) -> Self {
        let scale = (1i64 << GRID_BITS) as f64;
        let lim = 1i64 << GRID_BITS;
        SubsetInstance {
            weights: (0..n)
                .map(|_| rng.int_inclusive(-lim, lim) as f64 / scale)
                .collect(),
            seed: rng.seed(),
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| w.is_nan() || w.abs() > 1.0) {
            return Err(Error::Input("subset weights must lie in [-1, 1]".into()));
        }
        Ok(SubsetInstance { weights, seed: 0 })
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }
}

/// Every subset sum of `w`, tagged with its bitmask over `w`.
fn subset_sums(w: &[f64]) -> Vec<(f64, u32)> {
    let mut out = vec![(0.0, 0u32)];
    for (i, &x) in w.iter().enumerate() {
        let len = out.len();
        for j in 0..len {
            let (s, m) = out[j];
            out.push((s + x, m | 1 << i));
        }
    }
    out
}

fn mask_to_subset(mask: u64, n: usize) -> Vec<usize> {
    (0..n).filter(|&i| mask >> i & 1 == 1).collect()
}

/// Precomputed halves for repeated best-subset queries on one instance.
pub struct SubsetSearch {
    n: usize,
    split: usize,
    left: Vec<(f64, u32)>,
    right: Vec<(f64, u32)>,
}

impl SubsetSearch {
    pub fn new(inst: &SubsetInstance) -> Result<Self> {
        let n = inst.n();
        if n > MAX_EXACT_N {
            return Err(Error::Contract(format!(
                "exact search supports n <= {MAX_EXACT_N}, got {n}; use sampled mode"
            )));
        }
        let split = n / 2;
        let left = subset_sums(&inst.weights[..split]);
        let mut right = subset_sums(&inst.weights[split..]);
        right.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(SubsetSearch {
            n,
            split,
            left,
            right,
        })
    }

    /// `(min |target - Σ_G w|, G)` with `G` as 0-based indices.
    pub fn best(&self, target: f64) -> (f64, Vec<usize>) {
        let mut best = (f64::INFINITY, 0u64);
        for &(a, ma) in &self.left {
            let want = target - a;
            let pos = self.right.partition_point(|&(b, _)| b < want);
            let lo = pos.saturating_sub(1);
            let hi = (pos + 1).min(self.right.len() - 1);
            for &(b, mb) in &self.right[lo..=hi] {
                let err = (target - (a + b)).abs();
                let mask = ma as u64 | (mb as u64) << self.split;
                if err < best.0 || (err == best.0 && mask < best.1) {
                    best = (err, mask);
                }
            }
        }
        (best.0, mask_to_subset(best.1, self.n))
    }
}

/// Exact best subset via meet-in-the-middle; `n ≤ 30`.
pub fn best_subset_error(inst: &SubsetInstance, target: f64) -> Result<(f64, Vec<usize>)> {
    Ok(SubsetSearch::new(inst)?.best(target))
}

/// Exact best subset by listing all `2^n` sums; reference for small `n`.
pub fn best_subset_error_naive(inst: &SubsetInstance, target: f64) -> Result<(f64, Vec<usize>)> {
    let n = inst.n();
    if n > 24 {
        return Err(Error::Contract(format!(
            "naive enumeration limited to n <= 24, got {n}"
        )));
    }
    let mut best = (f64::INFINITY, 0u64);
    for mask in 0..1u64 << n {
        let s: f64 = (0..n)
            .filter(|&i| mask >> i & 1 == 1)
            .map(|i| inst.weights[i])
            .sum();
        let err = (target - s).abs();
        if err < best.0 {
            best = (err, mask);
        }
    }
    Ok((best.0, mask_to_subset(best.1, n)))
}

/// Evenly spaced targets `lo, lo + step, …, hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for TargetGrid {
    fn default() -> Self {
        TargetGrid {
            lo: -0.5,
            hi: 0.5,
            step: 0.01,
        }
    }
}

impl TargetGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if self.step.is_nan()
            || self.step <= 0.0
            || self.lo.is_nan()
            || self.hi.is_nan()
            || self.hi < self.lo
        {
            return Err(Error::Contract(format!("invalid target grid {self:?}")));
        }
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        Ok((0..=count)
            .map(|i| self.lo + i as f64 * self.step)
            .collect())
    }
}

/// Worst best-subset error over the grid targets.
///
/// Best-subset error is 1-Lipschitz in the target, so the true supremum over
/// `[lo, hi]` exceeds this value by at most `step / 2`.
pub fn coverage_epsilon(inst: &SubsetInstance, grid: &TargetGrid) -> Result<f64> {
    let search = SubsetSearch::new(inst)?;
    Ok(grid
        .points()?
        .into_iter()
        .map(|w| search.best(w).0)
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub epsilon: f64,
    /// Fraction of instances whose coverage error exceeds `epsilon`.
    pub delta_hat: f64,
    pub failures: usize,
    pub trials: usize,
    pub grid: TargetGrid,
    pub seed: u64,
    /// `log(2 / δ̂)`, undefined when no trial failed.
    pub log_two_over_delta: Option<f64>,
    /// `n / log(2 / δ̂)`: the constant that would make the sample size
    /// requirement tight at this point.
    pub implied_c: Option<f64>,
}

/// Stream index of trial `trial`. Trials share streams across `n`, so the
/// instance for a larger `n` extends the one for a smaller `n`.
fn trial_stream(trial: usize) -> u64 {
    trial as u64
}

/// Monte Carlo estimate of the probability that `n` random weights fail to
/// cover the grid within `epsilon`.
pub fn failure_rate(
    n: usize,
    epsilon: f64,
    trials: usize,
    grid: &TargetGrid,
    seed: u64,
) -> Result<BoundReport> {
    if trials == 0 {
        return Err(Error::Contract(
            "failure_rate needs at least one trial".into(),
        ));
    }
    let mut failures = 0;
    for trial in 0..trials {
        let inst = SubsetInstance::sample(n, &mut Rng::derive(seed, trial_stream(trial)));
        if coverage_epsilon(&inst, grid)? > epsilon {
            failures += 1;
        }
    }
    let delta_hat = failures as f64 / trials as f64;
    let log_two_over_delta = (failures > 0).then(|| (2.0 / delta_hat).ln());
    Ok(BoundReport {
        n,
        epsilon,
        delta_hat,
        failures,
        trials,
        grid: *grid,
        seed,
        log_two_over_delta,
        implied_c: log_two_over_delta.map(|l| n as f64 / l),
    })
}

/// Least-squares slope through the origin of `n` against `log(2/δ̂)` over
/// the points where `δ̂ > 0`.
pub fn fit_c(reports: &[BoundReport]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = reports
        .iter()
        .filter_map(|r| Some((r.log_two_over_delta?, r.n as f64)))
        .collect();
    let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
    (sxx > 0.0).then(|| pts.iter().map(|(x, y)| x * y).sum::<f64>() / sxx)
}

/// Approximates every entry of a value-projection matrix (entries in
/// `[-0.5, 0.5]`) by the best subset sum of its own pool of `n` random
/// weights. Returns the approximation and its largest entry error. For a
/// single-token input the attention output is `x W`, so the output error is
/// at most `‖x‖₁` times the entry error.
pub fn approximate_matrix(target: &Tensor, n: usize, seed: u64) -> Result<(Tensor, f64)> {
    let mut out = target.clone();
    let mut worst: f64 = 0.0;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if v.abs() > 0.5 {
            return Err(Error::Input(format!(
                "target entry {v} outside [-0.5, 0.5]"
            )));
        }
        let inst = SubsetInstance::sample(n, &mut Rng::derive(seed, i as u64));
        let (err, g) = best_subset_error(&inst, *v)?;
        *v = g.iter().map(|&k| inst.weights[k]).sum();
        worst = worst.max(err);
    }
    Ok((out, worst))
}
