//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's numeric kernels.

#![allow(dead_code)]

pub mod grad;

use spd_core::data::{Batch, Example};
use spd_core::model::{EncoderModel, ModelConfig};
use spd_core::rng::Rng;
use spd_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    rel_err_floor(a, b, 1e-300)
}

/// Relative error with the denominator held at least `floor`. Gradients
/// that vanish identically (a key bias under softmax shift invariance)
/// then compare against finite-difference round-off instead of zero.
pub fn rel_err_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale.max(floor)
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    c
}

/// Smallest squared distance from `w` to any matrix with at least
/// `zeros` zero entries, by enumerating every support of size
/// `numel − zeros`.
pub fn brute_force_projection_cost(w: &[f64], zeros: usize) -> f64 {
    let n = w.len();
    assert!(n <= 16);
    let mut best = f64::INFINITY;
    for bits in 0u32..(1 << n) {
        if (bits.count_ones() as usize) != n - zeros {
            continue;
        }
        let cost: f64 = (0..n)
            .filter(|&i| bits >> i & 1 == 0)
            .map(|i| w[i] * w[i])
            .sum();
        best = best.min(cost);
    }
    best
}

/// Closest subset sum to `target` by plain enumeration.
pub fn brute_force_subset(weights: &[f64], target: f64) -> f64 {
    let n = weights.len();
    let mut best = f64::INFINITY;
    for bits in 0u64..(1 << n) {
        let s: f64 = (0..n)
            .filter(|&i| bits >> i & 1 == 1)
            .map(|i| weights[i])
            .sum();
        best = best.min((s - target).abs());
    }
    best
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        d_ff: 12,
        vocab_size: 10,
        max_seq_len: 8,
        num_classes: 3,
        position_embeddings: true,
    }
}

pub fn tiny_model(seed: u64) -> EncoderModel {
    EncoderModel::new(tiny_config(), &mut Rng::new(seed)).unwrap()
}

/// Batch of three rows with different lengths, so padding is exercised.
pub fn ragged_batch(seed: u64) -> Batch {
    let mut rng = Rng::new(seed ^ 0x5eed);
    let rows: Vec<Example> = [5usize, 3, 6]
        .iter()
        .enumerate()
        .map(|(r, &len)| {
            let mut tokens = vec![2];
            tokens.extend((1..len).map(|_| 4 + rng.below(6)));
            let segments = (0..len).map(|i| usize::from(i >= len / 2)).collect();
            Example {
                tokens,
                segments,
                label: r % 3,
            }
        })
        .collect();
    Batch::from_examples(&rows.iter().collect::<Vec<_>>()).unwrap()
}

/// Binomial standard deviation of a frequency estimate.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
