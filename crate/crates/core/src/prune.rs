//! Magnitude pruning: top-k projection onto a sparsity budget, binary masks,
//! and the sparsity ramp used while pruning is active.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderLayer, PrunableMatrix};
use crate::tensor::Tensor;

/// Binary keep-mask shaped like the matrix it guards.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    pub fn from_bits(shape: &[usize], keep: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(Error::Contract(format!(
                "mask of {} bits cannot have shape {shape:?}",
                keep.len()
            )));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            keep,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn numel(&self) -> usize {
        self.keep.len()
    }

    pub fn zeros(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// `zeros / numel`, computed exactly from the counts.
    pub fn sparsity(&self) -> f64 {
        self.zeros() as f64 / self.numel() as f64
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim("mask", &self.shape, shape));
        }
        Ok(())
    }

    /// `W ← W ∘ M`.
    pub fn apply(&self, w: &mut Tensor) -> Result<()> {
        self.check(w.shape())?;
        self.apply_slice(w.data_mut());
        Ok(())
    }

    pub(crate) fn apply_slice(&self, values: &mut [f64]) {
        for (v, &k) in values.iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }

    /// True when every masked coordinate of `w` is exactly zero.
    pub fn holds(&self, w: &Tensor) -> bool {
        self.shape == w.shape()
            && w.data()
                .iter()
                .zip(&self.keep)
                .all(|(&v, &k)| k || v == 0.0)
    }
}

/// Number of entries to zero for target sparsity `theta` over `numel`
/// entries: `⌈numel·θ⌉`, treating products within 1e-9 of an integer as
/// that integer so that e.g. `9 · (3/9)` zeroes exactly 3.
pub fn zero_count(numel: usize, theta: f64) -> usize {
    let z = numel as f64 * theta;
    let r = z.round();
    let z = if (z - r).abs() < 1e-9 { r } else { z.ceil() };
    (z as usize).min(numel)
}

/// Euclidean projection of `w` onto `{sparsity ≥ θ}`: the largest-magnitude
/// `numel − ⌈numel·θ⌉` entries survive, ties broken toward lower flat index.
pub fn project(w: &Tensor, theta: f64) -> Result<(Tensor, Mask)> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::Contract(format!(
            "target sparsity must lie in [0, 1), got {theta}"
        )));
    }
    let n = w.numel();
    let keep_count = n - zero_count(n, theta);
    let mut order: Vec<usize> = (0..n).collect();
    let d = w.data();
    order.sort_by(|&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    for &i in &order[..keep_count] {
        keep[i] = true;
    }
    let mask = Mask {
        shape: w.shape().to_vec(),
        keep,
    };
    let mut out = w.clone();
    mask.apply(&mut out)?;
    Ok((out, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampMode {
    Linear,
    Cubic,
}

/// Sparsity ramp from 0 at step 0 to the per-layer target at `end_step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsitySchedule {
    /// Target applied to every layer unless `per_layer` overrides it.
    pub target: f64,
    pub per_layer: Option<Vec<f64>>,
    pub mode: RampMode,
    /// Step at which the target is reached; `None` means the end of the
    /// pruning phase.
    pub end_step: Option<usize>,
}

impl Default for SparsitySchedule {
    fn default() -> Self {
        SparsitySchedule {
            target: 0.5,
            per_layer: None,
            mode: RampMode::Cubic,
            end_step: None,
        }
    }
}

impl SparsitySchedule {
    pub fn targets(&self, num_layers: usize) -> Result<Vec<f64>> {
        let t = match &self.per_layer {
            Some(v) if v.len() != num_layers => {
                return Err(Error::Config(format!(
                    "per_layer sparsity needs {num_layers} entries, got {}",
                    v.len()
                )))
            }
            Some(v) => v.clone(),
            None => vec![self.target; num_layers],
        };
        if let Some(bad) = t.iter().find(|x| !(0.0..1.0).contains(*x)) {
            return Err(Error::Config(format!("sparsity {bad} outside [0, 1)")));
        }
        Ok(t)
    }

    /// Ramp value at step `t` for a layer with target `theta`, where the
    /// ramp ends at `end`. Steps past `end` hold `theta`.
    pub fn ramp(&self, theta: f64, t: usize, end: usize) -> f64 {
        if end == 0 || t >= end {
            return theta;
        }
        let frac = t as f64 / end as f64;
        match self.mode {
            RampMode::Linear => theta * frac,
            RampMode::Cubic => theta * (1.0 - (1.0 - frac).powi(3)),
        }
    }
}

/// Current sparsity at step `t` of a ramp ending at `end`; clamps past the end.
pub fn step_sparsity(schedule: &SparsitySchedule, theta: f64, t: usize, end: usize) -> f64 {
    schedule.ramp(theta, t, end)
}

/// Masks of every prunable matrix of one encoder layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityMask {
    pub layer: usize,
    pub masks: [Mask; 6],
}

impl SparsityMask {
    pub fn dense(layer_index: usize, layer: &EncoderLayer) -> Self {
        SparsityMask {
            layer: layer_index,
            masks: PrunableMatrix::ALL.map(|m| Mask::ones(layer.matrix(m).shape())),
        }
    }

    pub fn get(&self, which: PrunableMatrix) -> &Mask {
        &self.masks[index_of(which)]
    }

    /// Zeros over all six matrices divided by their total size.
    pub fn realized_sparsity(&self) -> f64 {
        let zeros: usize = self.masks.iter().map(Mask::zeros).sum();
        let numel: usize = self.masks.iter().map(Mask::numel).sum();
        zeros as f64 / numel as f64
    }

    /// Re-projects each prunable matrix of `layer` to sparsity `theta`.
    pub fn reproject(&mut self, layer: &mut EncoderLayer, theta: f64) -> Result<()> {
        for (i, which) in PrunableMatrix::ALL.into_iter().enumerate() {
            let (w, mask) = project(layer.matrix(which), theta)?;
            *layer.matrix_mut(which) = w;
            self.masks[i] = mask;
        }
        Ok(())
    }

    pub fn holds(&self, layer: &EncoderLayer) -> bool {
        PrunableMatrix::ALL
            .into_iter()
            .all(|m| self.get(m).holds(layer.matrix(m)))
    }
}

fn index_of(which: PrunableMatrix) -> usize {
    PrunableMatrix::ALL
        .iter()
        .position(|&m| m == which)
        .unwrap()
}

/// `w ← w ∘ M` on every prunable matrix of `layer`.
pub fn apply_mask(layer: &mut EncoderLayer, mask: &SparsityMask) -> Result<()> {
    for which in PrunableMatrix::ALL {
        mask.get(which).apply(layer.matrix_mut(which))?;
    }
    Ok(())
}
