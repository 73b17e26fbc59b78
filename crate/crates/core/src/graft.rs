//! Grafting schedule, per-step Bernoulli layer masks, and the grafted model
//! that routes each layer through either the frozen teacher or a student
//! module.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{forward_parts, BoundForward, EncoderLayer, EncoderModel};
use crate::rng::Rng;
use crate::tape::Tape;

/// Step boundaries and initial probability of the three-phase schedule.
///
/// Phase 1 `[0, t1)` grafts with `p0`, phase 2 `[t1, t2)` ramps linearly to
/// 1, phase 3 `[t2, t3)` keeps `p = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraftSchedule {
    pub p0: f64,
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
}

impl Default for GraftSchedule {
    fn default() -> Self {
        GraftSchedule {
            p0: 0.6,
            t1: 600,
            t2: 1000,
            t3: 1200,
        }
    }
}

impl GraftSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 <= 1.0) {
            return Err(Error::Config(format!(
                "p0 must lie in (0, 1], got {}",
                self.p0
            )));
        }
        if !(self.t1 < self.t2 && self.t2 <= self.t3) {
            return Err(Error::Config(format!(
                "need t1 < t2 <= t3, got {} / {} / {}",
                self.t1, self.t2, self.t3
            )));
        }
        Ok(())
    }

    /// Per-step increment `k = (1 - p0) / (t2 - t1)`.
    pub fn slope(&self) -> f64 {
        (1.0 - self.p0) / (self.t2 - self.t1) as f64
    }

    pub fn probability_at(&self, t: usize) -> f64 {
        if t < self.t1 {
            self.p0
        } else if t < self.t2 {
            (self.slope() * (t - self.t1) as f64 + self.p0).min(1.0)
        } else {
            1.0
        }
    }

    /// 1, 2 or 3.
    pub fn phase(&self, t: usize) -> u8 {
        if t < self.t1 {
            1
        } else if t < self.t2 {
            2
        } else {
            3
        }
    }
}

/// Which encoder layers are served by their student module this step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraftMask {
    pub bits: Vec<bool>,
}

impl GraftMask {
    pub fn all(n: usize, on: bool) -> Self {
        GraftMask { bits: vec![on; n] }
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `"1010"`-style rendering, layer 1 first.
    pub fn render(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }
}

/// `n` independent Bernoulli(`p`) draws, layer 1 first.
pub fn draw_mask(p: f64, n: usize, rng: &mut Rng) -> GraftMask {
    GraftMask {
        bits: (0..n).map(|_| rng.bernoulli(p)).collect(),
    }
}

/// Teacher with some layers swapped for student modules.
#[derive(Clone, Copy, Debug)]
pub struct GraftedModel<'a> {
    teacher: &'a EncoderModel,
    bank: &'a [EncoderLayer],
    mask: &'a GraftMask,
}

pub fn compose_grafted<'a>(
    teacher: &'a EncoderModel,
    bank: &'a [EncoderLayer],
    mask: &'a GraftMask,
) -> Result<GraftedModel<'a>> {
    let n = teacher.layers.len();
    if bank.len() != n || mask.bits.len() != n {
        return Err(Error::Contract(format!(
            "teacher has {n} layers, bank {}, mask {}",
            bank.len(),
            mask.bits.len()
        )));
    }
    if !teacher
        .layers
        .iter()
        .zip(bank)
        .all(|(t, s)| t.same_architecture(s))
    {
        return Err(Error::Contract(
            "student module differs in architecture from its teacher layer".into(),
        ));
    }
    Ok(GraftedModel {
        teacher,
        bank,
        mask,
    })
}

impl<'a> GraftedModel<'a> {
    pub fn layer(&self, i: usize) -> &'a EncoderLayer {
        if self.mask.bits[i] {
            &self.bank[i]
        } else {
            &self.teacher.layers[i]
        }
    }

    /// Forward pass in which only grafted student modules are trainable.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<BoundForward> {
        let layers: Vec<(&EncoderLayer, bool)> = (0..self.bank.len())
            .map(|i| (self.layer(i), self.mask.bits[i]))
            .collect();
        forward_parts(tape, self.teacher, &layers, false, batch)
    }
}
