//! AdamW with decoupled weight decay and warmup-then-linear-decay learning
//! rates, plus the two-optimizer split used by the distillation loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::prune::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Warmup length as a fraction of the optimizer's span.
    pub warmup_frac: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.06,
            clip_norm: None,
        }
    }
}

/// Learning rates exposed as named presets.
pub const LR_GRID: [f64; 5] = [3e-5, 1e-4, 3.2e-4, 5e-4, 6.4e-4];

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.warmup_frac)
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }

    pub fn schedule(&self, total_steps: usize) -> LrSchedule {
        LrSchedule {
            peak_lr: self.lr,
            warmup_steps: (self.warmup_frac * total_steps as f64).round() as usize,
            total_steps,
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, t: usize) -> f64 {
        if t >= self.total_steps {
            return 0.0;
        }
        if t < self.warmup_steps {
            return self.peak_lr * t as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.peak_lr * (self.total_steps - t) as f64 / span
    }
}

/// Moments and step count of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    states: BTreeMap<String, ParamState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&ParamState> {
        self.states.get(name)
    }

    pub fn states(&self) -> &BTreeMap<String, ParamState> {
        &self.states
    }

    /// One update of every `(name, param, grad)` triple at learning rate
    /// `lr`. All gradients are checked before any parameter moves, so a
    /// failed step leaves every parameter and moment untouched.
    pub fn step(&mut self, lr: f64, params: &mut [(&str, &mut Tensor, &Tensor)]) -> Result<()> {
        for (name, p, g) in params.iter() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {name} at flat index {i}"
                )));
            }
        }
        let clip = match self.config.clip_norm {
            Some(c) => {
                let norm = params
                    .iter()
                    .flat_map(|(_, _, g)| g.data())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let c = &self.config;
        for (name, p, g) in params.iter_mut() {
            let st = self
                .states
                .entry(name.to_string())
                .or_insert_with(|| ParamState {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                    step: 0,
                });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let w = p.data_mut();
            for (i, (wi, gi)) in w.iter_mut().zip(g.data()).enumerate() {
                let gi = gi * clip;
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                *wi -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *wi);
            }
        }
        Ok(())
    }

    /// Clears both moments at coordinates the mask prunes.
    pub fn zero_masked(&mut self, name: &str, mask: &Mask) {
        if let Some(st) = self.states.get_mut(name) {
            mask.apply_slice(&mut st.m);
            mask.apply_slice(&mut st.v);
        }
    }

    /// Writes moments as `{prefix}{name}.m` / `.v` tensors and step counts
    /// into `meta["{prefix}steps"]`.
    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        let mut steps = serde_json::Map::new();
        for (name, st) in &self.states {
            let n = st.m.len();
            ck.tensors.insert(
                format!("{prefix}{name}.m"),
                Tensor::new(vec![n], st.m.clone())?,
            );
            ck.tensors.insert(
                format!("{prefix}{name}.v"),
                Tensor::new(vec![n], st.v.clone())?,
            );
            steps.insert(name.clone(), st.step.into());
        }
        ck.meta.insert(format!("{prefix}steps"), steps.into());
        ck.meta.insert(
            format!("{prefix}config"),
            serde_json::to_value(&self.config)?,
        );
        Ok(())
    }

    pub fn load_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let missing = |k: &str| Error::Format(format!("checkpoint lacks {k}"));
        let cfg_key = format!("{prefix}config");
        let config = serde_json::from_value(
            ck.meta
                .get(&cfg_key)
                .cloned()
                .ok_or_else(|| missing(&cfg_key))?,
        )?;
        let steps_key = format!("{prefix}steps");
        let steps = ck
            .meta
            .get(&steps_key)
            .and_then(|v| v.as_object())
            .ok_or_else(|| missing(&steps_key))?;
        let mut opt = AdamW::new(config);
        for (name, step) in steps {
            let step = step
                .as_u64()
                .ok_or_else(|| Error::Format(format!("bad step count for {name}")))?;
            let m = ck.tensor(&format!("{prefix}{name}.m"))?.data().to_vec();
            let v = ck.tensor(&format!("{prefix}{name}.v"))?.data().to_vec();
            opt.states.insert(name.clone(), ParamState { m, v, step });
        }
        Ok(opt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// A fresh optimizer takes over at `b_start`.
    Two,
    /// One optimizer and one learning-rate curve over the whole run.
    One,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub mode: OptimizerMode,
    pub a: AdamWConfig,
    /// Settings of the second optimizer; `None` copies `a`.
    pub b: Option<AdamWConfig>,
    /// End of the first optimizer's span; `None` means `t2`.
    pub a_end: Option<usize>,
    /// Start of the second optimizer's span; `None` means `t2`.
    pub b_start: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mode: OptimizerMode::Two,
            a: AdamWConfig::default(),
            b: None,
            a_end: None,
            b_start: None,
        }
    }
}

/// One optimizer's settings over the half-open step range `[start, end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSpan {
    pub start: usize,
    pub end: usize,
    pub config: AdamWConfig,
}

impl OptimizerSpan {
    pub fn schedule(&self) -> LrSchedule {
        self.config.schedule(self.end - self.start)
    }

    pub fn lr(&self, t: usize) -> f64 {
        self.schedule().lr(t - self.start)
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }
}

/// Splits `[0, t3)` into optimizer spans: `[0, t2)` and `[t2, t3)` in two-
/// optimizer mode, or a single span in one-optimizer mode.
pub fn two_phase_optimizers(
    cfg: &OptimizerConfig,
    t2: usize,
    t3: usize,
) -> Result<Vec<OptimizerSpan>> {
    cfg.a.validate()?;
    if let Some(b) = &cfg.b {
        b.validate()?;
    }
    match cfg.mode {
        OptimizerMode::One => Ok(vec![OptimizerSpan {
            start: 0,
            end: t3,
            config: cfg.a.clone(),
        }]),
        OptimizerMode::Two => {
            let a_end = cfg.a_end.unwrap_or(t2);
            let b_start = cfg.b_start.unwrap_or(t2);
            if b_start < a_end {
                return Err(Error::Config(format!(
                    "optimizer spans overlap: first ends at {a_end}, second starts at {b_start}"
                )));
            }
            if b_start > a_end {
                return Err(Error::Config(format!(
                    "no optimizer covers steps {a_end}..{b_start}"
                )));
            }
            if a_end == 0 || a_end > t3 {
                return Err(Error::Config(format!(
                    "optimizer switch {a_end} outside (0, {t3}]"
                )));
            }
            let mut spans = vec![OptimizerSpan {
                start: 0,
                end: a_end,
                config: cfg.a.clone(),
            }];
            if a_end < t3 {
                spans.push(OptimizerSpan {
                    start: a_end,
                    end: t3,
                    config: cfg.b.clone().unwrap_or_else(|| cfg.a.clone()),
                });
            }
            Ok(spans)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(lr: f64, wd: f64) -> AdamW {
        AdamW::new(AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        })
    }

    fn step1(opt: &mut AdamW, w: f64, g: f64) -> f64 {
        let mut p = Tensor::scalar(w);
        let g = Tensor::scalar(g);
        let lr = opt.config.lr;
        opt.step(lr, &mut [("w", &mut p, &g)]).unwrap();
        p.item()
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        assert_eq!(step1(&mut plain(0.1, 0.0), 0.75, 0.0), 0.75);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let w = step1(&mut plain(0.1, 0.0), 1.0, 1.0);
        assert!((w - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay() {
        let w = step1(&mut plain(0.1, 0.01), 2.0, 0.0);
        assert!((w - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut opt = plain(0.1, 0.0);
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let ga = Tensor::scalar(1.0);
        let gb = Tensor::scalar(f64::NAN);
        let err = opt
            .step(0.1, &mut [("alpha", &mut a, &ga), ("beta", &mut b, &gb)])
            .unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("beta")));
        assert_eq!(a.item(), 1.0);
        assert!(opt.state("alpha").is_none());
    }

    #[test]
    fn lr_schedule_shape() {
        let s = LrSchedule {
            peak_lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(5), 0.5);
        assert_eq!(s.lr(10), 1.0);
        assert_eq!(s.lr(60), 0.5);
        assert_eq!(s.lr(110), 0.0);
        let no_warm = LrSchedule {
            warmup_steps: 0,
            ..s
        };
        assert_eq!(no_warm.lr(0), 1.0);
    }

    #[test]
    fn spans_split_at_t2() {
        let spans = two_phase_optimizers(&OptimizerConfig::default(), 100, 150).unwrap();
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start, spans[0].end), (0, 100));
        assert_eq!((spans[1].start, spans[1].end), (100, 150));
        assert_eq!(spans[1].lr(100), 0.0);
        let one = OptimizerConfig {
            mode: OptimizerMode::One,
            ..OptimizerConfig::default()
        };
        assert_eq!(two_phase_optimizers(&one, 100, 150).unwrap().len(), 1);
    }

    #[test]
    fn overlapping_spans_rejected() {
        let cfg = OptimizerConfig {
            a_end: Some(120),
            b_start: Some(100),
            ..OptimizerConfig::default()
        };
        assert!(matches!(
            two_phase_optimizers(&cfg, 100, 150),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn masked_moments_cleared() {
        let mut opt = plain(0.1, 0.0);
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![0.5, 0.5]);
        opt.step(0.1, &mut [("w", &mut p, &g)]).unwrap();
        let mask = Mask::from_bits(&[2], vec![false, true]).unwrap();
        opt.zero_masked("w", &mask);
        let st = opt.state("w").unwrap();
        assert_eq!((st.m[0], st.v[0]), (0.0, 0.0));
        assert!(st.m[1] != 0.0);
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let mut opt = plain(0.01, 0.1);
        let mut p = Tensor::vector(vec![0.3, -0.7, 1e-9]);
        for k in 0..3 {
            let g = Tensor::vector(vec![0.1 * k as f64, -1.0 / 3.0, 2.0]);
            opt.step(0.01, &mut [("layer.w", &mut p, &g)]).unwrap();
        }
        let mut ck = Checkpoint::new();
        opt.save_into(&mut ck, "opt.").unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(AdamW::load_from(&back, "opt.").unwrap(), opt);
    }
}
