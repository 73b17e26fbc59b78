//! Layer-wise distillation losses between a teacher trace and the trace of
//! the model being trained.
//!
//! Teacher quantities enter the tape as constants, so no gradient can ever
//! reach teacher parameters through these losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, TraceVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    /// One coefficient per encoder layer plus one for the output layer.
    /// `None` means 1.0 everywhere.
    pub lambda: Option<Vec<f64>>,
    pub temperature: f64,
    /// Divide the teacher logits by the temperature as well.
    pub symmetric_temp: bool,
    /// Add ground-truth cross-entropy to the prediction-layer term.
    pub label_ce: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            lambda: None,
            temperature: 1.0,
            symmetric_temp: false,
            label_ce: false,
        }
    }
}

impl KdConfig {
    /// The λ vector for an `num_layers`-layer encoder.
    pub fn lambdas(&self, num_layers: usize) -> Result<Vec<f64>> {
        let l = match &self.lambda {
            None => vec![1.0; num_layers + 1],
            Some(l) => l.clone(),
        };
        if l.len() != num_layers + 1 {
            return Err(Error::Config(format!(
                "lambda needs {} entries, got {}",
                num_layers + 1,
                l.len()
            )));
        }
        if l.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config(
                "lambda entries must be finite and >= 0".into(),
            ));
        }
        Ok(l)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        self.lambdas(num_layers)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation, unweighted and batch-summed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KdComponents {
    pub hidden: f64,
    pub attention: f64,
    pub pred: f64,
}

fn batch_size(trace: &ForwardTrace) -> usize {
    trace.logits.shape()[0]
}

fn check_aligned(teacher: &ForwardTrace, student: &TraceVars, tape: &Tape) -> Result<()> {
    if teacher.num_layers() != student.hidden_states.len() {
        return Err(Error::Contract(format!(
            "teacher has {} layers, student {}",
            teacher.num_layers(),
            student.hidden_states.len()
        )));
    }
    let ts = teacher.logits.shape();
    let ss = tape.shape(student.logits);
    if ts != ss {
        return Err(Error::dim("kd logits", ts, ss));
    }
    Ok(())
}

/// Hidden-state MSE and attention MSE of encoder layer `i` (1-based),
/// each summed over the batch.
fn encoder_terms(
    tape: &mut Tape,
    i: usize,
    teacher: &ForwardTrace,
    student: &TraceVars,
) -> Result<(Var, Var)> {
    let b = batch_size(teacher) as f64;
    let ht = tape.constant(teacher.hidden_states[i - 1].clone());
    let at = tape.constant(teacher.attention_probs[i - 1].clone());
    let hidn = tape.mse(student.hidden_states[i - 1], ht)?;
    let attn = tape.mse(student.attention_probs[i - 1], at)?;
    Ok((tape.scale(hidn, b), tape.scale(attn, b)))
}

/// Soft cross-entropy `-softmax(z_T) · log_softmax(z_S / temp)`, summed over the batch.
pub fn soft_cross_entropy(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    student_logits: Var,
    temperature: f64,
    symmetric: bool,
) -> Result<Var> {
    let shape = teacher_logits.shape();
    if shape.len() != 2 {
        return Err(Error::Contract("logits must be [batch, classes]".into()));
    }
    let t_scale = if symmetric { 1.0 / temperature } else { 1.0 };
    let mut tape_t = Tape::new();
    let zt = tape_t.constant(teacher_logits.map(|z| z * t_scale));
    let pt = tape_t.softmax(zt, 1)?;
    let target = tape.constant(tape_t.value(pt).clone());
    let scaled = tape.scale(student_logits, 1.0 / temperature);
    let logp = tape.log_softmax(scaled, 1)?;
    let prod = tape.mul(target, logp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

/// Hard-label cross-entropy summed over the batch.
pub fn task_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(logp, labels)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Distillation loss of layer `i` (1-based): hidden + attention MSE for
/// encoder layers, soft cross-entropy for `i = N + 1`.
pub fn layer_loss(
    tape: &mut Tape,
    i: usize,
    teacher: &ForwardTrace,
    student: &TraceVars,
    cfg: &KdConfig,
) -> Result<Var> {
    check_aligned(teacher, student, tape)?;
    let n = teacher.num_layers();
    if i == 0 || i > n + 1 {
        return Err(Error::Contract(format!(
            "layer index {i} outside 1..={}",
            n + 1
        )));
    }
    if i <= n {
        let (h, a) = encoder_terms(tape, i, teacher, student)?;
        tape.add(h, a)
    } else {
        soft_cross_entropy(
            tape,
            &teacher.logits,
            student.logits,
            cfg.temperature,
            cfg.symmetric_temp,
        )
    }
}

/// `Σ_i λ_i · layer_loss(i)` over all `N + 1` layers.
///
/// With `labels`, and `cfg.label_ce` set, hard-label cross-entropy is added
/// to the prediction-layer term.
pub fn total_loss(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    student: &TraceVars,
    cfg: &KdConfig,
    labels: Option<&[usize]>,
) -> Result<(Var, KdComponents)> {
    check_aligned(teacher, student, tape)?;
    let n = teacher.num_layers();
    let lambdas = cfg.lambdas(n)?;
    let mut comps = KdComponents::default();
    let mut terms = Vec::with_capacity(2 * n + 2);
    for i in 1..=n {
        let (h, a) = encoder_terms(tape, i, teacher, student)?;
        comps.hidden += tape.value(h).item();
        comps.attention += tape.value(a).item();
        let layer = tape.add(h, a)?;
        terms.push(tape.scale(layer, lambdas[i - 1]));
    }
    let mut pred = soft_cross_entropy(
        tape,
        &teacher.logits,
        student.logits,
        cfg.temperature,
        cfg.symmetric_temp,
    )?;
    if let (true, Some(labels)) = (cfg.label_ce, labels) {
        let ce = task_cross_entropy(tape, student.logits, labels)?;
        pred = tape.add(pred, ce)?;
    }
    comps.pred = tape.value(pred).item();
    terms.push(tape.scale(pred, lambdas[n]));
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((total, comps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(logits: &[f64], hidden: f64) -> ForwardTrace {
        ForwardTrace {
            hidden_states: vec![Tensor::full(&[1, 2, 2], hidden); 2],
            attention_probs: vec![Tensor::full(&[1, 1, 2, 2], 0.5); 2],
            logits: Tensor::new(vec![1, logits.len()], logits.to_vec()).unwrap(),
        }
    }

    fn bind(tape: &mut Tape, t: &ForwardTrace) -> TraceVars {
        TraceVars {
            hidden_states: t
                .hidden_states
                .iter()
                .map(|h| tape.param(h.clone()))
                .collect(),
            attention_probs: t
                .attention_probs
                .iter()
                .map(|a| tape.param(a.clone()))
                .collect(),
            logits: tape.param(t.logits.clone()),
        }
    }

    #[test]
    fn identical_traces_have_zero_layer_loss() {
        let t = trace(&[0.3, -0.2], 0.7);
        let mut tape = Tape::new();
        let s = bind(&mut tape, &t);
        for i in 1..=2 {
            let l = layer_loss(&mut tape, i, &t, &s, &KdConfig::default()).unwrap();
            assert_eq!(tape.value(l).item(), 0.0);
        }
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let t = trace(&[1.5, 1.5], 0.0);
        let mut tape = Tape::new();
        let s = bind(&mut tape, &t);
        let l = layer_loss(&mut tape, 3, &t, &s, &KdConfig::default()).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_tiny_entropy() {
        // Entropy of softmax([10, -10]) written without cancellation:
        // e = exp(-20), ln p = -ln(1+e), ln(1-p) = -20 - ln(1+e).
        let e = (-20.0f64).exp();
        let l1p = e.ln_1p();
        let p = 1.0 / (1.0 + e);
        let q = e / (1.0 + e);
        let want = p * l1p + q * (20.0 + l1p);
        let t = trace(&[10.0, -10.0], 0.0);
        let mut tape = Tape::new();
        let s = bind(&mut tape, &t);
        let l = layer_loss(&mut tape, 3, &t, &s, &KdConfig::default()).unwrap();
        let got = tape.value(l).item();
        assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
        assert!((want - 4.328e-8).abs() < 1e-10);
    }

    #[test]
    fn index_out_of_range() {
        let t = trace(&[0.0, 0.0], 0.0);
        let mut tape = Tape::new();
        let s = bind(&mut tape, &t);
        for i in [0, 4] {
            assert!(matches!(
                layer_loss(&mut tape, i, &t, &s, &KdConfig::default()),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn zero_lambdas_zero_loss() {
        let t = trace(&[0.2, 0.9], 1.0);
        let s_trace = trace(&[-1.0, 0.4], -0.5);
        let cfg = KdConfig {
            lambda: Some(vec![0.0; 3]),
            ..KdConfig::default()
        };
        let mut tape = Tape::new();
        let s = bind(&mut tape, &s_trace);
        let (l, _) = total_loss(&mut tape, &t, &s, &cfg, None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn one_hot_lambda_selects_layer() {
        let t = trace(&[0.2, 0.9], 1.0);
        let s_trace = trace(&[-1.0, 0.4], -0.5);
        let cfg = KdConfig {
            lambda: Some(vec![1.0, 0.0, 0.0]),
            ..KdConfig::default()
        };
        let mut tape = Tape::new();
        let s = bind(&mut tape, &s_trace);
        let (total, _) = total_loss(&mut tape, &t, &s, &cfg, None).unwrap();
        let l1 = layer_loss(&mut tape, 1, &t, &s, &cfg).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(l1).item());
        // hidden diff 1.5 everywhere -> 2.25
        assert_eq!(tape.value(l1).item(), 2.25);
    }

    #[test]
    fn wrong_lambda_length_is_config_error() {
        let cfg = KdConfig {
            lambda: Some(vec![1.0]),
            ..KdConfig::default()
        };
        assert!(matches!(cfg.validate(2), Err(Error::Config(_))));
        let bad_temp = KdConfig {
            temperature: 0.0,
            ..KdConfig::default()
        };
        assert!(bad_temp.validate(2).is_err());
    }
}
