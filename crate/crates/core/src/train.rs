//! Teacher finetuning, the sparse progressive distillation loop, and
//! evaluation.

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Strategy};
use crate::data::{Batch, Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::graft::{compose_grafted, draw_mask, GraftMask};
use crate::kd::{task_cross_entropy, total_loss};
use crate::log::{num, opt_num, MetricLog};
use crate::metrics::Metric;
use crate::model::{EncoderLayer, EncoderModel, PrunableMatrix};
use crate::optim::{two_phase_optimizers, AdamW, OptimizerSpan};
use crate::prune::{apply_mask, SparsityMask};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// Stream indices under the run seed.
const INIT_STREAM: u64 = 1;
const TEACHER_BATCH_STREAM: u64 = 2;
const SPD_STREAM: u64 = 3;

const EVAL_CHUNK: usize = 128;

/// Epoch-wise shuffled index stream over a training split.
#[derive(Clone, Debug)]
pub struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(n: usize) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    /// Next `b` indices; reshuffles with `rng` whenever an epoch runs out.
    pub fn next(&mut self, b: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn batch_of(examples: &[Example], idx: &[usize]) -> Result<Batch> {
    let refs: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
    Batch::from_examples(&refs)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &EncoderModel, examples: &[Example]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let trace = model.trace(&Batch::from_examples(&refs)?)?;
        let k = trace.logits.shape()[1];
        out.extend(trace.logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

pub fn evaluate_examples(
    model: &EncoderModel,
    examples: &[Example],
    metric: Metric,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let pred = predict(model, examples)?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    metric.compute(&pred, &gold)
}

pub fn evaluate(model: &EncoderModel, data: &Dataset, split: Split) -> Result<f64> {
    evaluate_examples(model, data.split(split), data.metric)
}

fn prefix(examples: &[Example], n: usize) -> &[Example] {
    match n {
        0 => examples,
        n => &examples[..n.min(examples.len())],
    }
}

fn train_eval_slice<'d>(cfg: &RunConfig, train: &'d [Example]) -> &'d [Example] {
    prefix(train, cfg.train_eval_size)
}

fn bound_params(f: &crate::model::BoundForward) -> Vec<Var> {
    let mut v: Vec<Var> = f.embeddings.to_vec();
    for l in &f.layers {
        v.extend(l.0);
    }
    v.extend(f.head);
    v
}

fn check_loss(v: f64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss is {v} at step {step}")))
    }
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub model: EncoderModel,
    pub log: MetricLog,
    pub train_metric: f64,
    pub dev_metric: f64,
}

/// Dense cross-entropy finetuning of a freshly initialized encoder.
pub fn train_teacher(cfg: &RunConfig, data: &Dataset) -> Result<TeacherOutcome> {
    cfg.validate()?;
    cfg.check_task(data)?;
    let tc = &cfg.teacher;
    let mut model = EncoderModel::new(cfg.model.clone(), &mut Rng::derive(cfg.seed, INIT_STREAM))?;
    let mut rng = Rng::derive(cfg.seed, TEACHER_BATCH_STREAM);
    let mut sampler = Sampler::new(data.train.len());
    let schedule = tc.optimizer.schedule(tc.steps);
    let mut opt = AdamW::new(tc.optimizer.clone());
    let mut log = MetricLog::new(["step", "lr", "loss", "train_metric", "dev_metric"]);
    let train_eval = train_eval_slice(cfg, &data.train);
    for t in 0..tc.steps {
        let batch = batch_of(&data.train, &sampler.next(tc.batch_size, &mut rng))?;
        let mut tape = Tape::new();
        let fwd = model.forward_trainable(&mut tape, &batch)?;
        let ce = task_cross_entropy(&mut tape, fwd.trace.logits, &batch.labels)?;
        let loss = tape.scale(ce, 1.0 / batch.batch_size as f64);
        let loss_value = tape.value(loss).item();
        check_loss(loss_value, t)?;
        tape.backward(loss)?;
        let grads: Vec<Tensor> = bound_params(&fwd)
            .iter()
            .map(|&v| tape.grad_tensor(v))
            .collect();
        let lr = schedule.lr(t);
        {
            let mut named = model.named_params_mut();
            let mut params: Vec<(&str, &mut Tensor, &Tensor)> = named
                .iter_mut()
                .zip(&grads)
                .map(|((n, p), g)| (n.as_str(), &mut **p, g))
                .collect();
            opt.step(lr, &mut params)?;
        }
        let (mut tr, mut dv) = (None, None);
        if (t + 1) % tc.eval_every == 0 || t + 1 == tc.steps {
            tr = Some(evaluate_examples(&model, train_eval, data.metric)?);
            dv = Some(evaluate(&model, data, Split::Dev)?);
        }
        log.push(vec![
            t.to_string(),
            num(lr),
            num(loss_value),
            opt_num(tr),
            opt_num(dv),
        ])?;
    }
    let train_metric = evaluate_examples(&model, train_eval, data.metric)?;
    let dev_metric = evaluate(&model, data, Split::Dev)?;
    Ok(TeacherOutcome {
        model,
        log,
        train_metric,
        dev_metric,
    })
}

fn param_name(layer: usize, k: usize) -> String {
    format!("layers.{layer}.{}", EncoderLayer::PARAM_NAMES[k])
}

/// What one call to [`SpdRun::step`] did.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub p: f64,
    pub graft: GraftMask,
    pub lr: f64,
    pub loss: f64,
    pub evaluated: bool,
}

/// State of one sparse progressive distillation run.
///
/// The student bank holds one module per teacher layer and is the only copy
/// of student weights: grafted views borrow it, so updates made through a
/// grafted model are the bank's updates.
pub struct SpdRun<'a> {
    cfg: RunConfig,
    teacher: &'a EncoderModel,
    data: &'a Dataset,
    train: &'a [Example],
    bank: Vec<EncoderLayer>,
    masks: Vec<SparsityMask>,
    targets: Vec<f64>,
    spans: Vec<OptimizerSpan>,
    span: usize,
    opt: AdamW,
    rng: Rng,
    sampler: Sampler,
    step: usize,
    log: MetricLog,
    teacher_forwards: usize,
    grafted_total: usize,
}

impl<'a> SpdRun<'a> {
    pub fn new(cfg: &RunConfig, teacher: &'a EncoderModel, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        cfg.check_task(data)?;
        if teacher.config != cfg.model {
            return Err(Error::Config(
                "teacher architecture differs from the configured model".into(),
            ));
        }
        let train = prefix(&data.train, cfg.spd_train_size);
        if train.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        let n = cfg.model.num_layers;
        let spans = two_phase_optimizers(&cfg.optimizer, cfg.graft.t2, cfg.graft.t3)?;
        let bank = teacher.layers.clone();
        let masks = bank
            .iter()
            .enumerate()
            .map(|(i, l)| SparsityMask::dense(i, l))
            .collect();
        let mut columns: Vec<String> = [
            "step",
            "phase",
            "lr",
            "p",
            "graft_bits",
            "graft_rate",
            "loss",
            "kd_hidden",
            "kd_attention",
            "kd_pred",
        ]
        .map(String::from)
        .to_vec();
        columns.extend((1..=n).map(|j| format!("sparsity_l{j}")));
        columns.extend(["train_metric".into(), "dev_metric".into()]);
        Ok(SpdRun {
            targets: cfg.sparsity.targets(n)?,
            opt: AdamW::new(spans[0].config.clone()),
            spans,
            span: 0,
            rng: Rng::derive(cfg.seed, SPD_STREAM),
            sampler: Sampler::new(train.len()),
            cfg: cfg.clone(),
            teacher,
            data,
            train,
            bank,
            masks,
            step: 0,
            log: MetricLog::new(columns),
            teacher_forwards: 0,
            grafted_total: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &[EncoderLayer] {
        &self.bank
    }

    pub fn masks(&self) -> &[SparsityMask] {
        &self.masks
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn log(&self) -> &MetricLog {
        &self.log
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.graft.t3
    }

    /// Number of teacher forward passes computed for distillation targets.
    pub fn teacher_forwards(&self) -> usize {
        self.teacher_forwards
    }

    /// Grafting probability used at step `t`.
    pub fn graft_probability(&self, t: usize) -> f64 {
        if !self.cfg.strategy.progressive() {
            1.0
        } else if !self.cfg.graft_while_prune && t < self.cfg.graft.t1 {
            0.0
        } else {
            self.cfg.graft.probability_at(t)
        }
    }

    /// Teacher embeddings and head around the current student bank.
    pub fn student_model(&self) -> EncoderModel {
        let mut m = self.teacher.clone();
        m.layers = self.bank.clone();
        m
    }

    /// Student weights, masks, optimizer state and progress.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.put_model(&self.student_model())?;
        for m in &self.masks {
            for which in PrunableMatrix::ALL {
                ck.masks.insert(
                    format!("layers.{}.{}", m.layer, which.name()),
                    m.get(which).clone(),
                );
            }
        }
        self.opt.save_into(&mut ck, "opt.")?;
        ck.meta.insert("step".into(), self.step.into());
        ck.meta.insert("seed".into(), self.cfg.seed.into());
        ck.meta
            .insert("strategy".into(), self.cfg.strategy.name().into());
        Ok(ck)
    }

    /// One training step. On error nothing has been modified, so the run
    /// still holds the state after the last successful step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.step;
        if self.is_done() {
            return Err(Error::Contract(format!("run already finished {t} steps")));
        }
        let n = self.bank.len();
        let next_span = if self.spans[self.span].contains(t) {
            None
        } else {
            Some(self.span + 1)
        };
        let span = &self.spans[next_span.unwrap_or(self.span)];
        let lr = span.lr(t);
        let p = self.graft_probability(t);

        let mut rng = self.rng.clone();
        let mut sampler = self.sampler.clone();
        let graft = draw_mask(p, n, &mut rng);
        let batch = batch_of(self.train, &sampler.next(self.cfg.batch_size, &mut rng))?;

        let mut tape = Tape::new();
        let view = compose_grafted(self.teacher, &self.bank, &graft)?;
        let fwd = view.forward(&mut tape, &batch)?;
        let mut teacher_forwards = 0;
        let (loss, comps) = if self.cfg.strategy.distills() {
            let target = self.teacher.trace(&batch)?;
            teacher_forwards += 1;
            let labels = self.cfg.kd.label_ce.then_some(&batch.labels[..]);
            let (l, c) = total_loss(&mut tape, &target, &fwd.trace, &self.cfg.kd, labels)?;
            (l, Some(c))
        } else {
            (
                task_cross_entropy(&mut tape, fwd.trace.logits, &batch.labels)?,
                None,
            )
        };
        let loss_value = tape.value(loss).item();
        check_loss(loss_value, t)?;

        let mut grads: Vec<(usize, [Tensor; 16])> = Vec::new();
        if graft.any() {
            tape.backward(loss)?;
            for (i, lv) in fwd.layers.iter().enumerate() {
                if graft.bits[i] {
                    grads.push((i, lv.grads(&tape)));
                }
            }
        }
        let mut opt = match next_span {
            Some(_) => AdamW::new(span.config.clone()),
            None => self.opt.clone(),
        };
        let mut bank = self.bank.clone();
        if !grads.is_empty() {
            let names: Vec<Vec<String>> = grads
                .iter()
                .map(|(i, _)| (0..16).map(|k| param_name(*i, k)).collect())
                .collect();
            let mut params: Vec<(&str, &mut Tensor, &Tensor)> = Vec::new();
            let mut gi = 0;
            for (i, layer) in bank.iter_mut().enumerate() {
                if gi < grads.len() && grads[gi].0 == i {
                    for (k, p) in layer.tensors_mut().into_iter().enumerate() {
                        params.push((names[gi][k].as_str(), p, &grads[gi].1[k]));
                    }
                    gi += 1;
                }
            }
            opt.step(lr, &mut params)?;
        }

        let mut masks = self.masks.clone();
        for (layer, mask) in bank.iter_mut().zip(&masks) {
            apply_mask(layer, mask)?;
        }
        let prune_end = self.cfg.prune_end();
        if t < prune_end {
            for (i, (layer, mask)) in bank.iter_mut().zip(masks.iter_mut()).enumerate() {
                let theta = self.cfg.sparsity.ramp(self.targets[i], t + 1, prune_end);
                mask.reproject(layer, theta)?;
                for which in PrunableMatrix::ALL {
                    opt.zero_masked(&param_name(i, which.param_index()), mask.get(which));
                }
            }
        }

        let evaluated = (t + 1).is_multiple_of(self.cfg.eval_every) || t + 1 == self.cfg.graft.t3;
        let (mut tr, mut dv) = (None, None);
        if evaluated {
            let mut student = self.teacher.clone();
            student.layers = bank.clone();
            tr = Some(evaluate_examples(
                &student,
                train_eval_slice(&self.cfg, self.train),
                self.data.metric,
            )?);
            dv = Some(evaluate(&student, self.data, Split::Dev)?);
        }

        let grafted_total = self.grafted_total + graft.count();
        let mut row = vec![
            t.to_string(),
            self.cfg.graft.phase(t).to_string(),
            num(lr),
            num(p),
            graft.render(),
            num(grafted_total as f64 / ((t + 1) * n) as f64),
            num(loss_value),
            opt_num(comps.map(|c| c.hidden)),
            opt_num(comps.map(|c| c.attention)),
            opt_num(comps.map(|c| c.pred)),
        ];
        row.extend(masks.iter().map(|m| num(m.realized_sparsity())));
        row.extend([opt_num(tr), opt_num(dv)]);
        self.log.push(row)?;

        self.bank = bank;
        self.masks = masks;
        self.opt = opt;
        if let Some(s) = next_span {
            self.span = s;
        }
        self.rng = rng;
        self.sampler = sampler;
        self.teacher_forwards += teacher_forwards;
        self.grafted_total = grafted_total;
        self.step += 1;
        Ok(StepRecord {
            step: t,
            p,
            graft,
            lr,
            loss: loss_value,
            evaluated,
        })
    }

    /// Runs to `t3`, calling `observer` after every step.
    pub fn run_with(
        &mut self,
        mut observer: impl FnMut(&SpdRun, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let rec = self.step()?;
            observer(self, &rec)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<SpdOutcome> {
        let checkpoint = self.checkpoint()?;
        let last = |c: &str| -> Result<f64> {
            self.log
                .last(c)?
                .ok_or_else(|| Error::Contract("run logged no evaluation".into()))
        };
        Ok(SpdOutcome {
            train_metric: last("train_metric")?,
            dev_metric: last("dev_metric")?,
            student: self.student_model(),
            masks: self.masks,
            teacher_forwards: self.teacher_forwards,
            log: self.log,
            checkpoint,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SpdOutcome {
    pub student: EncoderModel,
    pub masks: Vec<SparsityMask>,
    pub log: MetricLog,
    pub checkpoint: Checkpoint,
    pub train_metric: f64,
    pub dev_metric: f64,
    pub teacher_forwards: usize,
}

impl SpdOutcome {
    /// Final train metric minus final dev metric.
    pub fn gap(&self) -> f64 {
        self.train_metric - self.dev_metric
    }
}

/// Runs the whole distillation schedule and returns the all-student model.
pub fn run_spd(cfg: &RunConfig, teacher: &EncoderModel, data: &Dataset) -> Result<SpdOutcome> {
    let mut run = SpdRun::new(cfg, teacher, data)?;
    run.run_with(|_, _| Ok(()))?;
    run.finish()
}

/// Convenience for strategy comparisons: same config, different recipe.
pub fn with_strategy(cfg: &RunConfig, strategy: Strategy) -> RunConfig {
    RunConfig {
        strategy,
        ..cfg.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(5);
        let mut rng = Rng::new(1);
        let mut a = s.next(5, &mut rng);
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next(7, &mut rng).len(), 7);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    }
}
