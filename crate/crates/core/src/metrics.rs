//! Task metrics over predicted and gold class indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    F1,
    Mcc,
    Spearman,
}

impl Metric {
    pub fn compute(self, predictions: &[usize], labels: &[usize]) -> Result<f64> {
        if predictions.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Contract("metric over an empty split".into()));
        }
        Ok(match self {
            Metric::Accuracy => accuracy(predictions, labels),
            Metric::F1 => f1(predictions, labels),
            Metric::Mcc => mcc(predictions, labels),
            Metric::Spearman => spearman(predictions, labels),
        })
    }
}

fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / gold.len() as f64
}

/// F1 of the positive class (index 1).
fn f1(pred: &[usize], gold: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p == 1, g == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fneg)
}

/// Multiclass Matthews correlation; 0 when the denominator vanishes.
fn mcc(pred: &[usize], gold: &[usize]) -> f64 {
    let k = pred.iter().chain(gold).max().copied().unwrap_or(0) + 1;
    let mut conf = vec![vec![0.0f64; k]; k];
    for (&p, &g) in pred.iter().zip(gold) {
        conf[g][p] += 1.0;
    }
    let n = gold.len() as f64;
    let correct: f64 = (0..k).map(|i| conf[i][i]).sum();
    let t: Vec<f64> = (0..k).map(|i| conf[i].iter().sum()).collect();
    let p: Vec<f64> = (0..k).map(|j| (0..k).map(|i| conf[i][j]).sum()).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let num = correct * n - tp;
    let den = ((n * n - p.iter().map(|x| x * x).sum::<f64>())
        * (n * n - t.iter().map(|x| x * x).sum::<f64>()))
    .sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn ranks(xs: &[usize]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by_key(|&i| xs[i]);
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Rank correlation with average ranks for ties; 0 for constant inputs.
fn spearman(pred: &[usize], gold: &[usize]) -> f64 {
    let (a, b) = (ranks(pred), ranks(gold));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
