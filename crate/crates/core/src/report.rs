//! Deterministic report artifacts: SVG line charts and seed aggregates.
//!
//! Every number written to an SVG goes through fixed-precision formatting,
//! so identical inputs produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log::MetricLog;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 48.0;
const TICKS: usize = 5;

/// Series colors, assigned in series order and reused cyclically.
pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Axis-aligned plot window in data coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

fn pad(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span > 0.0 {
        (lo - 0.05 * span, hi + 0.05 * span)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Data extent over every point of every series, widened by 5% of the
/// range on each side. A zero range is widened by 0.5 instead.
pub fn axis_bounds(series: &[Series]) -> Result<Bounds> {
    let mut pts = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .peekable();
    if pts.peek().is_none() {
        return Err(Error::Input("chart has no data points".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in pts {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Numeric(format!("non-finite chart point ({x}, {y})")));
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (x_min, x_max) = pad(x0, x1);
    let (y_min, y_max) = pad(y0, y1);
    Ok(Bounds {
        x_min,
        x_max,
        y_min,
        y_max,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

pub fn render_svg(chart: &Chart) -> Result<String> {
    let b = axis_bounds(&chart.series)?;
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - b.x_min) / (b.x_max - b.x_min) * pw;
    let sy = |y: f64| TOP + (b.y_max - y) / (b.y_max - b.y_min) * ph;

    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        o,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        o,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        o,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = b.x_min + f * (b.x_max - b.x_min);
        let yv = b.y_min + f * (b.y_max - b.y_min);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            o,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 4.0,
            TOP + ph + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            o,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        o,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        o,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&chart.y_label)
    );
    for (i, s) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        match coords.len() {
            0 => {}
            1 => {
                let (x, y) = s.points[0];
                let _ = writeln!(
                    o,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    sx(x),
                    sy(y)
                );
            }
            _ => {
                let _ = writeln!(
                    o,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    coords.join(" ")
                );
            }
        }
        let ly = TOP + 12.0 + 14.0 * i as f64;
        let _ = writeln!(
            o,
            r#"<rect x="{:.2}" y="{:.2}" width="10" height="3" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            LEFT + 8.0,
            ly - 4.0,
            LEFT + 22.0,
            ly,
            escape(&s.name)
        );
    }
    o.push_str("</svg>\n");
    Ok(o)
}

/// Train-minus-dev gap at every row that measured both.
pub fn gap_series(log: &MetricLog) -> Result<Vec<(f64, f64)>> {
    let train = log.series("train_metric")?;
    let dev: BTreeMap<u64, f64> = log
        .series("dev_metric")?
        .into_iter()
        .map(|(s, v)| (s as u64, v))
        .collect();
    Ok(train
        .into_iter()
        .filter_map(|(s, t)| dev.get(&(s as u64)).map(|d| (s, t - d)))
        .collect())
}

/// One chart of `column` against step, one series per named log.
/// `column = "gap"` plots the train-dev gap.
pub fn render_curves(title: &str, column: &str, logs: &[(String, &MetricLog)]) -> Result<String> {
    if logs.is_empty() {
        return Err(Error::Input("no logs to plot".into()));
    }
    let mut series = Vec::with_capacity(logs.len());
    for (name, log) in logs {
        if log.is_empty() {
            return Err(Error::Input(format!("log {name} is empty")));
        }
        let points = if column == "gap" {
            gap_series(log)?
        } else {
            log.series(column)?
        };
        series.push(Series {
            name: name.clone(),
            points,
        });
    }
    render_svg(&Chart {
        title: title.into(),
        x_label: "step".into(),
        y_label: column.into(),
        series,
    })
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("cannot aggregate zero values".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Aggregate { mean, std, n })
    }
}

/// Final metrics of one member run for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: String,
    pub seed: u64,
    pub train_metric: f64,
    pub dev_metric: f64,
}

impl RunResult {
    pub fn gap(&self) -> f64 {
        self.train_metric - self.dev_metric
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub train_metric: Aggregate,
    pub dev_metric: Aggregate,
    pub gap: Aggregate,
}

/// Groups results by run name and aggregates each group across seeds.
pub fn summarize(results: &[RunResult]) -> Result<BTreeMap<String, RunSummary>> {
    let mut groups: BTreeMap<&str, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry(&r.run).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(run, rs)| {
            let col = |f: fn(&RunResult) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            Ok((
                run.to_string(),
                RunSummary {
                    seeds: rs.iter().map(|r| r.seed).collect(),
                    train_metric: Aggregate::of(&col(|r| r.train_metric))?,
                    dev_metric: Aggregate::of(&col(|r| r.dev_metric))?,
                    gap: Aggregate::of(&col(RunResult::gap))?,
                },
            ))
        })
        .collect()
}

/// A member run that did not complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub run: String,
    pub seed: u64,
    pub error: String,
}
