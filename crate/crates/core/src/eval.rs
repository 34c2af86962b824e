//! Angular-error statistics, smoothing, fold construction and robustness reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::angular_error;
use crate::error::{Error, Result};
use crate::model::{self, ModelWeights};
use crate::synth::Sample;

/// The five standard summaries of a set of angular errors, in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub best25: f64,
    pub worst25: f64,
}

/// Quantile by linear interpolation at position `q·(n − 1)` of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn summary_stats(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("summary_stats"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let q1 = quantile_sorted(&sorted, 0.25);
    let q2 = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let quarter = n.div_ceil(4);
    let mean_of = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok(ErrorSummary {
        mean: mean_of(&sorted),
        median: q2,
        trimean: (q1 + 2.0 * q2 + q3) / 4.0,
        best25: mean_of(&sorted[..quarter]),
        worst25: mean_of(&sorted[n - quarter..]),
    })
}

/// Trailing mean over the last `min(t, window)` entries.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Config("window: must be >= 1".into()));
    }
    let out = (0..series.len())
        .map(|t| {
            let from = (t + 1).saturating_sub(window);
            let w = &series[from..=t];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect();
    Ok(out)
}

pub const DEFAULT_SMOOTHING_WINDOW: usize = 500;

/// `100 · (test − train) / train`.
pub fn error_increase(train_err: f64, test_err: f64) -> Result<f64> {
    if train_err <= 1e-12 {
        return Err(Error::DivisionByZero("training error"));
    }
    Ok(100.0 * (test_err - train_err) / train_err)
}

/// Shuffled partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k: must be >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!("k: {k} folds need at least {k} records, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, v) in idx.into_iter().enumerate() {
        folds[i % k].push(v);
    }
    Ok(folds)
}

/// Per-sample angular errors of a model.
pub fn evaluate(weights: &ModelWeights, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| Ok(angular_error(&model::predict(&s.image, weights)?, &s.label)))
        .collect()
}

/// One per-epoch metric line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    #[serde(flatten)]
    pub summary: ErrorSummary,
}

pub const METRIC_HEADER: &str = "epoch,split,mean,median,trimean,b25,w25";

pub fn write_metric_log(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(METRIC_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.summary;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.split, s.mean, s.median, s.trimean, s.best25, s.worst25
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metric_log(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRIC_HEADER) {
        return Err(Error::format("metric log", "unexpected header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::format("metric log", format!("bad line {l:?}"));
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                split: f[1].to_string(),
                summary: ErrorSummary {
                    mean: num(f[2])?,
                    median: num(f[3])?,
                    trimean: num(f[4])?,
                    best25: num(f[5])?,
                    worst25: num(f[6])?,
                },
            })
        })
        .collect()
}

/// Mean-error series of one split, in epoch order.
pub fn mean_series(rows: &[MetricRow], split: &str) -> Vec<(usize, f64)> {
    let mut s: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.split == split)
        .map(|r| (r.epoch, r.summary.mean))
        .collect();
    s.sort_by_key(|(e, _)| *e);
    s
}

/// Train/test comparison for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub model: String,
    pub train: ErrorSummary,
    pub test: ErrorSummary,
    /// Percentage increase of the test mean error over the train mean error.
    pub error_increase: f64,
    /// Final values of the smoothed per-epoch mean errors, when a log was available.
    pub smoothed: Option<SmoothedFinal>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedFinal {
    pub window: usize,
    pub train_mean: f64,
    pub test_mean: f64,
    pub error_increase: f64,
    #[serde(skip)]
    pub train_curve: Vec<(usize, f64)>,
    #[serde(skip)]
    pub test_curve: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

/// Evaluates a model on the brightness-matched (train) and brightness-shifted
/// (test) splits. If a per-epoch log is supplied its mean curves are smoothed.
pub fn robustness_row(
    name: &str,
    weights: &ModelWeights,
    train: &[Sample],
    test: &[Sample],
    log: Option<&[MetricRow]>,
    window: usize,
) -> Result<RobustnessRow> {
    let train_s = summary_stats(&evaluate(weights, train)?)?;
    let test_s = summary_stats(&evaluate(weights, test)?)?;
    let smoothed = match log {
        Some(rows) => smooth_log(rows, window)?,
        None => None,
    };
    Ok(RobustnessRow {
        model: name.to_string(),
        train: train_s,
        test: test_s,
        error_increase: error_increase(train_s.mean, test_s.mean)?,
        smoothed,
    })
}

pub fn smooth_log(rows: &[MetricRow], window: usize) -> Result<Option<SmoothedFinal>> {
    let train = mean_series(rows, "train");
    let test = mean_series(rows, "test");
    if train.is_empty() || test.is_empty() {
        return Ok(None);
    }
    let smooth = |s: &[(usize, f64)]| -> Result<Vec<(usize, f64)>> {
        let vals: Vec<f64> = s.iter().map(|p| p.1).collect();
        Ok(s.iter().map(|p| p.0).zip(moving_average(&vals, window)?).collect())
    };
    let (tc, sc) = (smooth(&train)?, smooth(&test)?);
    let (tm, sm) = (tc.last().unwrap().1, sc.last().unwrap().1);
    Ok(Some(SmoothedFinal {
        window,
        train_mean: tm,
        test_mean: sm,
        error_increase: error_increase(tm, sm)?,
        train_curve: tc,
        test_curve: sc,
    }))
}

pub const REPORT_HEADER: &str = "model,split,n,mean,median,trimean,b25,w25,error_increase";

impl RobustnessReport {
    /// CSV with one row per model × split.
    pub fn to_csv(&self, counts: (usize, usize)) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            for (split, s, n) in [("train", &r.train, counts.0), ("test", &r.test, counts.1)] {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.model, split, n, s.mean, s.median, s.trimean, s.best25, s.worst25, r.error_increase
                ));
            }
        }
        out
    }

    /// Writes `<path>` (CSV), `<path>.json`, and for every model with a log a
    /// tab-separated `<stem>.<model>.<split>.tsv` of epoch vs smoothed mean.
    pub fn write(&self, path: impl AsRef<Path>, counts: (usize, usize)) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv(counts)).map_err(|e| Error::io(path, e))?;
        let json_path = path.with_extension("json");
        let json = serde_json::to_string_pretty(self).expect("report serialises");
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        let stem = path.with_extension("");
        for r in &self.rows {
            let Some(s) = &r.smoothed else { continue };
            for (split, curve) in [("train", &s.train_curve), ("test", &s.test_curve)] {
                let p = stem.with_extension(format!("{}.{split}.tsv", sanitize(&r.model)));
                let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                for (epoch, v) in curve {
                    writeln!(f, "{epoch}\t{v}").map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        Ok(())
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
