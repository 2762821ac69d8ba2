//! Evaluation metrics for forecasting, M4-style scoring, detection and
//! classification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Named metric values for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    /// Number of points, series or windows evaluated.
    pub support: usize,
}

impl MetricReport {
    pub fn new(task: impl Into<String>, support: usize) -> Result<Self> {
        if support == 0 {
            return contract("metric report with zero support");
        }
        Ok(Self {
            task: task.into(),
            metrics: BTreeMap::new(),
            support,
        })
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {name}")));
        }
        self.metrics.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn paired(kernel: &'static str, truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension {
            kernel,
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    if truth.is_empty() {
        return contract(format!("{kernel} of empty input"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub mse: f64,
    pub mae: f64,
}

/// Sum of the terms in ascending order, so the result does not depend on the
/// order the points arrive in.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

pub fn regression_metrics(truth: &[f64], pred: &[f64]) -> Result<Regression> {
    paired("regression_metrics", truth, pred)?;
    let n = truth.len() as f64;
    let se = sorted_sum(truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).collect());
    let ae = sorted_sum(truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).collect());
    Ok(Regression { mse: se / n, mae: ae / n })
}

/// Symmetric MAPE on a 0..200 scale. Points where both values are zero
/// count as exact.
pub fn smape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    paired("smape", truth, pred)?;
    let total = sorted_sum(
        truth
            .iter()
            .zip(pred)
            .map(|(t, p)| {
                let den = t.abs() + p.abs();
                if den == 0.0 {
                    0.0
                } else {
                    (t - p).abs() / den
                }
            })
            .collect(),
    );
    Ok(200.0 * total / truth.len() as f64)
}

pub fn mape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    paired("mape", truth, pred)?;
    if truth.contains(&0.0) {
        return Err(Error::DegenerateSeries("MAPE undefined for zero truth values".into()));
    }
    let total: f64 = truth.iter().zip(pred).map(|(t, p)| ((t - p) / t).abs()).sum();
    Ok(100.0 * total / truth.len() as f64)
}

/// Mean absolute error scaled by the in-sample seasonal-naive error at lag `m`.
pub fn mase(truth: &[f64], pred: &[f64], insample: &[f64], m: usize) -> Result<f64> {
    paired("mase", truth, pred)?;
    if m == 0 || insample.len() <= m {
        return contract(format!("MASE needs more than m = {m} in-sample points"));
    }
    let scale = insample.windows(m + 1).map(|w| (w[m] - w[0]).abs()).sum::<f64>() / (insample.len() - m) as f64;
    if scale == 0.0 {
        return Err(Error::DegenerateSeries(format!(
            "in-sample series has zero seasonal difference at lag {m}"
        )));
    }
    let mae = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / truth.len() as f64;
    Ok(mae / scale)
}

/// Overall weighted average of SMAPE and MASE relative to Naive2.
pub fn owa(smape: f64, mase: f64, naive2_smape: f64, naive2_mase: f64) -> Result<f64> {
    if !(naive2_smape > 0.0 && naive2_mase > 0.0) {
        return contract("Naive2 reference values must be positive");
    }
    Ok(0.5 * (smape / naive2_smape + mase / naive2_mase))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct M4Metrics {
    pub smape: f64,
    pub mape: f64,
    pub mase: f64,
    pub owa: f64,
}

pub fn m4_metrics(
    truth: &[f64],
    pred: &[f64],
    insample: &[f64],
    m: usize,
    naive2_smape: f64,
    naive2_mase: f64,
) -> Result<M4Metrics> {
    let s = smape(truth, pred)?;
    let ms = mase(truth, pred, insample, m)?;
    Ok(M4Metrics {
        smape: s,
        mape: mape(truth, pred)?,
        mase: ms,
        owa: owa(s, ms, naive2_smape, naive2_mase)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Marks every point of a true anomalous segment as detected when any
/// point inside it is flagged.
pub fn point_adjust(truth: &[bool], pred: &[bool]) -> Vec<bool> {
    let mut out = pred.to_vec();
    let mut i = 0;
    while i < truth.len() {
        if !truth[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < truth.len() && truth[i] {
            i += 1;
        }
        if pred[start..i].iter().any(|&p| p) {
            out[start..i].iter_mut().for_each(|p| *p = true);
        }
    }
    out
}

pub fn detection_metrics(truth: &[bool], pred: &[bool], point_adjusted: bool) -> Result<Detection> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension {
            kernel: "detection_metrics",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    let adjusted;
    let pred = if point_adjusted {
        adjusted = point_adjust(truth, pred);
        &adjusted[..]
    } else {
        pred
    };
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&t, &p) in truth.iter().zip(pred) {
        match (t, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Detection { precision, recall, f1 })
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension {
            kernel: "accuracy",
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    if truth.is_empty() {
        return contract("accuracy of empty label sets");
    }
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn acf(x: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let den: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if den == 0.0 {
        return None;
    }
    Some(
        (1..=max_lag)
            .map(|k| {
                x.iter()
                    .zip(&x[k..])
                    .map(|(a, b)| (a - mean) * (b - mean))
                    .sum::<f64>()
                    / den
            })
            .collect(),
    )
}

/// 90% autocorrelation test for seasonality at lag `m`.
pub fn seasonality_test(insample: &[f64], m: usize) -> bool {
    if m <= 1 || insample.len() < 3 * m {
        return false;
    }
    let Some(r) = acf(insample, m) else { return false };
    let sum_sq: f64 = r[..m - 1].iter().map(|v| v * v).sum();
    let limit = 1.645 * ((1.0 + 2.0 * sum_sq) / insample.len() as f64).sqrt();
    r[m - 1].abs() > limit
}

/// Multiplicative seasonal indices from a centred moving average, one per
/// position modulo `m`, normalized to mean 1.
fn seasonal_indices(x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    let half = m / 2;
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for t in half..n - half {
        let cma = if m % 2 == 1 {
            x[t - half..=t + half].iter().sum::<f64>() / m as f64
        } else {
            (0.5 * x[t - half] + x[t - half + 1..t + half].iter().sum::<f64>() + 0.5 * x[t + half]) / m as f64
        };
        sums[t % m] += x[t] / cma;
        counts[t % m] += 1;
    }
    let raw: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let mean = raw.iter().sum::<f64>() / m as f64;
    raw.iter().map(|v| v / mean).collect()
}

/// Seasonally adjusted naive forecast.
///
/// The insample is deseasonalized by multiplicative classical decomposition
/// when it passes [`seasonality_test`] and is strictly positive; the last
/// adjusted value is repeated and the seasonal pattern reapplied.
pub fn naive2_forecast(insample: &[f64], m: usize, horizon: usize) -> Result<Vec<f64>> {
    if m == 0 || insample.len() < 2 * m || insample.is_empty() {
        return contract(format!("Naive2 needs at least 2m = {} in-sample points", 2 * m.max(1)));
    }
    let n = insample.len();
    let seasonal = seasonality_test(insample, m) && insample.iter().all(|&v| v > 0.0);
    if !seasonal {
        return Ok(vec![insample[n - 1]; horizon]);
    }
    let idx = seasonal_indices(insample, m);
    let level = insample[n - 1] / idx[(n - 1) % m];
    Ok((0..horizon).map(|h| level * idx[(n + h) % m]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_examples() {
        let r = regression_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.mse, r.mae), (0.0, 0.0));
        let r = regression_metrics(&[0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert_eq!((r.mse, r.mae), (1.0, 1.0));
        let r = regression_metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!((r.mse - 2.0 / 3.0).abs() < 1e-15 && (r.mae - 2.0 / 3.0).abs() < 1e-15);
        assert!(regression_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(regression_metrics(&[], &[]).is_err());
    }

    #[test]
    fn m4_examples() {
        let m = m4_metrics(&[100.0], &[110.0], &[90.0, 95.0, 100.0], 1, 5.0, 1.0).unwrap();
        assert!((m.smape - 2000.0 / 210.0).abs() < 1e-12);
        assert!((m.mape - 10.0).abs() < 1e-12);
        let perfect = m4_metrics(&[3.0, 4.0], &[3.0, 4.0], &[1.0, 2.0, 4.0], 1, 2.0, 3.0).unwrap();
        assert_eq!((perfect.smape, perfect.mase, perfect.owa), (0.0, 0.0, 0.0));
        assert_eq!(owa(7.5, 1.3, 7.5, 1.3).unwrap(), 1.0);
    }

    #[test]
    fn mase_denominator() {
        // seasonal differences at lag 2: |3-1|, |4-2| -> scale 2
        let v = mase(&[10.0], &[14.0], &[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(v, 2.0);
        let e = mase(&[1.0], &[2.0], &[5.0, 6.0, 5.0, 6.0], 2).unwrap_err();
        assert!(matches!(e, Error::DegenerateSeries(_)));
    }

    #[test]
    fn smape_zero_pairs_count_as_exact() {
        assert_eq!(smape(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(smape(&[0.0], &[5.0]).unwrap(), 200.0);
    }

    #[test]
    fn detection_examples() {
        let t = [true, false, true, true, false];
        let d = detection_metrics(&t, &t, false).unwrap();
        assert_eq!((d.precision, d.recall, d.f1), (1.0, 1.0, 1.0));

        // TP = 2, FP = 1, FN = 2
        let truth = [true, true, true, true, false, false];
        let pred = [true, false, true, false, true, false];
        let d = detection_metrics(&truth, &pred, false).unwrap();
        assert!((d.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.recall, 0.5);
        assert!((d.f1 - 4.0 / 7.0).abs() < 1e-15);

        let d = detection_metrics(&[true, false], &[false, false], false).unwrap();
        assert_eq!(d.f1, 0.0);
    }

    #[test]
    fn point_adjust_credits_segments() {
        let truth = [false, true, true, true, false, true, true];
        let pred = [false, false, true, false, false, false, false];
        assert_eq!(point_adjust(&truth, &pred), vec![false, true, true, true, false, false, false]);
        let d = detection_metrics(&truth, &pred, true).unwrap();
        assert_eq!(d.precision, 1.0);
        assert_eq!(d.recall, 0.6);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn naive2_examples() {
        let x = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        assert_eq!(naive2_forecast(&x, 1, 3).unwrap(), vec![6.0; 3]);
        assert_eq!(naive2_forecast(&[2.5; 12], 4, 5).unwrap(), vec![2.5; 5]);
        assert!(naive2_forecast(&x, 5, 2).is_err());

        let period = [2.0, 5.0, 3.0, 8.0, 1.0, 4.0];
        let series: Vec<f64> = period.iter().copied().cycle().take(48).collect();
        assert!(seasonality_test(&series, 6));
        let f = naive2_forecast(&series, 6, 6).unwrap();
        for (a, b) in f.iter().zip(&series[42..]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn report_rejects_bad_values() {
        assert!(MetricReport::new("x", 0).is_err());
        let mut r = MetricReport::new("forecast", 4).unwrap();
        assert!(r.insert("mse", f64::NAN).is_err());
        r.insert("mse", 0.5).unwrap();
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
