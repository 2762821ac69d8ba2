//! Task heads on top of the backbone features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_trace, bound, BackboneTrace, Bound, CaformerConfig, Init};
use crate::error::{contract, Error, Result};
use crate::numerics::{NdArray, ParamMap, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[serde(alias = "forecast")]
    LongForecast,
    ShortForecast,
    #[serde(alias = "impute")]
    Imputation,
    #[serde(alias = "classify")]
    Classification,
    #[serde(alias = "detect")]
    Anomaly,
}

impl Task {
    pub fn is_forecast(self) -> bool {
        matches!(self, Task::LongForecast | Task::ShortForecast)
    }

    pub fn is_reconstruction(self) -> bool {
        matches!(self, Task::Imputation | Task::Anomaly)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::LongForecast => "long_forecast",
            Task::ShortForecast => "short_forecast",
            Task::Imputation => "imputation",
            Task::Classification => "classification",
            Task::Anomaly => "anomaly",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forecast" | "long_forecast" => Ok(Task::LongForecast),
            "short_forecast" => Ok(Task::ShortForecast),
            "imputation" | "impute" => Ok(Task::Imputation),
            "classification" | "classify" => Ok(Task::Classification),
            "anomaly" | "detect" => Ok(Task::Anomaly),
            other => contract(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub task: Task,
    /// Forecast horizon `H`.
    pub horizon: Option<usize>,
    pub num_classes: Option<usize>,
    /// Validation-score quantile used as anomaly threshold.
    pub quantile: f64,
}

impl HeadConfig {
    pub fn forecast(horizon: usize) -> Self {
        Self {
            task: Task::LongForecast,
            horizon: Some(horizon),
            num_classes: None,
            quantile: 0.99,
        }
    }

    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            horizon: None,
            num_classes: None,
            quantile: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.is_forecast() && !self.horizon.is_some_and(|h| h >= 1) {
            return contract("forecast heads need a horizon of at least 1");
        }
        if self.task == Task::Classification && !self.num_classes.is_some_and(|c| c >= 2) {
            return contract("classification needs at least 2 classes");
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return contract(format!("quantile {} outside (0, 1)", self.quantile));
        }
        Ok(())
    }
}

pub(crate) fn init_head_params(map: &mut ParamMap, init: &mut Init, cfg: &CaformerConfig, head: &HeadConfig) -> Result<()> {
    head.validate()?;
    let n = cfg.num_patches()?;
    let ne = n * cfg.embed_dim;
    let (name, fan_in, out) = match head.task {
        Task::LongForecast | Task::ShortForecast => ("forecast", ne, head.horizon.unwrap_or(1)),
        Task::Imputation | Task::Anomaly => ("recon", ne, cfg.input_len),
        Task::Classification => ("cls", ne * cfg.dims, head.num_classes.unwrap_or(2)),
    };
    map.insert(format!("head.{name}.weight"), init.uniform(&[fan_in, out], fan_in));
    map.insert(format!("head.{name}.bias"), NdArray::zeros(&[out]));
    Ok(())
}

/// `N x M x E` features as `M x (N E)` rows, one per dimension.
fn per_dimension_rows(tape: &mut Tape, s: Var) -> Result<Var> {
    let sh = tape.shape(s).to_vec();
    let by_dim = tape.permute(s, &[1, 0, 2])?;
    tape.reshape(by_dim, &[sh[1], sh[0] * sh[2]])
}

fn head_weights(tape: &Tape, vars: &Bound, name: &str, fan_in: usize) -> Result<(Var, Var)> {
    let w = bound(vars, &format!("head.{name}.weight"))?;
    let b = bound(vars, &format!("head.{name}.bias"))?;
    if tape.shape(w)[0] != fan_in {
        return Err(Error::Dimension {
            kernel: "head",
            lhs: vec![fan_in],
            rhs: tape.shape(w).to_vec(),
        });
    }
    Ok((w, b))
}

/// Shared affine map `(N E) -> H` per dimension. Returns `M x H` in
/// patch-normalized units.
pub fn forecast_head(tape: &mut Tape, vars: &Bound, s: Var) -> Result<Var> {
    let rows = per_dimension_rows(tape, s)?;
    let (w, b) = head_weights(tape, vars, "forecast", tape.shape(rows)[1])?;
    tape.linear(rows, w, Some(b))
}

/// Shared affine map `(N E) -> L_in` per dimension. Returns `M x L_in`.
pub fn reconstruction_head(tape: &mut Tape, vars: &Bound, s: Var) -> Result<Var> {
    let rows = per_dimension_rows(tape, s)?;
    let (w, b) = head_weights(tape, vars, "recon", tape.shape(rows)[1])?;
    tape.linear(rows, w, Some(b))
}

/// Affine map of all features to `1 x num_classes` logits.
pub fn classification_head(tape: &mut Tape, vars: &Bound, s: Var) -> Result<Var> {
    let n = tape.value(s).numel();
    let flat = tape.reshape(s, &[1, n])?;
    let (w, b) = head_weights(tape, vars, "cls", n)?;
    tape.linear(flat, w, Some(b))
}

/// `out * scale + shift` with constant `scale` and `shift`.
fn rescale(tape: &mut Tape, out: Var, scale: NdArray, shift: NdArray) -> Result<Var> {
    let sc = tape.constant(scale);
    let sh = tape.constant(shift);
    let y = tape.mul(out, sc)?;
    tape.add(y, sh)
}

/// Backbone plus the configured head.
///
/// Series outputs are mapped back from patch-normalized units: forecasts use
/// the statistics of each dimension's final patch, reconstructions the
/// per-step average over covering patches. Classification returns logits.
pub fn model_forward(
    tape: &mut Tape,
    vars: &Bound,
    cfg: &CaformerConfig,
    head: &HeadConfig,
    input: &NdArray,
) -> Result<(Var, BackboneTrace)> {
    let trace = backbone_trace(tape, vars, cfg, input)?;
    let s = trace.s_temporal;
    let out = match head.task {
        Task::LongForecast | Task::ShortForecast => {
            let y = forecast_head(tape, vars, s)?;
            let h = tape.shape(y)[1];
            let stats = trace.patches.last_patch_stats().expect("normalized patches");
            let scale: Vec<f64> = stats.iter().flat_map(|st| std::iter::repeat_n(st.scale, h)).collect();
            let shift: Vec<f64> = stats.iter().flat_map(|st| std::iter::repeat_n(st.mean, h)).collect();
            let shape = vec![cfg.dims, h];
            rescale(
                tape,
                y,
                NdArray::from_parts(shape.clone(), scale),
                NdArray::from_parts(shape, shift),
            )?
        }
        Task::Imputation | Task::Anomaly => {
            let y = reconstruction_head(tape, vars, s)?;
            let (means, scales) = trace.patches.step_stats().expect("normalized patches");
            rescale(tape, y, scales, means)?
        }
        Task::Classification => classification_head(tape, vars, s)?,
    };
    Ok((out, trace))
}

/// Per-step anomaly score: mean over dimensions of the squared
/// reconstruction error. Both arrays are `M x L`.
pub fn anomaly_scores(recon: &NdArray, observed: &NdArray) -> Result<Vec<f64>> {
    if recon.shape() != observed.shape() || recon.ndim() != 2 {
        return Err(Error::Dimension {
            kernel: "anomaly_scores",
            lhs: recon.shape().to_vec(),
            rhs: observed.shape().to_vec(),
        });
    }
    let (m, l) = (recon.shape()[0], recon.shape()[1]);
    Ok((0..l)
        .map(|t| {
            (0..m)
                .map(|d| (recon.data()[d * l + t] - observed.data()[d * l + t]).powi(2))
                .sum::<f64>()
                / m as f64
        })
        .collect())
}

/// Quantile of `scores` by linear interpolation between order statistics
/// (position `q (n - 1)` in the sorted sample).
pub fn threshold(scores: &[f64], quantile: f64) -> Result<f64> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return contract(format!("quantile {quantile} outside (0, 1)"));
    }
    if scores.is_empty() {
        return contract("threshold of an empty score set");
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = quantile * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn flag_anomalies(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::backbone::CaformerParams;

    fn tiny() -> CaformerConfig {
        let mut cfg = CaformerConfig::new(4, 96).with_embed_dim(8);
        cfg.blocks = 1;
        cfg.align_size = 12;
        cfg
    }

    #[test]
    fn forecast_shape_and_zero_weights() {
        let cfg = tiny();
        let head = HeadConfig::forecast(48);
        let mut params = CaformerParams::init(&cfg, &head, 1).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind_frozen(&params.tensors);
        let s = tape.constant(NdArray::full(&[12, 4, 8], 0.3));
        let y = forecast_head(&mut tape, &vars, s).unwrap();
        assert_eq!(tape.shape(y), &[4, 48]);

        *params.get_mut("head.forecast.weight").unwrap() = NdArray::zeros(&[96, 48]);
        let bias: Vec<f64> = (0..48).map(|i| i as f64 * 0.1).collect();
        *params.get_mut("head.forecast.bias").unwrap() = NdArray::new(vec![48], bias.clone()).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind_frozen(&params.tensors);
        let s = tape.constant(NdArray::full(&[12, 4, 8], -1.7));
        let y = forecast_head(&mut tape, &vars, s).unwrap();
        for d in 0..4 {
            assert_eq!(tape.value(y).row(d), &bias[..]);
        }
    }

    #[test]
    fn reconstruction_and_classification_shapes() {
        let cfg = tiny();
        let mut head = HeadConfig::for_task(Task::Imputation);
        let params = CaformerParams::init(&cfg, &head, 2).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind_frozen(&params.tensors);
        let s = tape.constant(NdArray::full(&[12, 4, 8], 0.1));
        let y = reconstruction_head(&mut tape, &vars, s).unwrap();
        assert_eq!(tape.shape(y), &[4, 96]);

        head = HeadConfig {
            num_classes: Some(2),
            ..HeadConfig::for_task(Task::Classification)
        };
        let params = CaformerParams::init(&cfg, &head, 2).unwrap();
        let mut tape = Tape::new();
        let vars = tape.bind_frozen(&params.tensors);
        let s = tape.constant(NdArray::full(&[12, 4, 8], 0.1));
        let y = classification_head(&mut tape, &vars, s).unwrap();
        assert_eq!(tape.shape(y), &[1, 2]);
    }

    #[test]
    fn equal_logits_give_uniform_probabilities() {
        let mut tape = Tape::new();
        let l = tape.constant(NdArray::full(&[1, 3], 2.5));
        let p = tape.softmax(l).unwrap();
        for v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn head_config_contracts() {
        assert!(HeadConfig::forecast(0).validate().is_err());
        assert!(HeadConfig::for_task(Task::Classification).validate().is_err());
        let mut h = HeadConfig::for_task(Task::Anomaly);
        h.quantile = 1.0;
        assert!(h.validate().is_err());
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let x = NdArray::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]).unwrap();
        let s = anomaly_scores(&x, &x).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert!(flag_anomalies(&s, 1e-9).iter().all(|&f| !f));
    }

    #[test]
    fn corrupted_step_has_max_score() {
        let x = NdArray::new(vec![2, 5], vec![0.0; 10]).unwrap();
        let mut y = x.clone();
        y.set(&[1, 3], 4.0);
        y.set(&[0, 1], 0.5);
        let s = anomaly_scores(&y, &x).unwrap();
        let argmax = s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 3);
        assert_eq!(s[3], 8.0);
    }

    #[test]
    fn quantile_of_thousand_scores() {
        let scores: Vec<f64> = (1..=1000).rev().map(f64::from).collect();
        // position 0.99 * 999 = 989.01 between the 990th and 991st order statistics
        let thr = threshold(&scores, 0.99).unwrap();
        assert!((thr - 990.01).abs() < 1e-9);
        assert!(threshold(&scores, 0.0).is_err());
        assert!(threshold(&scores, 1.0).is_err());
    }

    fn filled(shape: &[usize], phase: f64) -> NdArray {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| 0.5 * (i as f64 * 0.77 + phase).sin()).collect();
        NdArray::new(shape.to_vec(), data).unwrap()
    }

    fn check(params: &BTreeMap<String, NdArray>, f: impl Fn(&mut Tape, &Bound) -> Result<Var> + Sync) {
        let report = crate::numerics::grad_check(f, params, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "{} at {}[{}]",
            report.max_rel_error,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn series_head_gradients_match_finite_differences() {
        use crate::training::{loss_fn, LossKind};
        for (name, out) in [("forecast", 5), ("recon", 7)] {
            let mut params = BTreeMap::new();
            params.insert("s".to_string(), filled(&[3, 2, 4], 0.1));
            params.insert(format!("head.{name}.weight"), filled(&[12, out], 0.7));
            params.insert(format!("head.{name}.bias"), filled(&[out], 1.3));
            let target = filled(&[2, out], 2.9);
            check(&params, |tape, vars| {
                let y = if name == "forecast" {
                    forecast_head(tape, vars, vars["s"])?
                } else {
                    reconstruction_head(tape, vars, vars["s"])?
                };
                loss_fn(tape, y, &target, None, LossKind::Mse)
            });
        }
    }

    #[test]
    fn classification_gradients_match_finite_differences() {
        let mut params = BTreeMap::new();
        params.insert("s".to_string(), filled(&[3, 2, 4], 0.4));
        params.insert("head.cls.weight".to_string(), filled(&[24, 3], 0.2));
        params.insert("head.cls.bias".to_string(), filled(&[3], 1.1));
        for label in 0..3 {
            check(&params, |tape, vars| {
                let logits = classification_head(tape, vars, vars["s"])?;
                tape.cross_entropy(logits, &[label])
            });
        }
    }
}
