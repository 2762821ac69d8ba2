//! End-to-end task runs on a dataset: normalize, window, train, predict in
//! original units and score.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Ablation, BackboneOutput, CaformerConfig, CaformerParams};
use crate::data::{
    make_reconstruction_windows, make_windows, Part, Sample, Scaler, SeriesDataset, Split, Target, TaskPayload,
};
use crate::error::{contract, Error, Result};
use crate::heads::{anomaly_scores, flag_anomalies, threshold, HeadConfig, Task};
use crate::metrics::{accuracy, detection_metrics, regression_metrics, MetricReport};
use crate::numerics::NdArray;
use crate::training::{predict, predict_with_diagnostics, train, TrainConfig, TrainData, TrainOutcome};

/// Window strides and evaluation switches shared by the task runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineOptions {
    pub train_stride: usize,
    pub eval_stride: usize,
    pub point_adjust: bool,
    /// Evaluate these parameters instead of training.
    #[serde(skip)]
    pub pretrained: Option<CaformerParams>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            train_stride: 1,
            eval_stride: 1,
            point_adjust: true,
            pretrained: None,
        }
    }
}

/// Truth and prediction of one evaluated stretch, `M x T` in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub dim_names: Vec<String>,
    pub truth: NdArray,
    pub pred: NdArray,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: MetricReport,
    pub outcome: TrainOutcome,
    pub overlay: Option<Overlay>,
    /// Backbone diagnostics of a representative test input.
    pub diagnostics: Option<BackboneOutput>,
}

fn check_dims(ds: &SeriesDataset, model: &CaformerConfig) -> Result<()> {
    if ds.dims() != model.dims {
        return contract(format!("dataset has {} dimensions, model expects {}", ds.dims(), model.dims));
    }
    Ok(())
}

fn expect_task(head: &HeadConfig, ok: bool, what: &str) -> Result<()> {
    if !ok {
        return contract(format!("{what} run needs a matching head, got {}", head.task));
    }
    Ok(())
}

fn fit(
    model: &CaformerConfig,
    head: &HeadConfig,
    tc: &TrainConfig,
    opts: &PipelineOptions,
    data: &TrainData,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let Some(params) = &opts.pretrained else {
        return train(model, head, tc, data, log);
    };
    let expected = CaformerParams::init(model, head, 0)?;
    for (name, arr) in &expected.tensors {
        match params.tensors.get(name) {
            Some(p) if p.shape() == arr.shape() => {}
            _ => return contract(format!("pretrained parameters do not fit the model at {name}")),
        }
    }
    if params.tensors.len() != expected.tensors.len() {
        return contract("pretrained parameters hold tensors the model does not use");
    }
    Ok(TrainOutcome {
        params: params.clone(),
        log: Vec::new(),
        best_epoch: 0,
    })
}

fn predict_all(model: &CaformerConfig, head: &HeadConfig, outcome: &TrainOutcome, samples: &[Sample]) -> Result<Vec<NdArray>> {
    samples
        .par_iter()
        .map(|s| predict(model, head, &outcome.params, &s.input))
        .collect()
}

fn diagnostics(model: &CaformerConfig, head: &HeadConfig, outcome: &TrainOutcome, input: &NdArray) -> Result<BackboneOutput> {
    Ok(predict_with_diagnostics(model, head, &outcome.params, input)?.1)
}

fn append_rows(dst: &mut [Vec<f64>], arr: &NdArray) {
    let t = arr.shape()[1];
    for (d, row) in dst.iter_mut().enumerate() {
        row.extend_from_slice(&arr.data()[d * t..(d + 1) * t]);
    }
}

/// Multi-step forecasting on a single series. Metrics are in original units
/// and include the persistence baseline that repeats the last input value.
pub fn run_forecast(
    ds: &SeriesDataset,
    model: &CaformerConfig,
    head: &HeadConfig,
    tc: &TrainConfig,
    opts: &PipelineOptions,
    log: Option<&mut dyn Write>,
) -> Result<RunResult> {
    check_dims(ds, model)?;
    expect_task(head, head.task.is_forecast(), "forecast")?;
    let horizon = head.horizon.unwrap_or(0);
    let scaler = Scaler::fit(ds);
    let norm = scaler.transform_dataset(ds);
    let l_in = model.input_len;
    let data = TrainData {
        train: make_windows(&norm, Part::Train, l_in, horizon, opts.train_stride)?,
        val: make_windows(&norm, Part::Val, l_in, horizon, opts.eval_stride)?,
    };
    let test = make_windows(&norm, Part::Test, l_in, horizon, opts.eval_stride)?;
    if test.is_empty() {
        return contract("test segment holds no forecast window");
    }
    let outcome = fit(model, head, tc, opts, &data, log)?;
    let preds = predict_all(model, head, &outcome, &test)?;

    let m = ds.dims();
    let (mut truth, mut pred, mut naive) = (vec![Vec::new(); m], vec![Vec::new(); m], vec![Vec::new(); m]);
    for (s, p) in test.iter().zip(&preds) {
        let target = ds.slice(s.start + l_in, s.start + l_in + horizon);
        append_rows(&mut truth, &target);
        append_rows(&mut pred, &scaler.inverse(p));
        let last = ds.slice(s.start + l_in - 1, s.start + l_in);
        for (d, row) in naive.iter_mut().enumerate() {
            row.extend(std::iter::repeat_n(last.data()[d], horizon));
        }
    }
    let flat = |v: &[Vec<f64>]| v.concat();
    let model_err = regression_metrics(&flat(&truth), &flat(&pred))?;
    let naive_err = regression_metrics(&flat(&truth), &flat(&naive))?;
    let mut report = MetricReport::new(head.task.to_string(), test.len())?;
    report.insert("mse", model_err.mse)?;
    report.insert("mae", model_err.mae)?;
    report.insert("persistence_mse", naive_err.mse)?;
    report.insert("persistence_mae", naive_err.mae)?;

    let last = test.last().expect("non-empty test windows");
    let overlay = Overlay {
        dim_names: ds.dim_names.clone(),
        truth: ds.slice(last.start + l_in, last.start + l_in + horizon),
        pred: scaler.inverse(preds.last().expect("one prediction per window")),
    };
    let diag = diagnostics(model, head, &outcome, &last.input)?;
    Ok(RunResult {
        report,
        outcome,
        overlay: Some(overlay),
        diagnostics: Some(diag),
    })
}

/// Averages window outputs over every covered step of `[seg_start, seg_end)`.
fn stitch(samples: &[Sample], outputs: &[NdArray], m: usize, seg_start: usize, seg_end: usize) -> Result<NdArray> {
    let len = seg_end - seg_start;
    let mut sum = vec![0.0; m * len];
    let mut count = vec![0usize; len];
    for (s, out) in samples.iter().zip(outputs) {
        let w = out.shape()[1];
        for t in 0..w {
            let g = s.start + t;
            if g < seg_start || g >= seg_end {
                continue;
            }
            count[g - seg_start] += 1;
            for d in 0..m {
                sum[d * len + g - seg_start] += out.data()[d * w + t];
            }
        }
    }
    if count.contains(&0) {
        return contract("windows leave steps of the segment uncovered");
    }
    let data = sum.iter().enumerate().map(|(i, v)| v / count[i % len] as f64).collect();
    NdArray::new(vec![m, len], data)
}

/// Imputation of a masked series. Scores only the hidden entries of the test
/// segment; the baseline fills each hidden entry with the mean of the
/// observed entries of its dimension in the test segment.
pub fn run_imputation(
    ds: &SeriesDataset,
    model: &CaformerConfig,
    head: &HeadConfig,
    tc: &TrainConfig,
    opts: &PipelineOptions,
    log: Option<&mut dyn Write>,
) -> Result<RunResult> {
    check_dims(ds, model)?;
    expect_task(head, head.task == Task::Imputation, "imputation")?;
    let mask = ds.mask().ok_or_else(|| Error::Contract("imputation needs a masked dataset".into()))?;
    let scaler = Scaler::fit(ds);
    let norm = scaler.transform_dataset(ds);
    let l_in = model.input_len;
    let data = TrainData {
        train: make_reconstruction_windows(&norm, Part::Train, l_in, opts.train_stride)?,
        val: make_reconstruction_windows(&norm, Part::Val, l_in, opts.eval_stride)?,
    };
    let test = make_reconstruction_windows(&norm, Part::Test, l_in, opts.eval_stride)?;
    if test.is_empty() {
        return contract("test segment shorter than the input window");
    }
    let outcome = fit(model, head, tc, opts, &data, log)?;
    let preds: Vec<NdArray> = predict_all(model, head, &outcome, &test)?
        .iter()
        .map(|p| scaler.inverse(p))
        .collect();
    let (a, b) = ds.split.segment(Part::Test, ds.len());
    let filled = stitch(&test, &preds, ds.dims(), a, b)?;
    let truth = ds.slice(a, b);
    let (m, len, l) = (ds.dims(), b - a, ds.len());

    let (mut t_hidden, mut p_hidden, mut base_hidden) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..m {
        let hidden = |t: usize| mask[d * l + a + t];
        let observed: Vec<f64> = (0..len).filter(|&t| !hidden(t)).map(|t| truth.get(&[d, t])).collect();
        let fill = if observed.is_empty() {
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        for t in (0..len).filter(|&t| hidden(t)) {
            t_hidden.push(truth.get(&[d, t]));
            p_hidden.push(filled.get(&[d, t]));
            base_hidden.push(fill);
        }
    }
    if t_hidden.is_empty() {
        return contract("no hidden entries in the test segment");
    }
    let err = regression_metrics(&t_hidden, &p_hidden)?;
    let base = regression_metrics(&t_hidden, &base_hidden)?;
    let mut report = MetricReport::new("imputation", t_hidden.len())?;
    report.insert("mse", err.mse)?;
    report.insert("mae", err.mae)?;
    report.insert("mean_fill_mse", base.mse)?;
    report.insert("mean_fill_mae", base.mae)?;
    let diag = diagnostics(model, head, &outcome, &test[0].input)?;
    Ok(RunResult {
        report,
        outcome,
        overlay: Some(Overlay {
            dim_names: ds.dim_names.clone(),
            truth,
            pred: filled,
        }),
        diagnostics: Some(diag),
    })
}

/// Start indices of every window of `l_in` steps that covers part of
/// `[seg_start, seg_end)` without reaching past `seg_end`.
fn scoring_starts(l_in: usize, seg: (usize, usize)) -> Vec<usize> {
    if seg.1 < l_in {
        return Vec::new();
    }
    ((seg.0 + 1).saturating_sub(l_in)..=seg.1 - l_in).collect()
}

/// Window scores divided by their median, so each step is judged against
/// the typical error of its own window.
fn relative_to_median(scores: &[f64]) -> Result<Vec<f64>> {
    let med = median(scores);
    if med.is_nan() || med <= 0.0 {
        return Err(Error::NonFinite("median window reconstruction error".into()));
    }
    Ok(scores.iter().map(|s| s / med).collect())
}

/// Per-step anomaly scores over `[seg_start, seg_end)`. Every window ending
/// inside the segment scores the steps it covers relative to its median
/// error, and each step keeps its smallest score.
fn segment_scores(
    model: &CaformerConfig,
    head: &HeadConfig,
    outcome: &TrainOutcome,
    norm: &SeriesDataset,
    seg: (usize, usize),
) -> Result<Vec<f64>> {
    let l_in = model.input_len;
    let starts = scoring_starts(l_in, seg);
    let per_window: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let input = norm.slice(s, s + l_in);
            let recon = predict(model, head, &outcome.params, &input)?;
            relative_to_median(&anomaly_scores(&recon, &input)?)
        })
        .collect::<Result<_>>()?;
    let mut best = vec![f64::INFINITY; seg.1 - seg.0];
    for (&s, scores) in starts.iter().zip(&per_window) {
        for (t, &v) in scores.iter().enumerate() {
            let g = s + t;
            if (seg.0..seg.1).contains(&g) {
                best[g - seg.0] = best[g - seg.0].min(v);
            }
        }
    }
    if best.iter().any(|v| v.is_infinite()) {
        return contract("windows leave steps of the segment uncovered");
    }
    Ok(best)
}

/// Reconstruction-based anomaly detection with a validation-quantile
/// threshold.
pub fn run_anomaly(
    ds: &SeriesDataset,
    model: &CaformerConfig,
    head: &HeadConfig,
    tc: &TrainConfig,
    opts: &PipelineOptions,
    log: Option<&mut dyn Write>,
) -> Result<RunResult> {
    check_dims(ds, model)?;
    expect_task(head, head.task == Task::Anomaly, "anomaly")?;
    let labels = ds
        .anomaly_labels()
        .ok_or_else(|| Error::Contract("anomaly detection needs step labels".into()))?;
    let scaler = Scaler::fit(ds);
    let norm = scaler.transform_dataset(ds);
    let l_in = model.input_len;
    let data = TrainData {
        train: make_reconstruction_windows(&norm, Part::Train, l_in, opts.train_stride)?,
        val: Vec::new(),
    };
    let val = make_reconstruction_windows(&norm, Part::Val, l_in, opts.eval_stride)?;
    let test = make_reconstruction_windows(&norm, Part::Test, l_in, opts.eval_stride)?;
    if val.is_empty() || test.is_empty() {
        return contract("validation and test segments must each hold one input window");
    }
    let outcome = fit(model, head, tc, opts, &data, log)?;
    let val_seg = ds.split.segment(Part::Val, ds.len());
    let test_seg = ds.split.segment(Part::Test, ds.len());
    let val_scores = segment_scores(model, head, &outcome, &norm, val_seg)?;
    let test_scores = segment_scores(model, head, &outcome, &norm, test_seg)?;
    let thr = threshold(&val_scores, head.quantile)?;
    let flags = flag_anomalies(&test_scores, thr);
    let det = detection_metrics(&labels[test_seg.0..test_seg.1], &flags, opts.point_adjust)?;
    let mut report = MetricReport::new("anomaly", flags.len())?;
    report.insert("precision", det.precision)?;
    report.insert("recall", det.recall)?;
    report.insert("f1", det.f1)?;
    report.insert("threshold", thr)?;

    let recon: Vec<NdArray> = predict_all(model, head, &outcome, &test)?
        .iter()
        .map(|p| scaler.inverse(p))
        .collect();
    let diag = diagnostics(model, head, &outcome, &test[0].input)?;
    Ok(RunResult {
        report,
        outcome,
        overlay: Some(Overlay {
            dim_names: ds.dim_names.clone(),
            truth: ds.slice(test_seg.0, test_seg.1),
            pred: stitch(&test, &recon, ds.dims(), test_seg.0, test_seg.1)?,
        }),
        diagnostics: Some(diag),
    })
}

fn class_of(ds: &SeriesDataset) -> Result<usize> {
    match ds.payload {
        TaskPayload::Class(c) => Ok(c),
        _ => contract("classification series need a class label"),
    }
}

/// Whole-series classification over a labelled collection split 70/10/20 in
/// order.
pub fn run_classification(
    collection: &[SeriesDataset],
    model: &CaformerConfig,
    head: &HeadConfig,
    tc: &TrainConfig,
    opts: &PipelineOptions,
    log: Option<&mut dyn Write>,
) -> Result<RunResult> {
    expect_task(head, head.task == Task::Classification, "classification")?;
    if collection.len() < 10 {
        return contract("classification needs at least 10 series");
    }
    for ds in collection {
        check_dims(ds, model)?;
        if ds.len() != model.input_len {
            return contract(format!("series of length {} but input_len {}", ds.len(), model.input_len));
        }
    }
    let split = Split::default_for(collection.len())?;
    let train_rows: Vec<&NdArray> = collection[..split.train_end].iter().map(|d| &d.values).collect();
    let m = model.dims;
    let mut stacked = vec![Vec::new(); m];
    for v in &train_rows {
        append_rows(&mut stacked, v);
    }
    let width = stacked[0].len();
    let scaler = Scaler::fit_array(&NdArray::new(vec![m, width], stacked.concat())?);
    let samples: Vec<Sample> = collection
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            Ok(Sample {
                input: scaler.transform(&ds.values),
                target: Target::Class(class_of(ds)?),
                mask: None,
                start: i,
            })
        })
        .collect::<Result<_>>()?;
    let data = TrainData {
        train: samples[..split.train_end].to_vec(),
        val: samples[split.train_end..split.val_end].to_vec(),
    };
    let test = &samples[split.val_end..];
    let outcome = fit(model, head, tc, opts, &data, log)?;
    let logits = predict_all(model, head, &outcome, test)?;
    let pred: Vec<usize> = logits
        .iter()
        .map(|l| {
            l.data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    let truth: Vec<usize> = test
        .iter()
        .map(|s| match s.target {
            Target::Class(c) => c,
            Target::Series(_) => unreachable!("class targets built above"),
        })
        .collect();
    let mut report = MetricReport::new("classification", test.len())?;
    report.insert("accuracy", accuracy(&truth, &pred)?)?;
    let diag = diagnostics(model, head, &outcome, &test[0].input)?;
    Ok(RunResult {
        report,
        outcome,
        overlay: None,
        diagnostics: Some(diag),
    })
}

/// Forecast errors of one model variant across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub mse: Vec<f64>,
    pub mae: Vec<f64>,
    pub median_mse: f64,
    pub median_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub fn row(&self, variant: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Whether the full model's median MSE is at most `factor` times the
    /// median of every ablated variant.
    pub fn full_within(&self, factor: f64) -> bool {
        let Some(full) = self.row(Ablation::Full) else { return false };
        self.rows
            .iter()
            .filter(|r| r.variant != Ablation::Full)
            .all(|r| full.median_mse <= factor * r.median_mse)
    }

    /// Markdown table with one column per variant.
    pub fn render(&self) -> String {
        let mut out = String::from("| Metric |");
        for r in &self.rows {
            out.push_str(&format!(" {} |", r.variant.label()));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.rows.len()));
        for (name, pick) in [("MSE", 0), ("MAE", 1)] {
            out.push_str(&format!("\n| {name} |"));
            for r in &self.rows {
                let v = if pick == 0 { r.median_mse } else { r.median_mae };
                out.push_str(&format!(" {v:.4} |"));
            }
        }
        out.push('\n');
        out
    }
}

/// Forecasting with each of the four variants under every seed, all other
/// settings shared.
pub fn ablation_run(
    ds: &SeriesDataset,
    model: &CaformerConfig,
    head: &HeadConfig,
    tc: &TrainConfig,
    opts: &PipelineOptions,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return contract("ablation needs at least one seed");
    }
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for variant in Ablation::ALL {
        let mut cfg = model.clone();
        cfg.ablation = variant;
        let (mut mse, mut mae) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let tc = TrainConfig { seed, ..tc.clone() };
            let run = run_forecast(ds, &cfg, head, &tc, opts, None)?;
            mse.push(run.report.get("mse").unwrap_or(f64::NAN));
            mae.push(run.report.get("mae").unwrap_or(f64::NAN));
            log::info!("ablation {variant} seed {seed}: mse {:.5}", mse.last().unwrap());
        }
        rows.push(AblationRow {
            variant,
            median_mse: median(&mse),
            median_mae: median(&mae),
            mse,
            mae,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
