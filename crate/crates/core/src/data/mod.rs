//! Series datasets, normalization, windowing and masking.

mod csv_io;
mod synth;

pub use csv_io::{load_csv, load_mask_csv, write_mask_csv};
pub use synth::{synth_generate, two_class_collection, SynthKind, SynthParams};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::NdArray;

/// Train/validation/test boundaries as step indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
}

impl Split {
    /// 70/10/20 split of `len` steps.
    pub fn default_for(len: usize) -> Result<Self> {
        let split = Split {
            train_end: (len as f64 * 0.7).round() as usize,
            val_end: (len as f64 * 0.8).round() as usize,
        };
        split.validate(len)?;
        Ok(split)
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if !(0 < self.train_end && self.train_end < self.val_end && self.val_end <= len) {
            return contract(format!(
                "split ({}, {}) invalid for length {len}",
                self.train_end, self.val_end
            ));
        }
        Ok(())
    }

    /// `[start, end)` of one segment.
    pub fn segment(&self, part: Part, len: usize) -> (usize, usize) {
        match part {
            Part::Train => (0, self.train_end),
            Part::Val => (self.train_end, self.val_end),
            Part::Test => (self.val_end, len),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
}

/// Task-specific annotation carried by a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskPayload {
    None,
    Forecast { horizon: usize },
    /// `M x L` flags, true where the value is hidden.
    Imputation { mask: Vec<bool> },
    Class(usize),
    /// One flag per step, true on anomalous steps.
    Anomaly(Vec<bool>),
}

/// A multivariate series of `M` dimensions and `L` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    /// `M x L`.
    pub values: NdArray,
    pub dim_names: Vec<String>,
    pub split: Split,
    pub payload: TaskPayload,
}

impl SeriesDataset {
    pub fn new(values: NdArray, dim_names: Vec<String>, split: Split) -> Result<Self> {
        if values.ndim() != 2 || values.shape()[0] != dim_names.len() {
            return contract(format!(
                "values {:?} do not match {} dimension names",
                values.shape(),
                dim_names.len()
            ));
        }
        split.validate(values.shape()[1])?;
        Ok(Self {
            values,
            dim_names,
            split,
            payload: TaskPayload::None,
        })
    }

    pub fn dims(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mask(&self) -> Option<&[bool]> {
        match &self.payload {
            TaskPayload::Imputation { mask } => Some(mask),
            _ => None,
        }
    }

    pub fn anomaly_labels(&self) -> Option<&[bool]> {
        match &self.payload {
            TaskPayload::Anomaly(flags) => Some(flags),
            _ => None,
        }
    }

    /// Columns `[start, end)` of every dimension.
    pub fn slice(&self, start: usize, end: usize) -> NdArray {
        slice_steps(&self.values, start, end)
    }
}

pub(crate) fn slice_steps(values: &NdArray, start: usize, end: usize) -> NdArray {
    let (m, l) = (values.shape()[0], values.shape()[1]);
    let mut data = Vec::with_capacity(m * (end - start));
    for d in 0..m {
        data.extend_from_slice(&values.data()[d * l + start..d * l + end]);
    }
    NdArray::from_parts(vec![m, end - start], data)
}

/// Per-dimension z-score fitted on the train segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(ds: &SeriesDataset) -> Self {
        let train = ds.slice(0, ds.split.train_end);
        Self::fit_array(&train)
    }

    /// Fits on every column of an `M x L` array.
    pub fn fit_array(values: &NdArray) -> Self {
        let (m, l) = (values.shape()[0], values.shape()[1]);
        let mut mean = Vec::with_capacity(m);
        let mut std = Vec::with_capacity(m);
        for d in 0..m {
            let row = &values.data()[d * l..(d + 1) * l];
            let mu = row.iter().sum::<f64>() / l as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / l as f64;
            mean.push(mu);
            std.push(if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn transform(&self, values: &NdArray) -> NdArray {
        self.apply(values, |v, mu, sd| (v - mu) / sd)
    }

    pub fn inverse(&self, values: &NdArray) -> NdArray {
        self.apply(values, |v, mu, sd| v * sd + mu)
    }

    fn apply(&self, values: &NdArray, f: impl Fn(f64, f64, f64) -> f64) -> NdArray {
        let l = values.shape()[1];
        let data = values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let d = i / l;
                f(v, self.mean[d], self.std[d])
            })
            .collect();
        NdArray::from_parts(values.shape().to_vec(), data)
    }

    pub fn transform_dataset(&self, ds: &SeriesDataset) -> SeriesDataset {
        SeriesDataset {
            values: self.transform(&ds.values),
            ..ds.clone()
        }
    }
}

/// Supervision attached to one model input.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `M x H` future values, or `M x L_in` values for reconstruction.
    Series(NdArray),
    Class(usize),
}

/// One model input with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `M x L_in`.
    pub input: NdArray,
    pub target: Target,
    /// `M x L_in` hidden-entry flags for imputation.
    pub mask: Option<Vec<bool>>,
    /// Step index of the first input column in the source series.
    pub start: usize,
}

impl Sample {
    pub fn series_target(&self) -> Option<&NdArray> {
        match &self.target {
            Target::Series(a) => Some(a),
            Target::Class(_) => None,
        }
    }
}

/// A batch of windows stacked along a leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `B x M x L_in`.
    pub inputs: NdArray,
    pub targets: Vec<Target>,
}

impl WindowBatch {
    pub fn stack(samples: &[Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.input.shape());
        let mut data = Vec::with_capacity(shape.iter().product());
        for s in samples {
            if s.input.shape() != first.input.shape() {
                return contract("windows of differing shape");
            }
            data.extend_from_slice(s.input.data());
        }
        Ok(Self {
            inputs: NdArray::from_parts(shape, data),
            targets: samples.iter().map(|s| s.target.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Inclusive range of admissible input starts. Reconstruction windows lie
/// inside the segment. Forecast windows keep their targets inside the
/// segment; outside the train segment the input may look back into earlier
/// steps.
fn window_range(
    ds: &SeriesDataset,
    part: Part,
    input_len: usize,
    horizon: usize,
) -> Option<(usize, usize)> {
    let (seg_start, seg_end) = ds.split.segment(part, ds.len());
    let first = if horizon > 0 && part != Part::Train {
        seg_start.saturating_sub(input_len)
    } else {
        seg_start
    };
    let last = seg_end.checked_sub(input_len + horizon)?;
    (last >= first).then_some((first, last))
}

/// Sliding forecast windows whose targets lie in `part`.
///
/// Returns an empty list (with a warning) when the segment cannot hold one
/// window.
pub fn make_windows(
    ds: &SeriesDataset,
    part: Part,
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    if horizon == 0 {
        return contract("forecast windows need a horizon of at least 1");
    }
    if input_len == 0 || stride == 0 {
        return contract("input length and stride must be positive");
    }
    let Some((first, last)) = window_range(ds, part, input_len, horizon) else {
        log::warn!("{part:?} segment too short for windows of {input_len}+{horizon}");
        return Ok(Vec::new());
    };
    Ok((first..=last)
        .step_by(stride)
        .map(|s| Sample {
            input: ds.slice(s, s + input_len),
            target: Target::Series(ds.slice(s + input_len, s + input_len + horizon)),
            mask: None,
            start: s,
        })
        .collect())
}

/// Windows whose target is the window itself, for imputation and anomaly
/// reconstruction. Hidden entries of an imputation mask are zeroed in the
/// input and the original values kept as target.
pub fn make_reconstruction_windows(
    ds: &SeriesDataset,
    part: Part,
    input_len: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    if input_len == 0 || stride == 0 {
        return contract("input length and stride must be positive");
    }
    let Some((first, last)) = window_range(ds, part, input_len, 0) else {
        log::warn!("{part:?} segment too short for windows of {input_len}");
        return Ok(Vec::new());
    };
    let l = ds.len();
    let m = ds.dims();
    let mut starts: Vec<usize> = (first..=last).step_by(stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(starts
        .into_iter()
        .map(|s| {
            let truth = ds.slice(s, s + input_len);
            let mask = ds.mask().map(|mask| {
                (0..m)
                    .flat_map(|d| mask[d * l + s..d * l + s + input_len].iter().copied())
                    .collect::<Vec<bool>>()
            });
            let input = match &mask {
                Some(mk) => NdArray::from_parts(
                    truth.shape().to_vec(),
                    truth
                        .data()
                        .iter()
                        .zip(mk)
                        .map(|(&v, &h)| if h { 0.0 } else { v })
                        .collect(),
                ),
                None => truth.clone(),
            };
            Sample {
                input,
                target: Target::Series(truth),
                mask,
                start: s,
            }
        })
        .collect())
}

/// Hides exactly `round(ratio * M * L)` entries chosen uniformly under `seed`.
pub fn apply_imputation_mask(ds: &SeriesDataset, ratio: f64, seed: u64) -> Result<SeriesDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return contract(format!("mask ratio {ratio} outside (0, 1)"));
    }
    let total = ds.values.numel();
    let count = (ratio * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; total];
    for i in index::sample(&mut rng, total, count) {
        mask[i] = true;
    }
    Ok(SeriesDataset {
        payload: TaskPayload::Imputation { mask },
        ..ds.clone()
    })
}
