//! Synthetic series with known structure.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Part, SeriesDataset, Split, TaskPayload};
use crate::error::{contract, Error, Result};
use crate::numerics::NdArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Lagged cross-dimension autoregression driven by a shared confounder.
    CoupledAr,
    Seasonal,
    /// One series of a two-population frequency classification problem.
    TwoClass,
    /// Seasonal series with labelled point anomalies in the test segment.
    Spiked,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled_ar" => Ok(Self::CoupledAr),
            "seasonal" => Ok(Self::Seasonal),
            "two_class" => Ok(Self::TwoClass),
            "spiked" => Ok(Self::Spiked),
            other => contract(format!("unknown synthetic kind {other:?}")),
        }
    }
}

/// Knobs shared by all generators; each kind reads the ones it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Standard deviation of the innovation noise.
    pub noise: f64,
    /// Period of the dominant oscillation, in steps.
    pub period: f64,
    /// Own-lag coefficient `x_i(t-1) -> x_i(t)`.
    pub ar: f64,
    /// Cross coefficient `x_{i-1}(t-lag) -> x_i(t)`.
    pub coupling: f64,
    pub lag: usize,
    /// Loading of dimension `i >= 1` on the confounder, scaled by `1 + i/4`.
    pub confounder_gain: f64,
    /// Cycles per step of the two populations.
    pub class_freqs: [f64; 2],
    pub class_label: usize,
    pub anomalies: usize,
    /// Spike height in units of the base amplitude.
    pub spike_scale: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise: 0.1,
            period: 24.0,
            ar: 0.3,
            coupling: 0.4,
            lag: 3,
            confounder_gain: 0.8,
            class_freqs: [1.0 / 16.0, 1.0 / 6.0],
            class_label: 0,
            anomalies: 10,
            spike_scale: 5.0,
        }
    }
}

const BURN_IN: usize = 128;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates a synthetic dataset with a 70/10/20 split.
pub fn synth_generate(kind: SynthKind, dims: usize, len: usize, seed: u64, params: &SynthParams) -> Result<SeriesDataset> {
    if dims < 2 || len < 64 {
        return contract(format!("synthetic data needs M >= 2 and L >= 64, got {dims} x {len}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = Split::default_for(len)?;
    let names = (0..dims).map(|d| format!("x{d}")).collect();
    let (values, payload) = match kind {
        SynthKind::CoupledAr => (coupled_ar(dims, len, params, &mut rng), TaskPayload::None),
        SynthKind::Seasonal => (seasonal(dims, len, params, &mut rng), TaskPayload::None),
        SynthKind::TwoClass => {
            if params.class_label > 1 {
                return contract("two_class label must be 0 or 1");
            }
            let f = params.class_freqs[params.class_label];
            (two_class(dims, len, f, params.noise, &mut rng), TaskPayload::Class(params.class_label))
        }
        SynthKind::Spiked => {
            let mut v = seasonal(dims, len, params, &mut rng);
            let labels = inject_spikes(&mut v, dims, len, split, params, &mut rng)?;
            (v, TaskPayload::Anomaly(labels))
        }
    };
    let mut ds = SeriesDataset::new(NdArray::new(vec![dims, len], values)?, names, split)?;
    ds.payload = payload;
    Ok(ds)
}

/// `count` labelled series, balanced between the two classes in shuffled
/// order.
pub fn two_class_collection(count: usize, dims: usize, len: usize, seed: u64, params: &SynthParams) -> Result<Vec<SeriesDataset>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..count).map(|i| i % 2).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let p = SynthParams {
                class_label: label,
                ..params.clone()
            };
            synth_generate(SynthKind::TwoClass, dims, len, seed.wrapping_mul(1_000_003).wrapping_add(i as u64), &p)
        })
        .collect()
}

/// Shared low-frequency confounder at step `t`.
fn confounder(t: f64, period: f64) -> f64 {
    (2.0 * PI * t / period).sin() + 0.5 * (2.0 * PI * t / (4.0 * period) + 0.7).sin()
}

// x_0 carries the confounder; x_i (i >= 1) follows
// x_i(t) = ar x_i(t-1) + coupling x_{i-1}(t-lag) + gain_i c(t) + noise.
fn coupled_ar(dims: usize, len: usize, p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let total = len + BURN_IN;
    let mut x = vec![vec![0.0; total]; dims];
    for t in 0..total {
        let c = confounder(t as f64, p.period);
        x[0][t] = c + p.noise * normal(rng);
        for i in 1..dims {
            let own = if t >= 1 { x[i][t - 1] } else { 0.0 };
            let cross = if t >= p.lag { x[i - 1][t - p.lag] } else { 0.0 };
            let gain = p.confounder_gain * (1.0 + i as f64 / 4.0);
            x[i][t] = p.ar * own + p.coupling * cross + gain * c + p.noise * normal(rng);
        }
    }
    x.into_iter().flat_map(|row| row.into_iter().skip(BURN_IN)).collect()
}

fn seasonal(dims: usize, len: usize, p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims * len);
    for _ in 0..dims {
        let phase: f64 = rng.random::<f64>() * 2.0 * PI;
        let phase2: f64 = rng.random::<f64>() * 2.0 * PI;
        for t in 0..len {
            let w = 2.0 * PI * t as f64 / p.period;
            out.push((w + phase).sin() + 0.5 * (2.0 * w + phase2).sin() + p.noise * normal(rng));
        }
    }
    out
}

fn two_class(dims: usize, len: usize, freq: f64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims * len);
    for _ in 0..dims {
        let phase: f64 = rng.random::<f64>() * 2.0 * PI;
        let amp = 0.8 + 0.4 * rng.random::<f64>();
        for t in 0..len {
            let v = amp * (2.0 * PI * freq * t as f64 + phase).sin();
            out.push(if noise > 0.0 { v + noise * normal(rng) } else { v });
        }
    }
    out
}

/// Adds `params.anomalies` spikes inside the test segment, one per cell of
/// an even grid over the segment with the final cell left clean. Each spike
/// lands in one randomly chosen dimension; returns the per-step labels.
fn inject_spikes(
    values: &mut [f64],
    dims: usize,
    len: usize,
    split: Split,
    p: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    let (lo, hi) = split.segment(Part::Test, len);
    // one spike per cell of an even grid, with the last cell left clean
    let cell = (hi - lo) / (p.anomalies + 1);
    if p.anomalies == 0 || cell < 4 {
        return contract(format!("{} anomalies do not fit in a test segment of {}", p.anomalies, hi - lo));
    }
    let mut labels = vec![false; len];
    for i in 0..p.anomalies {
        let t = lo + cell / 2 + i * cell + rng.random_range(0..cell / 4);
        let d = rng.random_range(0..dims);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        values[d * len + t] += sign * p.spike_scale;
        labels[t] = true;
    }
    Ok(labels)
}
