//! Losses, the Adam optimizer and the deterministic training loop.

mod adam;

pub use adam::Adam;

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneOutput, Bound, CaformerConfig, CaformerParams};
use crate::data::{Sample, Target};
use crate::error::{contract, Error, Result};
use crate::heads::{model_forward, HeadConfig, Task};
use crate::numerics::{NdArray, ParamMap, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Smape,
    CrossEntropy,
}

impl LossKind {
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Classification => LossKind::CrossEntropy,
            _ => LossKind::Mse,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Smape => "smape",
            LossKind::CrossEntropy => "cross_entropy",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "smape" => Ok(LossKind::Smape),
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            other => contract(format!("unknown loss {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            loss: LossKind::default_for(task),
            patience: 5,
        }
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return contract(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return contract("epochs and batch_size must be at least 1");
        }
        let classify = task == Task::Classification;
        if classify != (self.loss == LossKind::CrossEntropy) {
            return contract(format!("loss {} does not fit task {task}", self.loss));
        }
        Ok(())
    }
}

/// Mean loss between a series prediction and its target over the entries
/// where `support` is true (all entries when `support` is `None`).
///
/// SMAPE terms whose denominator `|pred| + |target|` is zero contribute 0.
pub fn loss_fn(tape: &mut Tape, pred: Var, target: &NdArray, support: Option<&[bool]>, kind: LossKind) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::Dimension {
            kernel: "loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = target.numel();
    if support.is_some_and(|s| s.len() != n) {
        return contract("loss support does not match the prediction shape");
    }
    let count = support.map_or(n, |s| s.iter().filter(|&&b| b).count());
    if count == 0 {
        return contract("loss support is empty");
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let terms = match kind {
        LossKind::Mse => tape.mul(diff, diff)?,
        LossKind::Smape => {
            let num = tape.abs(diff)?;
            let pa = tape.abs(pred)?;
            let zero_den: Vec<bool> = tape
                .value(pred)
                .data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| p.abs() + t.abs() == 0.0)
                .collect();
            let guard = NdArray::from_parts(
                target.shape().to_vec(),
                target
                    .data()
                    .iter()
                    .zip(&zero_den)
                    .map(|(t, &z)| t.abs() + if z { 1.0 } else { 0.0 })
                    .collect(),
            );
            let guard = tape.constant(guard);
            let den = tape.add(pa, guard)?;
            let ratio = tape.div(num, den)?;
            let ratio = tape.masked_fill(ratio, &zero_den, 0.0)?;
            tape.scale(ratio, 200.0)?
        }
        LossKind::CrossEntropy => return contract("cross-entropy needs class targets"),
    };
    let terms = match support {
        Some(s) => {
            let hidden: Vec<bool> = s.iter().map(|b| !b).collect();
            tape.masked_fill(terms, &hidden, 0.0)?
        }
        None => terms,
    };
    let total = tape.sum_all(terms)?;
    tape.scale(total, 1.0 / count as f64)
}

/// Loss of one sample under the configured head.
pub fn sample_loss(
    tape: &mut Tape,
    vars: &Bound,
    cfg: &CaformerConfig,
    head: &HeadConfig,
    sample: &Sample,
    kind: LossKind,
) -> Result<Var> {
    let (out, _) = model_forward(tape, vars, cfg, head, &sample.input)?;
    match (&sample.target, kind) {
        (Target::Class(label), LossKind::CrossEntropy) => tape.cross_entropy(out, &[*label]),
        (Target::Series(target), LossKind::Mse | LossKind::Smape) => loss_fn(tape, out, target, None, kind),
        _ => contract(format!("loss {kind} does not fit the sample target")),
    }
}

fn first_non_finite(grads: &ParamMap) -> Option<&str> {
    grads.iter().find(|(_, g)| !g.is_finite()).map(|(k, _)| k.as_str())
}

/// Mean loss and mean parameter gradients over `samples`.
///
/// Per-sample passes run in parallel; results are reduced in sample order
/// so the outcome does not depend on scheduling.
pub fn batch_gradients(
    cfg: &CaformerConfig,
    head: &HeadConfig,
    params: &CaformerParams,
    samples: &[Sample],
    kind: LossKind,
) -> Result<(f64, ParamMap)> {
    if samples.is_empty() {
        return contract("empty batch");
    }
    let per_sample: Vec<Result<(f64, ParamMap)>> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let vars = tape.bind(&params.tensors);
            let loss = sample_loss(&mut tape, &vars, cfg, head, s, kind)?;
            let grads = tape.backward(loss)?.named();
            Ok((tape.value(loss).item(), grads))
        })
        .collect();
    let scale = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut acc: ParamMap = params
        .tensors
        .iter()
        .map(|(k, v)| (k.clone(), NdArray::zeros(v.shape())))
        .collect();
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        for (name, grad) in g {
            let slot = acc.get_mut(&name).expect("gradient for a bound parameter");
            slot.data_mut().iter_mut().zip(grad.data()).for_each(|(a, g)| *a += g);
        }
    }
    for g in acc.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    if let Some(name) = first_non_finite(&acc) {
        return Err(Error::NonFinite(format!("gradient of parameter {name}")));
    }
    Ok((loss * scale, acc))
}

/// Mean loss over `samples` without gradients.
pub fn evaluate_loss(
    cfg: &CaformerConfig,
    head: &HeadConfig,
    params: &CaformerParams,
    samples: &[Sample],
    kind: LossKind,
) -> Result<f64> {
    if samples.is_empty() {
        return contract("no samples to evaluate");
    }
    let losses: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let vars = tape.bind_frozen(&params.tensors);
            let loss = sample_loss(&mut tape, &vars, cfg, head, s, kind)?;
            Ok(tape.value(loss).item())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// Model output for one input window, in the units of the input.
pub fn predict(cfg: &CaformerConfig, head: &HeadConfig, params: &CaformerParams, input: &NdArray) -> Result<NdArray> {
    Ok(predict_with_diagnostics(cfg, head, params, input)?.0)
}

pub fn predict_with_diagnostics(
    cfg: &CaformerConfig,
    head: &HeadConfig,
    params: &CaformerParams,
    input: &NdArray,
) -> Result<(NdArray, BackboneOutput)> {
    let mut tape = Tape::new();
    let vars = tape.bind_frozen(&params.tensors);
    let (out, trace) = model_forward(&mut tape, &vars, cfg, head, input)?;
    Ok((tape.value(out).clone(), trace.materialize(&tape)))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: CaformerParams,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Training and validation samples for one run.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Adam on shuffled mini-batches with early stopping on validation loss.
///
/// When `val` is empty the training loss stands in for it. Each epoch is
/// written as a JSON line to `log_sink` when given.
pub fn train(
    cfg: &CaformerConfig,
    head: &HeadConfig,
    tc: &TrainConfig,
    data: &TrainData,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    head.validate()?;
    tc.validate(head.task)?;
    if data.train.is_empty() {
        return contract("no training samples");
    }
    let mut params = CaformerParams::init(cfg, head, tc.seed)?;
    let mut adam = Adam::new(tc.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut stale = 0;
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let (loss, grads) = batch_gradients(cfg, head, &params, &batch, tc.loss)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss in epoch {epoch}")));
            }
            adam.step(&mut params.tensors, &grads)?;
            weighted += loss * chunk.len() as f64;
        }
        let train_loss = weighted / data.train.len() as f64;
        let val_loss = if data.val.is_empty() {
            train_loss
        } else {
            evaluate_loss(cfg, head, &params, &data.val, tc.loss)?
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if let Some(w) = log_sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        log.push(record);
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        log,
        best_epoch: best.2,
    })
}
