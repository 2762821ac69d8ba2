use std::path::{Path, PathBuf};

use caformer_core::backbone::{Ablation, CaformerConfig};
use caformer_core::data::{SynthKind, SynthParams};
use caformer_core::heads::{HeadConfig, Task};
use caformer_core::pipeline::PipelineOptions;
use caformer_core::training::{LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Every setting of a run in one flat table. Optional fields are filled with
/// task-dependent defaults by [`RunConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,

    /// CSV file with one row per step; synthetic data is generated when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub has_header: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_col: Option<usize>,
    /// Hidden-entry flags for imputation, one row per step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Per-step 0/1 anomaly labels, one per line after a header.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthKind>,
    pub dims: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    pub data_seed: u64,
    /// Number of series in a synthetic classification collection.
    pub series_count: usize,
    pub mask_ratio: f64,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_len: Option<usize>,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    /// Side of the aligning matrix; the patch count when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align_size: Option<usize>,
    pub ablation: Ablation,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    pub patience: usize,

    pub quantile: f64,
    pub point_adjust: bool,
    pub num_classes: usize,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub ablation_seeds: Vec<u64>,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::LongForecast,
            data: None,
            has_header: true,
            timestamp_col: None,
            mask: None,
            labels: None,
            synth: None,
            dims: 4,
            length: None,
            data_seed: 7,
            series_count: 200,
            mask_ratio: 0.25,
            input_len: None,
            horizon: 48,
            patch_len: 16,
            stride: 8,
            embed_dim: 16,
            blocks: 3,
            align_size: None,
            ablation: Ablation::Full,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 7,
            loss: None,
            patience: 5,
            quantile: 0.99,
            point_adjust: true,
            num_classes: 2,
            train_stride: 1,
            eval_stride: 1,
            ablation_seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs/latest"),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn toml_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(e.to_string()))
    }

    /// Applies `key=value` overrides; keys are checked like file keys.
    pub fn with_overrides<S: AsRef<str>>(self, pairs: &[S]) -> CliResult<Self> {
        if pairs.is_empty() {
            return Ok(self);
        }
        let mut table = toml::Table::try_from(&self).map_err(config_err)?;
        for pair in pairs {
            let (key, value) = pair
                .as_ref()
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {:?} is not key=value", pair.as_ref())))?;
            table.insert(key.trim().to_string(), toml_value(value.trim()));
        }
        table.try_into().map_err(config_err)
    }

    /// Fills the task-dependent defaults and checks every setting.
    pub fn resolve(mut self) -> CliResult<Self> {
        let task = self.task;
        let classify = task == Task::Classification;
        if self.synth.is_none() && self.data.is_none() {
            self.synth = Some(match task {
                Task::Classification => SynthKind::TwoClass,
                Task::Anomaly => SynthKind::Spiked,
                _ => SynthKind::CoupledAr,
            });
        }
        let default_len = match task {
            Task::Imputation | Task::Anomaly => 48,
            _ => 96,
        };
        if classify {
            let len = self.input_len.or(self.length).unwrap_or(default_len);
            self.input_len = Some(len);
            self.length = Some(len);
        }
        self.input_len.get_or_insert(default_len);
        if self.data.is_none() {
            self.length.get_or_insert(if task == Task::Anomaly { 1000 } else { 512 });
        }
        if self.align_size.is_none() {
            self.align_size = Some(self.model_unchecked().num_patches().map_err(config_err)?);
        }
        self.loss.get_or_insert(LossKind::default_for(task));
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> CliResult<()> {
        self.model().validate().map_err(config_err)?;
        self.head().validate().map_err(config_err)?;
        self.train().validate(self.task).map_err(config_err)?;
        if self.train_stride == 0 || self.eval_stride == 0 {
            return Err(config_err("train_stride and eval_stride must be at least 1"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(config_err(format!("mask_ratio {} must lie in (0, 1)", self.mask_ratio)));
        }
        if self.ablation_seeds.is_empty() {
            return Err(config_err("ablation_seeds must not be empty"));
        }
        if let Some(kind) = self.synth {
            let fits = match self.task {
                Task::Classification => kind == SynthKind::TwoClass,
                Task::Anomaly => kind == SynthKind::Spiked,
                _ => kind != SynthKind::TwoClass,
            };
            if !fits {
                return Err(config_err(format!("synthetic kind {kind:?} does not fit task {}", self.task)));
            }
        }
        if self.data.is_some() && self.task == Task::Classification {
            return Err(config_err("classification runs on synthetic collections only"));
        }
        if self.data.is_some() && self.task == Task::Anomaly && self.labels.is_none() {
            return Err(config_err("anomaly detection on a data file needs a labels file"));
        }
        Ok(())
    }

    fn model_unchecked(&self) -> CaformerConfig {
        let mut cfg = CaformerConfig::new(self.dims, self.input_len.unwrap_or(96)).with_embed_dim(self.embed_dim);
        cfg.patch_len = self.patch_len;
        cfg.stride = self.stride;
        cfg.blocks = self.blocks;
        cfg.ablation = self.ablation;
        if let Some(k) = self.align_size {
            cfg.align_size = k;
        }
        cfg
    }

    pub fn model(&self) -> CaformerConfig {
        self.model_unchecked()
    }

    pub fn head(&self) -> HeadConfig {
        let mut head = HeadConfig::for_task(self.task);
        if self.task.is_forecast() {
            head.horizon = Some(self.horizon);
        }
        if self.task == Task::Classification {
            head.num_classes = Some(self.num_classes);
        }
        head.quantile = self.quantile;
        head
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            loss: self.loss.unwrap_or(LossKind::default_for(self.task)),
            patience: self.patience,
        }
    }

    pub fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            train_stride: self.train_stride,
            eval_stride: self.eval_stride,
            point_adjust: self.point_adjust,
            pretrained: None,
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams::default()
    }

    /// Tiny model used by `gradcheck` when no config file is given.
    pub fn gradcheck_preset() -> Self {
        Self {
            dims: 3,
            input_len: Some(32),
            horizon: 4,
            patch_len: 8,
            stride: 4,
            embed_dim: 8,
            blocks: 1,
            ..Self::default()
        }
    }
}
