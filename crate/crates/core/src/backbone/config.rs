use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::patching::patch_count;

/// Which learner a run switches off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Dependency learner replaced by the identity.
    NoDep,
    /// Dimension interaction matrix replaced by the identity.
    NoDyn,
    /// Fused environment path zeroed, leaving only the residual.
    NoEnv,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoDep, Ablation::NoDyn, Ablation::NoEnv];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "Caformer",
            Ablation::NoDep => "w/o Dep",
            Ablation::NoDyn => "w/o Dyn",
            Ablation::NoEnv => "w/o Env",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ablation::Full => "full",
            Ablation::NoDep => "no_dep",
            Ablation::NoDyn => "no_dyn",
            Ablation::NoEnv => "no_env",
        };
        f.write_str(s)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_dep" => Ok(Self::NoDep),
            "no_dyn" => Ok(Self::NoDyn),
            "no_env" => Ok(Self::NoEnv),
            other => contract(format!("unknown ablation {other:?}")),
        }
    }
}

/// Shape and hyper-parameters of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaformerConfig {
    /// Number of series dimensions `M`.
    pub dims: usize,
    /// Input window length.
    pub input_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    /// Embedding width `E`.
    pub embed_dim: usize,
    /// Side `k` of the environment aligning matrix.
    pub align_size: usize,
    pub blocks: usize,
    /// Temperature of the dimension-interaction softmax.
    pub alpha: f64,
    /// Temperature of the environment aligning softmax.
    pub beta: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

impl CaformerConfig {
    /// Defaults: `P = 16`, `S = 8`, three blocks, `k = 256`, `E = 16`.
    /// `alpha` and `beta` are the lengths of the vectors whose dot products
    /// they scale: 1 for the pooled dimension scores, `E` for environment
    /// tokens.
    pub fn new(dims: usize, input_len: usize) -> Self {
        let embed_dim = 16;
        Self {
            dims,
            input_len,
            patch_len: 16,
            stride: 8,
            embed_dim,
            align_size: 256,
            blocks: 3,
            alpha: 1.0,
            beta: embed_dim as f64,
            ablation: Ablation::Full,
        }
    }

    /// Sets `E` and keeps `beta` tied to it.
    pub fn with_embed_dim(mut self, embed_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self.beta = embed_dim as f64;
        self
    }

    pub fn num_patches(&self) -> Result<usize> {
        patch_count(self.input_len, self.patch_len, self.stride)
    }

    /// Whether the aligning matrix acts directly on the patch axis.
    pub fn align_is_identity(&self) -> bool {
        self.num_patches().is_ok_and(|n| n == self.align_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.num_patches()?;
        if self.dims == 0 || self.embed_dim == 0 || self.align_size == 0 || self.blocks == 0 {
            return contract("dims, embed_dim, align_size and blocks must be at least 1");
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return contract("alpha and beta must be positive");
        }
        Ok(())
    }
}
