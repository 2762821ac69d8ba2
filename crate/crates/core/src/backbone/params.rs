use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CaformerConfig;
use crate::error::{Error, Result};
use crate::heads::{init_head_params, HeadConfig};
use crate::numerics::{NdArray, ParamMap, Var};

/// All learnable arrays of a model, keyed by stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct CaformerParams {
    pub tensors: ParamMap,
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub(crate) fn uniform(&mut self, shape: &[usize], fan_in: usize) -> NdArray {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        NdArray::from_parts(shape.to_vec(), data)
    }
}

fn attention_params(map: &mut ParamMap, init: &mut Init, prefix: &str, e: usize) {
    for w in ["q", "k", "v"] {
        map.insert(format!("{prefix}.w{w}"), init.uniform(&[e, e], e));
    }
    for b in ["q", "v"] {
        map.insert(format!("{prefix}.b{b}"), NdArray::zeros(&[e]));
    }
}

impl CaformerParams {
    /// Fresh backbone and head parameters under `seed`.
    pub fn init(cfg: &CaformerConfig, head: &HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_patches()?;
        let (m, p, e, k) = (cfg.dims, cfg.patch_len, cfg.embed_dim, cfg.align_size);
        let mut init = Init::new(seed);
        let mut map = BTreeMap::new();
        map.insert("embed.weight".into(), init.uniform(&[p, e], p));
        map.insert("embed.bias".into(), NdArray::zeros(&[e]));
        map.insert("embed.pos".into(), init.uniform(&[n, 1, e], p));
        for b in 0..cfg.blocks {
            let pre = format!("block{b}");
            attention_params(&mut map, &mut init, &format!("{pre}.dep.dim"), e);
            attention_params(&mut map, &mut init, &format!("{pre}.dep.time"), e);
            map.insert(format!("{pre}.dyn.fc.weight"), init.uniform(&[m, m], m));
            map.insert(format!("{pre}.dyn.fc.bias"), NdArray::zeros(&[m]));
            map.insert(format!("{pre}.env.fe.weight"), init.uniform(&[e, e], e));
            map.insert(format!("{pre}.env.fe.bias"), NdArray::zeros(&[e]));
            map.insert(format!("{pre}.env.alpha1"), NdArray::full(&[e], 1.0));
            map.insert(format!("{pre}.env.alpha2"), NdArray::full(&[e], 1.0));
            map.insert(format!("{pre}.env.gamma1"), NdArray::zeros(&[e]));
            map.insert(format!("{pre}.env.gamma2"), NdArray::zeros(&[e]));
            map.insert(format!("{pre}.env.proj.weight"), init.uniform(&[e, e], e));
            map.insert(format!("{pre}.env.proj.bias"), NdArray::zeros(&[e]));
            map.insert(format!("{pre}.fuse.weight"), init.uniform(&[3 * e, e], 3 * e));
            map.insert(format!("{pre}.fuse.bias"), NdArray::zeros(&[e]));
            if k != n {
                map.insert(format!("{pre}.env.proj.resample.weight"), init.uniform(&[k, n], n));
                map.insert(format!("{pre}.env.proj.resample.bias"), NdArray::zeros(&[k, 1]));
                map.insert(format!("{pre}.fuse.down.weight"), init.uniform(&[k, n], n));
                map.insert(format!("{pre}.fuse.up.weight"), init.uniform(&[n, k], k));
            }
        }
        init_head_params(&mut map, &mut init, cfg, head)?;
        Ok(Self { tensors: map })
    }

    pub fn get(&self, name: &str) -> Result<&NdArray> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut NdArray> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(NdArray::numel).sum()
    }
}

/// Looks up a bound parameter.
pub(crate) fn bound(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
}
