//! Patch embedding and the stacked learner blocks.
//!
//! Shapes use `N` patches, `M` dimensions, embedding width `E` and aligning
//! size `k`. Every function records onto a caller-owned [`Tape`] so the same
//! code serves training and inference.

mod checkpoint;
mod config;
mod invariants;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Ablation, CaformerConfig};
pub use invariants::{check_structure, StructureCheck};
pub use params::CaformerParams;
pub(crate) use params::{bound, Init};

use std::collections::BTreeMap;

use crate::error::{contract, Result};
use crate::numerics::{NdArray, Tape, Var, STANDARDIZE_EPS};
use crate::patching::{in_patch_normalize, make_patches, PatchSet};

pub type Bound = BTreeMap<String, Var>;

/// Tape handles produced by one block.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub input: Var,
    /// `N x M x M` attention over dimensions within each patch.
    pub dim_attention: Option<Var>,
    /// `M x N x N` attention over patches within each dimension.
    pub time_attention: Option<Var>,
    pub i_de: Var,
    pub a_d: Var,
    pub d: Var,
    pub c: Var,
    pub h_e: Var,
    pub h_ce: Var,
    pub t: Var,
    pub s_temporal: Var,
}

/// Tape handles of a full backbone pass.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    /// Normalized patches of the input window.
    pub patches: PatchSet,
    pub embedded: Var,
    pub blocks: Vec<BlockTrace>,
    pub s_temporal: Var,
}

/// Materialized per-block arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagnostics {
    pub dim_attention: Option<NdArray>,
    pub time_attention: Option<NdArray>,
    pub i_de: NdArray,
    pub a_d: NdArray,
    pub d: NdArray,
    pub c: NdArray,
    pub h_e: NdArray,
    pub h_ce: NdArray,
    pub t: NdArray,
    pub s_temporal: NdArray,
}

/// Values of a backbone pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    /// `N x M x E`.
    pub s_temporal: NdArray,
    pub blocks: Vec<BlockDiagnostics>,
}

impl BackboneTrace {
    pub fn materialize(&self, tape: &Tape) -> BackboneOutput {
        let v = |x: Var| tape.value(x).clone();
        BackboneOutput {
            s_temporal: v(self.s_temporal),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockDiagnostics {
                    dim_attention: b.dim_attention.map(v),
                    time_attention: b.time_attention.map(v),
                    i_de: v(b.i_de),
                    a_d: v(b.a_d),
                    d: v(b.d),
                    c: v(b.c),
                    h_e: v(b.h_e),
                    h_ce: v(b.h_ce),
                    t: v(b.t),
                    s_temporal: v(b.s_temporal),
                })
                .collect(),
        }
    }
}

/// Shared affine map `P -> E` over every patch plus a learned positional
/// table indexed by patch position. Returns `N x M x E`.
pub fn embed_patches(tape: &mut Tape, vars: &Bound, patches: &PatchSet) -> Result<Var> {
    if !patches.is_normalized() {
        return contract("patch embedding expects normalized patches");
    }
    let tokens = tape.constant(patches.tokens());
    let w = bound(vars, "embed.weight")?;
    let b = bound(vars, "embed.bias")?;
    let y = tape.linear(tokens, w, Some(b))?;
    let pos = bound(vars, "embed.pos")?;
    let shape = tape.shape(y).to_vec();
    let pos = tape.broadcast_to(pos, &shape)?;
    tape.add(y, pos)
}

/// Single-head scaled dot-product self-attention over the middle axis of
/// `[batch, tokens, E]`, followed by residual and standardization.
fn attention_stage(tape: &mut Tape, vars: &Bound, prefix: &str, x: Var) -> Result<(Var, Var)> {
    let e = *tape.shape(x).last().unwrap();
    let proj = |tape: &mut Tape, w: &str| -> Result<Var> {
        let wv = bound(vars, &format!("{prefix}.w{w}"))?;
        let bv = vars.get(&format!("{prefix}.b{w}")).copied();
        tape.linear(x, wv, bv)
    };
    let q = proj(tape, "q")?;
    let k = proj(tape, "k")?;
    let v = proj(tape, "v")?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (e as f64).sqrt())?;
    let weights = tape.softmax(scores)?;
    let mixed = tape.matmul(weights, v)?;
    let res = tape.add(x, mixed)?;
    Ok((tape.standardize(res, STANDARDIZE_EPS)?, weights))
}

/// Two attention stages: across dimensions inside each patch, then across
/// patches inside each dimension. Same-time-step attention is not modelled.
///
/// Returns `(I_de, dimension weights N x M x M, time weights M x N x N)`.
pub fn dependency_learner(tape: &mut Tape, vars: &Bound, block: usize, input: Var) -> Result<(Var, Var, Var)> {
    let (x1, w_dim) = attention_stage(tape, vars, &format!("block{block}.dep.dim"), input)?;
    let by_dim = tape.permute(x1, &[1, 0, 2])?;
    let (x2, w_time) = attention_stage(tape, vars, &format!("block{block}.dep.time"), by_dim)?;
    let i_de = tape.permute(x2, &[1, 0, 2])?;
    Ok((i_de, w_dim, w_time))
}

/// Pooled dimension scores, their interaction matrix `A_d` (`N x M x M`) and
/// the strengthened cross-dimension features `D = A_d I_de` (`N x M x E`).
pub fn dynamic_learner(
    tape: &mut Tape,
    vars: &Bound,
    block: usize,
    i_de: Var,
    alpha: f64,
    ablate: bool,
) -> Result<(Var, Var)> {
    let (n, m) = (tape.shape(i_de)[0], tape.shape(i_de)[1]);
    let a_d = if ablate {
        let eye = NdArray::eye(m);
        let eye = tape.constant(eye);
        tape.broadcast_to(eye, &[n, m, m])?
    } else {
        let pooled = tape.mean_last(i_de)?;
        let w = bound(vars, &format!("block{block}.dyn.fc.weight"))?;
        let b = bound(vars, &format!("block{block}.dyn.fc.bias"))?;
        let z = tape.linear(pooled, w, Some(b))?;
        a_d_from_scores(tape, z, alpha)?
    };
    let d = tape.matmul(a_d, i_de)?;
    Ok((a_d, d))
}

/// `Norm(softmax(z z^T / sqrt(alpha)))` per patch for scores `z` of shape `N x M`.
pub fn a_d_from_scores(tape: &mut Tape, z: Var, alpha: f64) -> Result<Var> {
    let (n, m) = (tape.shape(z)[0], tape.shape(z)[1]);
    let col = tape.reshape(z, &[n, m, 1])?;
    let row = tape.transpose(col)?;
    let outer = tape.matmul(col, row)?;
    let scaled = tape.scale(outer, 1.0 / alpha.sqrt())?;
    let sm = tape.softmax(scaled)?;
    tape.row_normalize(sm)
}

/// Zeroes every entry above the diagonal of a square matrix.
pub fn causal_mask(h: &NdArray) -> Result<NdArray> {
    let s = h.shape();
    if s.len() != 2 || s[0] != s[1] {
        return contract(format!("causal mask needs a square matrix, got {s:?}"));
    }
    let k = s[0];
    let mut out = h.clone();
    for i in 0..k {
        for j in i + 1..k {
            out.data_mut()[i * k + j] = 0.0;
        }
    }
    Ok(out)
}

fn causal_mask_var(tape: &mut Tape, h: Var) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return contract(format!("causal mask needs a square matrix, got {s:?}"));
    }
    let k = s[0];
    let upper: Vec<bool> = (0..k * k).map(|i| i % k > i / k).collect();
    tape.masked_fill(h, &upper, 0.0)
}

/// Environment factors `C` (`N x M x E`), aligning matrix `H_e` and its
/// causally masked form `H_ce` (both `k x k`).
pub fn environment_learner(
    tape: &mut Tape,
    vars: &Bound,
    block: usize,
    i_de: Var,
    cfg: &CaformerConfig,
) -> Result<(Var, Var, Var)> {
    let pre = format!("block{block}.env");
    let p = |name: &str| bound(vars, &format!("{pre}.{name}"));
    let shape = tape.shape(i_de).to_vec();
    let (n, e) = (shape[0], shape[2]);

    let fe = tape.linear(i_de, p("fe.weight")?, Some(p("fe.bias")?))?;
    let s_e = tape.relu(fe)?;
    let bcast = |tape: &mut Tape, v: Var| tape.broadcast_to(v, &shape);
    let a1 = bcast(tape, p("alpha1")?)?;
    let g1 = bcast(tape, p("gamma1")?)?;
    let a2 = bcast(tape, p("alpha2")?)?;
    let g2 = bcast(tape, p("gamma2")?)?;
    let inner = tape.mul(a1, s_e)?;
    let inner = tape.add(inner, g1)?;
    let inner = tape.relu(inner)?;
    let c = tape.mul(a2, inner)?;
    let c = tape.add(c, g2)?;

    // Proj: pool over dimensions, resample patches to k, project E -> E.
    let by_e = tape.permute(c, &[0, 2, 1])?;
    let pooled = tape.mean_last(by_e)?;
    let resampled = if cfg.align_size == n {
        pooled
    } else {
        let w = p("proj.resample.weight")?;
        let r = tape.matmul(w, pooled)?;
        let b = tape.broadcast_to(p("proj.resample.bias")?, &[cfg.align_size, e])?;
        tape.add(r, b)?
    };
    let tokens = tape.linear(resampled, p("proj.weight")?, Some(p("proj.bias")?))?;
    let tt = tape.transpose(tokens)?;
    let gram = tape.matmul(tokens, tt)?;
    let gram = tape.scale(gram, 1.0 / cfg.beta.sqrt())?;
    let sm = tape.softmax(gram)?;
    let h_e = tape.row_normalize(sm)?;
    let h_ce = causal_mask_var(tape, h_e)?;
    Ok((c, h_e, h_ce))
}

/// Fuses `D`, `C` and `I_de`, applies `H_ce` along the patch axis and adds the
/// residual. Returns `(T, S_temporal)`.
#[allow(clippy::too_many_arguments)]
pub fn intervene_fuse(
    tape: &mut Tape,
    vars: &Bound,
    block: usize,
    d: Var,
    c: Var,
    i_de: Var,
    h_ce: Var,
    cfg: &CaformerConfig,
    ablate: bool,
) -> Result<(Var, Var)> {
    let shape = tape.shape(i_de).to_vec();
    let (n, m, e) = (shape[0], shape[1], shape[2]);
    let k = cfg.align_size;
    let t = if ablate {
        tape.constant(NdArray::zeros(&shape))
    } else {
        let pre = format!("block{block}.fuse");
        let p = |name: &str| bound(vars, &format!("{pre}.{name}"));
        let cat = tape.concat(&[d, c, i_de])?;
        let f = tape.linear(cat, p("weight")?, Some(p("bias")?))?;
        let flat = tape.reshape(f, &[n, m * e])?;
        let mixed = if k == n {
            tape.matmul(h_ce, flat)?
        } else {
            let down = tape.matmul(p("down.weight")?, flat)?;
            let aligned = tape.matmul(h_ce, down)?;
            tape.matmul(p("up.weight")?, aligned)?
        };
        let mixed = tape.reshape(mixed, &shape)?;
        tape.standardize(mixed, STANDARDIZE_EPS)?
    };
    let s = tape.add(t, i_de)?;
    Ok((t, s))
}

/// One block: dependency, dynamic and environment learners, then fusion.
pub fn block_forward(tape: &mut Tape, vars: &Bound, cfg: &CaformerConfig, block: usize, input: Var) -> Result<BlockTrace> {
    let (i_de, dim_attention, time_attention) = if cfg.ablation == Ablation::NoDep {
        (input, None, None)
    } else {
        let (i, wd, wt) = dependency_learner(tape, vars, block, input)?;
        (i, Some(wd), Some(wt))
    };
    let (a_d, d) = dynamic_learner(tape, vars, block, i_de, cfg.alpha, cfg.ablation == Ablation::NoDyn)?;
    let (c, h_e, h_ce) = environment_learner(tape, vars, block, i_de, cfg)?;
    let (t, s_temporal) = intervene_fuse(tape, vars, block, d, c, i_de, h_ce, cfg, cfg.ablation == Ablation::NoEnv)?;
    Ok(BlockTrace {
        input,
        dim_attention,
        time_attention,
        i_de,
        a_d,
        d,
        c,
        h_e,
        h_ce,
        t,
        s_temporal,
    })
}

/// Patching, in-patch normalization, embedding and every block, recorded on
/// `tape`. `x` is an `M x L_in` window.
pub fn backbone_trace(tape: &mut Tape, vars: &Bound, cfg: &CaformerConfig, x: &NdArray) -> Result<BackboneTrace> {
    if x.shape() != [cfg.dims, cfg.input_len] {
        return contract(format!(
            "input {:?} does not match configured {} x {}",
            x.shape(),
            cfg.dims,
            cfg.input_len
        ));
    }
    let patches = in_patch_normalize(&make_patches(x, cfg.patch_len, cfg.stride)?);
    let embedded = embed_patches(tape, vars, &patches)?;
    let mut h = embedded;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let trace = block_forward(tape, vars, cfg, b, h)?;
        h = trace.s_temporal;
        blocks.push(trace);
    }
    Ok(BackboneTrace {
        patches,
        embedded,
        blocks,
        s_temporal: h,
    })
}

/// Inference-only backbone pass returning all diagnostics.
pub fn backbone_forward(x: &NdArray, cfg: &CaformerConfig, params: &CaformerParams) -> Result<BackboneOutput> {
    let mut tape = Tape::new();
    let vars = tape.bind_frozen(&params.tensors);
    let trace = backbone_trace(&mut tape, &vars, cfg, x)?;
    Ok(trace.materialize(&tape))
}
