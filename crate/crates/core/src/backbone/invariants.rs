use serde::{Deserialize, Serialize};

use super::{BackboneOutput, CaformerConfig};
use crate::error::Result;
use crate::numerics::NdArray;
use crate::patching::{in_patch_normalize, make_patches, PATCH_STD_FLOOR};

/// Worst-case deviations from the structural contracts of one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureCheck {
    /// Largest `|row sum - 1|` over every attention-like matrix.
    pub row_sum_error: f64,
    /// Smallest entry of those matrices.
    pub min_weight: f64,
    /// Largest `|H_ce[i][j]|` with `j > i`.
    pub upper_triangle: f64,
    /// Whether `S == T + I_de` holds bit for bit in every block.
    pub residual_exact: bool,
    /// Largest `|mean|` of a normalized patch.
    pub patch_mean: f64,
    /// Largest `|std - 1|` of a normalized patch whose raw std clears the floor.
    pub patch_std_error: f64,
}

impl StructureCheck {
    pub fn holds(&self, row_tol: f64, mean_tol: f64, std_tol: f64) -> bool {
        self.row_sum_error < row_tol
            && self.min_weight >= 0.0
            && self.upper_triangle == 0.0
            && self.residual_exact
            && self.patch_mean < mean_tol
            && self.patch_std_error < std_tol
    }

    fn rows(&mut self, a: &NdArray) {
        let w = *a.shape().last().unwrap_or(&1);
        for row in a.data().chunks(w) {
            let sum: f64 = row.iter().sum();
            self.row_sum_error = self.row_sum_error.max((sum - 1.0).abs());
            self.min_weight = row.iter().copied().fold(self.min_weight, f64::min);
        }
    }
}

fn upper_triangle_max(a: &NdArray) -> f64 {
    let s = a.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let mut worst = 0.0f64;
    for (idx, v) in a.data().iter().enumerate() {
        let (i, j) = ((idx / c) % r, idx % c);
        if j > i {
            worst = worst.max(v.abs());
        }
    }
    worst
}

/// Checks a materialized pass of `cfg` on input `x`.
pub fn check_structure(cfg: &CaformerConfig, x: &NdArray, out: &BackboneOutput) -> Result<StructureCheck> {
    let mut check = StructureCheck {
        min_weight: f64::INFINITY,
        residual_exact: true,
        ..Default::default()
    };
    for b in &out.blocks {
        for a in [&b.dim_attention, &b.time_attention].into_iter().flatten() {
            check.rows(a);
        }
        check.rows(&b.a_d);
        check.rows(&b.h_e);
        check.upper_triangle = check.upper_triangle.max(upper_triangle_max(&b.h_ce));
        let sum_matches = b
            .s_temporal
            .data()
            .iter()
            .zip(b.t.data().iter().zip(b.i_de.data()))
            .all(|(s, (t, i))| s.to_bits() == (t + i).to_bits());
        check.residual_exact &= sum_matches;
    }

    let raw = make_patches(x, cfg.patch_len, cfg.stride)?;
    let norm = in_patch_normalize(&raw);
    let (m, p, n) = raw.dims();
    let (rd, nd) = (raw.patches().data(), norm.patches().data());
    for d in 0..m {
        for j in 0..n {
            let slice = |src: &[f64]| (0..p).map(|q| src[(d * p + q) * n + j]).collect::<Vec<_>>();
            let (r, z) = (slice(rd), slice(nd));
            let (_, raw_std) = mean_std(&r);
            let (mean, std) = mean_std(&z);
            check.patch_mean = check.patch_mean.max(mean.abs());
            if raw_std > PATCH_STD_FLOOR {
                check.patch_std_error = check.patch_std_error.max((std - 1.0).abs());
            }
        }
    }
    Ok(check)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
