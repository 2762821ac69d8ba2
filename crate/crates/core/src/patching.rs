//! Overlapping patches and in-patch normalization.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::NdArray;

/// Smallest scale used when standardizing a patch; constant patches map to 0.
pub const PATCH_STD_FLOOR: f64 = 1e-5;

/// Location and scale of one (dimension, patch) slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchStats {
    pub mean: f64,
    /// Population standard deviation floored at [`PATCH_STD_FLOOR`].
    pub scale: f64,
}

/// Patches of an `M x L` series, stored as an `M x P x N` array.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    patches: NdArray,
    /// `M x N` statistics, present once normalized.
    stats: Option<Vec<PatchStats>>,
    pub patch_len: usize,
    pub stride: usize,
    pub series_len: usize,
}

/// Number of patches `floor((L - P) / S) + 2` produced from a length-`L` series.
pub fn patch_count(series_len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || patch_len > series_len {
        return contract(format!("patch length {patch_len} must lie in [1, {series_len}]"));
    }
    if stride == 0 || stride > patch_len {
        return contract(format!("stride {stride} must lie in [1, {patch_len}]"));
    }
    Ok((series_len - patch_len) / stride + 2)
}

/// Cuts an `M x L` series into `N` patches of length `P` at stride `S`.
///
/// The series is end-padded by repeating its final value `S` times, and patch
/// `j` covers steps `[jS, jS + P)` of the padded series.
pub fn make_patches(series: &NdArray, patch_len: usize, stride: usize) -> Result<PatchSet> {
    if series.ndim() != 2 {
        return contract(format!("series must be M x L, got {:?}", series.shape()));
    }
    let (m, l) = (series.shape()[0], series.shape()[1]);
    let n = patch_count(l, patch_len, stride)?;
    let mut data = vec![0.0; m * patch_len * n];
    for d in 0..m {
        let row = series.row(d);
        let last = row[l - 1];
        for j in 0..n {
            for p in 0..patch_len {
                let t = j * stride + p;
                data[(d * patch_len + p) * n + j] = if t < l { row[t] } else { last };
            }
        }
    }
    Ok(PatchSet {
        patches: NdArray::from_parts(vec![m, patch_len, n], data),
        stats: None,
        patch_len,
        stride,
        series_len: l,
    })
}

/// Standardizes every (dimension, patch) slice and keeps its statistics.
pub fn in_patch_normalize(ps: &PatchSet) -> PatchSet {
    let (m, p, n) = ps.dims();
    let mut data = ps.patches.data().to_vec();
    let mut stats = Vec::with_capacity(m * n);
    for d in 0..m {
        for j in 0..n {
            let idx = |q: usize| (d * p + q) * n + j;
            let mean = (0..p).map(|q| data[idx(q)]).sum::<f64>() / p as f64;
            let var = (0..p).map(|q| (data[idx(q)] - mean).powi(2)).sum::<f64>() / p as f64;
            let scale = var.sqrt().max(PATCH_STD_FLOOR);
            for q in 0..p {
                data[idx(q)] = (data[idx(q)] - mean) / scale;
            }
            stats.push(PatchStats { mean, scale });
        }
    }
    PatchSet {
        patches: NdArray::from_parts(ps.patches.shape().to_vec(), data),
        stats: Some(stats),
        ..ps.clone()
    }
}

impl PatchSet {
    /// `(M, P, N)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.patches.shape();
        (s[0], s[1], s[2])
    }

    pub fn patches(&self) -> &NdArray {
        &self.patches
    }

    pub fn is_normalized(&self) -> bool {
        self.stats.is_some()
    }

    pub fn stats(&self, dim: usize, patch: usize) -> Option<PatchStats> {
        let (_, _, n) = self.dims();
        self.stats.as_ref().map(|s| s[dim * n + patch])
    }

    /// Inverse of [`in_patch_normalize`]; a no-op on raw patches.
    pub fn denormalize(&self) -> PatchSet {
        let Some(stats) = &self.stats else {
            return self.clone();
        };
        let (m, p, n) = self.dims();
        let mut data = self.patches.data().to_vec();
        for d in 0..m {
            for j in 0..n {
                let st = stats[d * n + j];
                for q in 0..p {
                    let i = (d * p + q) * n + j;
                    data[i] = data[i] * st.scale + st.mean;
                }
            }
        }
        PatchSet {
            patches: NdArray::from_parts(self.patches.shape().to_vec(), data),
            stats: None,
            ..self.clone()
        }
    }

    /// Patches laid out as `N x M x P` tokens for the embedding.
    pub fn tokens(&self) -> NdArray {
        let (m, p, n) = self.dims();
        let src = self.patches.data();
        let mut out = vec![0.0; n * m * p];
        for d in 0..m {
            for q in 0..p {
                for j in 0..n {
                    out[(j * m + d) * p + q] = src[(d * p + q) * n + j];
                }
            }
        }
        NdArray::from_parts(vec![n, m, p], out)
    }

    /// Reassembles the `M x L` series by averaging the patches covering each
    /// step and dropping the padding. Applies to raw (denormalized) values.
    pub fn unpatch(&self) -> NdArray {
        let raw = self.denormalize();
        let (m, p, n) = self.dims();
        let l = self.series_len;
        let src = raw.patches.data();
        let mut out = vec![0.0; m * l];
        for d in 0..m {
            for t in 0..l {
                // running mean stays exact when all covering copies agree
                let (mut mean, mut k) = (0.0, 0.0);
                for j in self.covering(t) {
                    k += 1.0;
                    let v = src[(d * p + (t - j * self.stride)) * n + j];
                    mean += (v - mean) / k;
                }
                out[d * l + t] = mean;
            }
        }
        NdArray::from_parts(vec![m, l], out)
    }

    /// Indices of the patches whose span contains step `t`.
    pub fn covering(&self, t: usize) -> impl Iterator<Item = usize> {
        let (_, p, n) = self.dims();
        let s = self.stride;
        let lo = (t + 1).saturating_sub(p).div_ceil(s);
        let hi = (t / s).min(n - 1);
        lo..=hi
    }

    /// Per-step location and scale (`M x L` each), averaging the statistics of
    /// the patches that cover each step.
    pub fn step_stats(&self) -> Option<(NdArray, NdArray)> {
        self.stats.as_ref()?;
        let (m, _, _) = self.dims();
        let l = self.series_len;
        let mut means = vec![0.0; m * l];
        let mut scales = vec![0.0; m * l];
        for d in 0..m {
            for t in 0..l {
                let js: Vec<usize> = self.covering(t).collect();
                let k = js.len() as f64;
                for &j in &js {
                    let st = self.stats(d, j).unwrap();
                    means[d * l + t] += st.mean / k;
                    scales[d * l + t] += st.scale / k;
                }
            }
        }
        Some((
            NdArray::from_parts(vec![m, l], means),
            NdArray::from_parts(vec![m, l], scales),
        ))
    }

    /// Statistics of the final patch of each dimension.
    pub fn last_patch_stats(&self) -> Option<Vec<PatchStats>> {
        let (m, _, n) = self.dims();
        (0..m).map(|d| self.stats(d, n - 1)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(patch_count(96, 16, 8).unwrap(), 12);
        assert_eq!(patch_count(40, 40, 5).unwrap(), 2);
        assert_eq!(patch_count(36, 16, 8).unwrap(), 4);
        assert!(patch_count(10, 11, 1).is_err());
        assert!(patch_count(10, 4, 5).is_err());
        assert!(patch_count(10, 4, 0).is_err());
    }

    #[test]
    fn starts_and_padding() {
        let series = NdArray::new(vec![1, 96], (0..96).map(f64::from).collect()).unwrap();
        let ps = make_patches(&series, 16, 8).unwrap();
        assert_eq!(ps.dims(), (1, 16, 12));
        let tok = ps.tokens();
        for j in 0..12 {
            assert_eq!(tok.get(&[j, 0, 0]), (8 * j) as f64);
        }
        // final patch covers steps 88..104 of the padded series
        let last: Vec<f64> = (0..16).map(|q| tok.get(&[11, 0, q])).collect();
        let mut expect: Vec<f64> = (88..96).map(f64::from).collect();
        expect.extend([95.0; 8]);
        assert_eq!(last, expect);
    }

    #[test]
    fn non_overlapping_tiling() {
        let series = NdArray::new(vec![1, 12], (0..12).map(f64::from).collect()).unwrap();
        let ps = make_patches(&series, 4, 4).unwrap();
        let tok = ps.tokens();
        assert_eq!(ps.dims().2, 4);
        for j in 0..3 {
            for q in 0..4 {
                assert_eq!(tok.get(&[j, 0, q]), (4 * j + q) as f64);
            }
        }
        for q in 0..4 {
            assert_eq!(tok.get(&[3, 0, q]), 11.0);
        }
    }

    #[test]
    fn constant_series_gives_identical_zero_patches() {
        let series = NdArray::full(&[2, 20], 5.0);
        let ps = make_patches(&series, 4, 2).unwrap();
        assert!(ps.patches().data().iter().all(|&v| v == 5.0));
        let normed = in_patch_normalize(&ps);
        assert!(normed.patches().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalizes_one_two_three() {
        let series = NdArray::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let ps = in_patch_normalize(&make_patches(&series, 3, 1).unwrap());
        let first: Vec<f64> = (0..3).map(|q| ps.tokens().get(&[0, 0, q])).collect();
        let z = 1.5f64.sqrt();
        for (a, b) in first.iter().zip([-z, 0.0, z]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((first[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn covering_matches_enumeration() {
        let series = NdArray::zeros(&[1, 37]);
        let ps = make_patches(&series, 7, 3).unwrap();
        let (_, p, n) = ps.dims();
        for t in 0..37 {
            let brute: Vec<usize> = (0..n).filter(|&j| j * 3 <= t && t < j * 3 + p).collect();
            assert_eq!(ps.covering(t).collect::<Vec<_>>(), brute, "t={t}");
            assert!(!brute.is_empty());
        }
    }
}
