use serde::{Deserialize, Serialize};

use super::DiscreteScm;
use crate::error::Result;

const EQ_TOL: f64 = 1e-12;

/// Result of checking one do-calculus rule with an empty observation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub rule: u8,
    /// Whether the d-separation premise holds in the mutilated graph.
    pub premise: bool,
    /// `None` when the premise fails and the rule is not applicable.
    pub equality: Option<bool>,
    pub max_abs_diff: Option<f64>,
}

impl RuleOutcome {
    pub fn verified(&self) -> bool {
        !self.premise || self.equality == Some(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReport {
    pub x: String,
    pub z: String,
    pub y: String,
    pub rules: Vec<RuleOutcome>,
}

impl RuleReport {
    pub fn all_verified(&self) -> bool {
        self.rules.iter().all(RuleOutcome::verified)
    }
}

fn marginal(joint: &super::Joint, var: usize) -> Vec<f64> {
    (0..joint.cards()[var]).map(|s| joint.prob(&[(var, s)])).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// Checks the three rules for single variables `x`, `z`, `y`:
///
/// 1. `P(y | do(x), z) = P(y | do(x))` when `Y ⟂ Z | X` with edges into `X` cut.
/// 2. `P(y | do(x), do(z)) = P(y | do(x), z)` when `Y ⟂ Z | X` with edges into
///    `X` and out of `Z` cut.
/// 3. `P(y | do(x), do(z)) = P(y | do(x))` when `Y ⟂ Z | X` with edges into
///    `X` and into `Z` cut.
///
/// Equalities are checked for every state of `x` and `z`, skipping
/// conditionals on zero-probability events.
pub fn verify_docalculus_rules(scm: &DiscreteScm, x: &str, z: &str, y: &str) -> Result<RuleReport> {
    let (xi, zi, yi) = (scm.index_of(x)?, scm.index_of(z)?, scm.index_of(y)?);
    let g = scm.dag();
    let gx = g.without_incoming(&[xi]);
    let premises = [
        gx.d_separated(&[yi], &[zi], &[xi]),
        gx.without_outgoing(&[zi]).d_separated(&[yi], &[zi], &[xi]),
        gx.without_incoming(&[zi]).d_separated(&[yi], &[zi], &[xi]),
    ];
    let mut diffs = [0.0f64; 3];
    for xv in 0..scm.cards()[xi] {
        let jx = scm.intervene(&[(xi, xv)])?.joint()?;
        let do_x = marginal(&jx, yi);
        for zv in 0..scm.cards()[zi] {
            let do_xz = marginal(&scm.intervene(&[(xi, xv), (zi, zv)])?.joint()?, yi);
            if let Some(do_x_see_z) = jx.conditional(yi, &[(zi, zv)]) {
                diffs[0] = diffs[0].max(max_diff(&do_x_see_z, &do_x));
                diffs[1] = diffs[1].max(max_diff(&do_xz, &do_x_see_z));
            }
            diffs[2] = diffs[2].max(max_diff(&do_xz, &do_x));
        }
    }
    let rules = (0..3)
        .map(|i| RuleOutcome {
            rule: i as u8 + 1,
            premise: premises[i],
            equality: premises[i].then_some(diffs[i] < EQ_TOL),
            max_abs_diff: premises[i].then_some(diffs[i]),
        })
        .collect();
    Ok(RuleReport {
        x: x.into(),
        z: z.into(),
        y: y.into(),
        rules,
    })
}
