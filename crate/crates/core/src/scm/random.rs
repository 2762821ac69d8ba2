use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use super::{backdoor_estimate, interventional, DiscreteScm, VariableSpec};
use crate::error::Result;

/// Model over `names` with the given parent indices and alphabet sizes; each
/// CPT row is drawn from a symmetric Dirichlet with concentration 1.
pub fn random_cpts(names: &[&str], parents: &[Vec<usize>], cards: &[usize], seed: u64) -> Result<DiscreteScm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = names
        .iter()
        .enumerate()
        .map(|(v, name)| {
            let rows: usize = parents[v].iter().map(|&p| cards[p]).product();
            let cpt = (0..rows)
                .map(|_| {
                    let draws: Vec<f64> = (0..cards[v]).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                    let total: f64 = draws.iter().sum();
                    draws.iter().map(|d| d / total).collect()
                })
                .collect();
            VariableSpec {
                name: name.to_string(),
                states: cards[v],
                parents: parents[v].iter().map(|&p| names[p].to_string()).collect(),
                cpt,
            }
        })
        .collect();
    DiscreteScm::new(specs)
}

/// Environment `C` confounding the cross-dimension cause `X`, the temporal
/// state `T` and the target `D`: C -> X, C -> T, X -> T, T -> D, C -> D.
/// Alphabet sizes are drawn from 2..=4.
pub fn confounded_scm(seed: u64) -> Result<DiscreteScm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let cards: Vec<usize> = (0..4).map(|_| rng.random_range(2..=4)).collect();
    let parents = vec![vec![], vec![0], vec![0, 1], vec![0, 2]];
    random_cpts(&["C", "X", "T", "D"], &parents, &cards, seed)
}

/// Agreement between back-door adjustment over `C` and graph surgery for
/// `P(T | do(X))` and `P(D | do(T))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorReport {
    pub trials: usize,
    pub seed: u64,
    /// Number of (model, intervention value, outcome state) triples compared.
    pub comparisons: usize,
    pub max_abs_diff: f64,
    /// Largest `|P(outcome | x) - P(outcome | do(x))|` seen, showing that the
    /// models are genuinely confounded.
    pub max_confounding_gap: f64,
}

pub fn backdoor_suite(trials: usize, seed: u64) -> Result<BackdoorReport> {
    let mut report = BackdoorReport {
        trials,
        seed,
        comparisons: 0,
        max_abs_diff: 0.0,
        max_confounding_gap: 0.0,
    };
    for i in 0..trials {
        let scm = confounded_scm(seed.wrapping_add(i as u64))?;
        let joint = scm.joint()?;
        let (c, x, t, d) = (0, 1, 2, 3);
        for (treat, outcome) in [(x, t), (t, d)] {
            for value in 0..scm.cards()[treat] {
                let adjusted = backdoor_estimate(&scm, treat, value, outcome, &[c])?;
                let truth = interventional(&scm, treat, value, outcome)?;
                let observed = joint.conditional(outcome, &[(treat, value)]).unwrap_or_default();
                for (k, (a, b)) in adjusted.iter().zip(&truth).enumerate() {
                    report.comparisons += 1;
                    report.max_abs_diff = report.max_abs_diff.max((a - b).abs());
                    if let Some(o) = observed.get(k) {
                        report.max_confounding_gap = report.max_confounding_gap.max((o - b).abs());
                    }
                }
            }
        }
    }
    Ok(report)
}
