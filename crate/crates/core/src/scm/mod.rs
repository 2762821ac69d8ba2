//! Finite structural causal models evaluated by exhaustive enumeration.
//!
//! A [`DiscreteScm`] is a DAG over variables with small alphabets and one
//! conditional probability table per variable. Interventions are computed by
//! graph surgery on the factorization, so every interventional quantity is
//! exact up to floating-point summation.

mod graph;
mod random;
mod rules;

pub use graph::Dag;
pub use random::{backdoor_suite, confounded_scm, random_cpts, BackdoorReport};
pub use rules::{verify_docalculus_rules, RuleOutcome, RuleReport};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Largest joint table [`DiscreteScm::joint`] will enumerate.
pub const MAX_JOINT_ENTRIES: usize = 1_000_000;

const ROW_TOL: f64 = 1e-12;

/// One variable of a model as written in a definition file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub states: usize,
    #[serde(default)]
    pub parents: Vec<String>,
    /// One row per parent configuration, the first parent varying slowest.
    pub cpt: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScmFile {
    variable: Vec<VariableSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScm {
    names: Vec<String>,
    cards: Vec<usize>,
    dag: Dag,
    /// Flattened rows, `prod(parent cards) x card` per variable.
    cpts: Vec<Vec<f64>>,
}

/// A probability table over the full assignment space, the first variable
/// varying slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    cards: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteScm {
    pub fn new(specs: Vec<VariableSpec>) -> Result<Self> {
        let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return contract(format!("duplicate variable {n}"));
            }
        }
        let lookup = |n: &str| {
            names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| Error::Contract(format!("unknown parent {n}")))
        };
        let mut parents = Vec::with_capacity(specs.len());
        for s in &specs {
            parents.push(s.parents.iter().map(|p| lookup(p)).collect::<Result<Vec<_>>>()?);
        }
        let dag = Dag::new(parents).ok_or_else(|| Error::Contract("graph has a cycle".into()))?;
        let cards: Vec<usize> = specs.iter().map(|s| s.states).collect();
        if cards.contains(&0) {
            return contract("every variable needs at least one state");
        }
        let mut cpts = Vec::with_capacity(specs.len());
        for (v, s) in specs.iter().enumerate() {
            let rows: usize = dag.parents(v).iter().map(|&p| cards[p]).product();
            if s.cpt.len() != rows {
                return contract(format!("{}: expected {rows} CPT rows, found {}", s.name, s.cpt.len()));
            }
            cpts.push(s.cpt.concat());
        }
        let scm = Self { names, cards, dag, cpts };
        scm.validate()?;
        Ok(scm)
    }

    fn validate(&self) -> Result<()> {
        for v in 0..self.len() {
            let k = self.cards[v];
            for (r, row) in self.cpts[v].chunks(k).enumerate() {
                if row.len() != k || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return contract(format!("{}: CPT row {r} is not a distribution", self.names[v]));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_TOL {
                    return contract(format!("{}: CPT row {r} sums to {s}", self.names[v]));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScmFile = toml::from_str(text).map_err(|e| Error::Contract(format!("SCM file: {e}")))?;
        Self::new(file.variable)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let file = ScmFile { variable: self.specs() };
        toml::to_string(&file).map_err(|e| Error::Contract(format!("SCM file: {e}")))
    }

    pub fn specs(&self) -> Vec<VariableSpec> {
        (0..self.len())
            .map(|v| VariableSpec {
                name: self.names[v].clone(),
                states: self.cards[v],
                parents: self.dag.parents(v).iter().map(|&p| self.names[p].clone()).collect(),
                cpt: self.cpts[v].chunks(self.cards[v]).map(<[f64]>::to_vec).collect(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("unknown variable {name}")))
    }

    fn check_value(&self, var: usize, value: usize) -> Result<()> {
        if value >= self.cards[var] {
            return contract(format!("{} has no state {value}", self.names[var]));
        }
        Ok(())
    }

    /// Product of all CPTs over every assignment.
    pub fn joint(&self) -> Result<Joint> {
        let size = self.cards.iter().fold(1usize, |acc, &c| acc.saturating_mul(c));
        if size > MAX_JOINT_ENTRIES {
            return Err(Error::SizeLimit(size));
        }
        let mut assign = vec![0usize; self.len()];
        let mut probs = Vec::with_capacity(size);
        for idx in 0..size {
            decode(idx, &self.cards, &mut assign);
            let mut p = 1.0;
            for v in 0..self.len() {
                let mut row = 0;
                for &q in self.dag.parents(v) {
                    row = row * self.cards[q] + assign[q];
                }
                p *= self.cpts[v][row * self.cards[v] + assign[v]];
                if p == 0.0 {
                    break;
                }
            }
            probs.push(p);
        }
        Ok(Joint {
            cards: self.cards.clone(),
            probs,
        })
    }

    /// The model after `do(var = value)` for each pair: incoming edges are cut
    /// and the CPT replaced by a point mass.
    pub fn intervene(&self, actions: &[(usize, usize)]) -> Result<Self> {
        let mut out = self.clone();
        let vars: Vec<usize> = actions.iter().map(|a| a.0).collect();
        out.dag = self.dag.without_incoming(&vars);
        for &(v, value) in actions {
            self.check_value(v, value)?;
            out.cpts[v] = (0..self.cards[v]).map(|s| if s == value { 1.0 } else { 0.0 }).collect();
        }
        Ok(out)
    }

    /// Joint distribution under `do(var = value)`.
    pub fn truncated_do(&self, var: usize, value: usize) -> Result<Joint> {
        self.intervene(&[(var, value)])?.joint()
    }
}

fn decode(mut idx: usize, cards: &[usize], out: &mut [usize]) {
    for v in (0..cards.len()).rev() {
        out[v] = idx % cards[v];
        idx /= cards[v];
    }
}

impl Joint {
    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Probability of the event fixing each listed variable.
    pub fn prob(&self, event: &[(usize, usize)]) -> f64 {
        let mut assign = vec![0usize; self.cards.len()];
        let mut total = 0.0;
        for (idx, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            decode(idx, &self.cards, &mut assign);
            if event.iter().all(|&(v, s)| assign[v] == s) {
                total += p;
            }
        }
        total
    }

    /// Distribution of `var` given the event, or `None` when the event has
    /// probability zero.
    pub fn conditional(&self, var: usize, given: &[(usize, usize)]) -> Option<Vec<f64>> {
        let den = self.prob(given);
        if den == 0.0 {
            return None;
        }
        let mut ev = given.to_vec();
        ev.push((var, 0));
        let last = ev.len() - 1;
        Some(
            (0..self.cards[var])
                .map(|s| {
                    ev[last].1 = s;
                    self.prob(&ev) / den
                })
                .collect(),
        )
    }

    /// Sums out `var`, returning the joint of the remaining variables.
    pub fn marginalize(&self, var: usize) -> Joint {
        let cards: Vec<usize> = self.cards.iter().enumerate().filter(|&(v, _)| v != var).map(|(_, &c)| c).collect();
        let mut probs = vec![0.0; cards.iter().product()];
        let mut assign = vec![0usize; self.cards.len()];
        for (idx, &p) in self.probs.iter().enumerate() {
            decode(idx, &self.cards, &mut assign);
            let mut out = 0;
            for (v, &a) in assign.iter().enumerate() {
                if v != var {
                    out = out * self.cards[v] + a;
                }
            }
            probs[out] += p;
        }
        Joint { cards, probs }
    }

    /// Largest violation of `P(x, y | z) = P(x | z) P(y | z)` over all states.
    pub fn independence_gap(&self, x: usize, y: usize, zs: &[usize]) -> f64 {
        let z_cards: Vec<usize> = zs.iter().map(|&z| self.cards[z]).collect();
        let z_count: usize = z_cards.iter().product();
        let mut zval = vec![0usize; zs.len()];
        let mut gap: f64 = 0.0;
        for zi in 0..z_count {
            decode(zi, &z_cards, &mut zval);
            let given: Vec<(usize, usize)> = zs.iter().copied().zip(zval.iter().copied()).collect();
            let pz = self.prob(&given);
            if pz == 0.0 {
                continue;
            }
            for xs in 0..self.cards[x] {
                for ys in 0..self.cards[y] {
                    let mut e = given.clone();
                    e.push((x, xs));
                    let pxz = self.prob(&e);
                    e.push((y, ys));
                    let pxyz = self.prob(&e);
                    e.remove(e.len() - 2);
                    let pyz = self.prob(&e);
                    gap = gap.max((pxyz / pz - (pxz / pz) * (pyz / pz)).abs());
                }
            }
        }
        gap
    }
}

/// `sum_c P(outcome | treatment = value, c) P(c)` over every configuration
/// `c` of `adjust`, from the observational joint.
pub fn backdoor_estimate(scm: &DiscreteScm, treatment: usize, value: usize, outcome: usize, adjust: &[usize]) -> Result<Vec<f64>> {
    scm.check_value(treatment, value)?;
    let joint = scm.joint()?;
    let cards: Vec<usize> = adjust.iter().map(|&c| scm.cards[c]).collect();
    let strata: usize = cards.iter().product();
    let mut cval = vec![0usize; adjust.len()];
    let mut out = vec![0.0; scm.cards[outcome]];
    for ci in 0..strata {
        decode(ci, &cards, &mut cval);
        let stratum: Vec<(usize, usize)> = adjust.iter().copied().zip(cval.iter().copied()).collect();
        let pc = joint.prob(&stratum);
        let mut given = stratum.clone();
        given.push((treatment, value));
        let cond = joint.conditional(outcome, &given).ok_or_else(|| {
            let desc: Vec<String> = stratum.iter().map(|&(v, s)| format!("{}={s}", scm.names[v])).collect();
            Error::UndefinedConditional(format!("{}={value}, {}", scm.names[treatment], desc.join(", ")))
        })?;
        for (o, p) in out.iter_mut().zip(cond) {
            *o += p * pc;
        }
    }
    Ok(out)
}

/// `P(outcome | do(treatment = value))` by enumeration of the mutilated model.
pub fn interventional(scm: &DiscreteScm, treatment: usize, value: usize, outcome: usize) -> Result<Vec<f64>> {
    let joint = scm.truncated_do(treatment, value)?;
    Ok((0..scm.cards[outcome]).map(|s| joint.prob(&[(outcome, s)])).collect())
}

#[cfg(test)]
mod tests;
