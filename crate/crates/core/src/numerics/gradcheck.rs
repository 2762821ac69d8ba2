use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{NdArray, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the entry with the largest error.
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Relative error used by [`grad_check`]: `|a-b| / max(1e-8, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-8_f64.max(a.abs()).max(b.abs())
}

fn evaluate<F>(f: &F, params: &BTreeMap<String, NdArray>) -> Result<f64>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind_frozen(params);
    let out = f(&mut tape, &bound)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    Ok(tape.value(out).item())
}

/// Checks every entry of every parameter against central finite differences.
///
/// `f` builds a scalar from the bound parameters; it is evaluated on a fresh
/// tape for each perturbation.
pub fn grad_check<F>(f: F, params: &BTreeMap<String, NdArray>, fd_step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + Sync,
{
    if !(fd_step > 0.0 && fd_step <= 1e-2) {
        return Err(Error::Contract(format!("fd_step {fd_step} outside (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let loss = f(&mut tape, &bound)?;
    let base = tape.value(loss).item();
    let analytic = tape.backward(loss)?.named();

    let again = evaluate(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Reproducibility(format!(
            "two evaluations at the same point gave {base} and {again}"
        )));
    }

    let entries: Vec<(&String, usize)> = params
        .iter()
        .flat_map(|(name, arr)| (0..arr.numel()).map(move |i| (name, i)))
        .collect();
    let errors: Vec<Result<f64>> = entries
        .par_iter()
        .map(|&(name, i)| {
            let mut p = params.clone();
            let orig = p[name].data()[i];
            p.get_mut(name).unwrap().data_mut()[i] = orig + fd_step;
            let plus = evaluate(&f, &p)?;
            p.get_mut(name).unwrap().data_mut()[i] = orig - fd_step;
            let minus = evaluate(&f, &p)?;
            let numeric = (plus - minus) / (2.0 * fd_step);
            Ok(relative_error(analytic[name].data()[i], numeric))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: entries.len(),
    };
    for (&(name, i), err) in entries.iter().zip(errors) {
        let err = err?;
        if err > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_param = name.clone();
            report.worst_index = i;
        }
    }
    Ok(report)
}
