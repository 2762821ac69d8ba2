use std::collections::BTreeMap;

use crate::error::{contract, Result};
use crate::numerics::ParamMap;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    /// Moment coefficients 0.9 and 0.999, `eps = 1e-8`.
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return contract(format!("gradient shape mismatch for {name}"));
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, (w, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NdArray;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamMap::new();
        p.insert("w".into(), NdArray::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut g = ParamMap::new();
        g.insert("w".into(), NdArray::new(vec![2], vec![0.5, -3.0]).unwrap());
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &g).unwrap();
        // m_hat = g and v_hat = g^2 after one step
        let w = p["w"].data();
        assert!((w[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-1.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut p = ParamMap::new();
        p.insert("w".into(), NdArray::new(vec![3], vec![0.3, 2.0, -7.5]).unwrap());
        let before = p.clone();
        let mut g = ParamMap::new();
        g.insert("w".into(), NdArray::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap());
        let mut adam = Adam::new(0.0);
        for _ in 0..3 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }
}
