use super::params::ParamVector;
use crate::error::{Error, Result};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(n_params: usize, cfg: &AdamConfig) -> Self {
        Self {
            step: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            lr: T::lit(cfg.lr),
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            eps: T::lit(cfg.eps),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    /// Applies one bias-corrected Adam update to `params` in place.
    pub fn step(&mut self, params: &mut ParamVector<T>, grads: &ParamVector<T>) -> Result<()> {
        if !params.same_layout(grads) || params.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam: {} parameters, {} gradients, state of {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(seg) = grads.first_non_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in segment '{seg}'")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        for (((w, &g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::params::Layout;
    use std::sync::Arc;

    fn pv(vals: Vec<f64>) -> ParamVector<f64> {
        let n = vals.len();
        ParamVector::from_values(Arc::new(Layout::from_shapes([("w", 1, n)])), vals).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = pv(vec![1.0, -2.0, 3.0]);
        let g = ParamVector::zeros(p.layout().clone());
        let mut s = AdamState::new(3, &AdamConfig::default());
        s.step(&mut p, &g).unwrap();
        assert_eq!(p.as_slice(), &[1.0, -2.0, 3.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = pv(vec![0.5, -0.25]);
        let mut g = ParamVector::zeros(p.layout().clone());
        g.as_mut_slice().fill(1.0);
        let mut s = AdamState::new(2, &AdamConfig::default());
        s.step(&mut p, &g).unwrap();
        // mhat = 1, vhat = 1, so the step is lr / (1 + eps).
        let d = 1e-3 / (1.0 + 1e-8);
        assert!((p.as_slice()[0] - (0.5 - d)).abs() < 1e-9);
        assert!((p.as_slice()[1] - (-0.25 - d)).abs() < 1e-9);
    }

    /// Independent one-parameter Adam written straight from the update rule.
    fn scalar_adam(mut w: f64, grads: &[f64]) -> Vec<f64> {
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = Vec::new();
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn two_steps_follow_scalar_reference() {
        let grads = [0.7, 0.7];
        let reference = scalar_adam(2.0, &grads);
        let mut p = pv(vec![2.0]);
        let mut s = AdamState::new(1, &AdamConfig::default());
        for (k, &g) in grads.iter().enumerate() {
            let gv = pv(vec![g]);
            s.step(&mut p, &gv).unwrap();
            assert!((p.as_slice()[0] - reference[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_segment() {
        let mut p = pv(vec![0.0, 0.0]);
        let g = pv(vec![0.0, f64::NAN]);
        let mut s = AdamState::new(2, &AdamConfig::default());
        match s.step(&mut p, &g) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("'w'")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.step_count(), 0);
    }
}
