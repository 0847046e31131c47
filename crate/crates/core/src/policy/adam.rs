use super::ParamSet;
use crate::error::{Error, Result};

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Gradients are validated before anything is
    /// mutated, so a rejected step leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        if !params.same_shape(grads) || self.m.len() != params.len() {
            return Err(Error::Shape("gradient and parameter shapes differ".into()));
        }
        if let Some(i) = grads.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(grads.tensor_of(i).name()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let p = params.as_mut_slice();
        for (i, &g) in grads.as_slice().iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = ParamSet::zeros(3, 2);
        p.as_mut_slice().iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 0.1);
        let before = p.clone();
        let mut adam = Adam::new(p.len());
        adam.step(&mut p, &ParamSet::zeros(3, 2), 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamSet::zeros(1, 1);
        let mut g = ParamSet::zeros(1, 1);
        g.as_mut_slice()[0] = 1.0;
        let mut adam = Adam::new(p.len());
        adam.step(&mut p, &g, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1 -> Δ = lr / (1 + 1e-8)
        assert!((p.as_slice()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_rejected_before_mutation() {
        let mut p = ParamSet::zeros(2, 1);
        let mut g = ParamSet::zeros(2, 1);
        g.as_mut_slice()[0] = 1.0;
        let last = g.len() - 1;
        g.as_mut_slice()[last] = f64::NAN;
        let mut adam = Adam::new(p.len());
        let err = adam.step(&mut p, &g, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient("b2")), "{err}");
        assert_eq!(p, ParamSet::zeros(2, 1));
        assert_eq!(adam.steps(), 0);
    }
}
