//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Moments are allocated to match `params`; the order of that slice is
    /// the binding between state and parameters for all later steps.
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over all parameters.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count changed");
        assert_eq!(params.len(), grads.len(), "adam: gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one = T::one();
        let corr1 = T::from_f64(1.0 - self.config.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - self.config.beta2.powi(t));
        let lr = T::from_f64(self.config.lr);
        let eps = T::from_f64(self.config.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "adam: grad shape mismatch");
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (one - b1) * gd[i];
                vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
                let mhat = md[i] / corr1;
                let vhat = vd[i] / corr2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients in place so their joint L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_sign_of_gradient() {
        // At t=1 the bias corrections cancel and the update is
        // -lr * g / (|g| + eps') which is -lr * sign(g) up to eps.
        let mut p = Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = Tensor::from_vec(&[3], vec![3.0f64, -0.25, 1e-3]).unwrap();
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut state = AdamState::new(cfg, &[&p]);
        let before = p.clone();
        state.step(&mut [&mut p], &[g.clone()]);
        for i in 0..3 {
            let delta = p.data()[i] - before.data()[i];
            let want = -0.1 * g.data()[i].signum();
            assert!((delta - want).abs() < 1e-4, "delta {delta} want {want}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(&[2], vec![0.7f64, -0.3]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        let before = p.clone();
        state.step(&mut [&mut p], &[g.clone()]);
        state.step(&mut [&mut p], &[g]);
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn descends_quadratic_from_one() {
        // f(x) = x^2, gradient 2x, lr 0.1: x must strictly decrease toward 0.
        let mut x = Tensor::scalar(1.0f64);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut state = AdamState::new(cfg, &[&x]);
        let mut prev = x.item();
        for _ in 0..2 {
            let g = Tensor::scalar(2.0 * x.item());
            state.step(&mut [&mut x], &[g]);
            assert!(x.item() < prev, "{} not below {prev}", x.item());
            assert!(x.item() > 0.0 - 0.5, "overshot far past zero");
            prev = x.item();
        }
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = vec![
            Tensor::from_vec(&[2], vec![3.0f64, 0.0]).unwrap(),
            Tensor::from_vec(&[1], vec![4.0f64]).unwrap(),
        ];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(grads[0].data()[0], 3.0);

        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let mut sq = 0.0;
        for g in &grads {
            for v in g.data() {
                sq += v * v;
            }
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);
    }
}
