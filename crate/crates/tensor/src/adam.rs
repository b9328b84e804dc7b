use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Settings used for the adversarial latent networks.
    pub const GAN: AdamConfig = AdamConfig {
        lr: 2e-4,
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    };

    /// Settings used for autoencoders and the classifier.
    pub const DEFAULT: AdamConfig = AdamConfig {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Moment buffers for one fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Param<T>], config: AdamConfig) -> Self {
        let zeros = |p: &Param<T>| vec![T::zero(); p.read().len()];
        Self {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update; clears the gradients it consumed.
    ///
    /// `params` must be the same list, in the same order, the state was
    /// created for. Fails without touching any parameter if one lacks a
    /// gradient.
    pub fn step(&mut self, params: &[Param<T>]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "adam: parameter list changed");
        for p in params {
            if p.read().grad().is_none() {
                return Err(TensorError::MissingGradient {
                    name: p.name().to_string(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(c.beta1), f(c.beta2));
        let bc1 = f(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = f(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (f(c.lr), f(c.eps));
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            let mut t = p.write();
            let g = t.take_grad().expect("checked above");
            for (((w, g), m), v) in t
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn quadratic_grad(p: &Param<f64>) {
        let mut g = Graph::new();
        let w = g.param(p);
        let sq = g.square(w).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let p = Param::learnable("w", Tensor::new(vec![3], vec![2.0, -0.5, 4.0]).unwrap());
        let mut st = AdamState::new(std::slice::from_ref(&p), AdamConfig::DEFAULT.with_lr(0.01));
        quadratic_grad(&p);
        st.step(std::slice::from_ref(&p)).unwrap();
        let got = p.read().data().to_vec();
        for (after, before) in got.iter().zip([2.0, -0.5, 4.0]) {
            let step = after - before;
            assert!((step + 0.01 * f64::signum(before)).abs() < 1e-8, "{step}");
        }
        assert!(p.read().grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let p = Param::learnable("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut st = AdamState::new(std::slice::from_ref(&p), AdamConfig::DEFAULT);
        p.write().accumulate_grad(&[0.0, 0.0]);
        st.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.read().data(), &[1.0, 2.0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let p = Param::learnable("w", Tensor::<f64>::zeros(vec![2]));
        let mut st = AdamState::new(std::slice::from_ref(&p), AdamConfig::DEFAULT);
        let err = st.step(std::slice::from_ref(&p)).unwrap_err();
        assert_eq!(err, TensorError::MissingGradient { name: "w".into() });
        assert_eq!(st.steps_taken(), 0);
    }

    #[test]
    fn hundred_steps_on_a_parabola() {
        let p = Param::learnable("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut st = AdamState::new(std::slice::from_ref(&p), AdamConfig::DEFAULT.with_lr(0.1));
        for _ in 0..100 {
            quadratic_grad(&p);
            st.step(std::slice::from_ref(&p)).unwrap();
        }
        assert_eq!(st.steps_taken(), 100);
        assert!(p.read().item().abs() < 0.1, "w = {}", p.read().item());
    }
}
