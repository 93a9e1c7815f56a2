use super::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    /// A gradient held NaN or infinity; parameters and moments untouched.
    SkippedNonFinite,
}

/// Bias-corrected Adam over a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<AdamOutcome, TensorError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.first.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(AdamOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::c(beta1), T::c(beta2));
        let (one_b1, one_b2) = (T::c(1.0 - beta1), T::c(1.0 - beta2));
        let (bc1, bc2, lr, eps) = (T::c(bc1), T::c(bc2), T::c(lr), T::c(epsilon));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, x) in pd.iter_mut().enumerate() {
                let gi = gd[i];
                let mi = b1 * m.data()[i] + one_b1 * gi;
                let vi = b2 * v.data()[i] + one_b2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(AdamOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_closed_form() {
        let mut x = Tensor::<f64>::scalar(0.0);
        let g = Tensor::scalar(2.0);
        let mut adam = Adam::new(AdamConfig::default(), [&x]);
        adam.step(&mut [&mut x], &[g]).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction.
        let expected = -0.001 * 2.0 / ((2.0f64 * 2.0).sqrt() + 1e-8);
        assert!((x.item() - expected).abs() < 1e-12);
        assert!((x.item() + 0.001).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut x = Tensor::<f64>::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let before = x.clone();
        let mut adam = Adam::new(AdamConfig::default(), [&x]);
        for _ in 0..5 {
            adam.step(&mut [&mut x], &[Tensor::zeros(&[1, 3])]).unwrap();
        }
        assert_eq!(x, before);
    }

    #[test]
    fn identical_states_give_identical_results() {
        let x0 = Tensor::<f32>::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let g = Tensor::matrix(1, 2, vec![0.1, 0.4]).unwrap();
        let run = || {
            let mut x = x0.clone();
            let mut adam = Adam::new(AdamConfig::default(), [&x]);
            for _ in 0..3 {
                adam.step(&mut [&mut x], &[g.clone()]).unwrap();
            }
            x
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_skips_update() {
        let mut x = Tensor::<f64>::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default(), [&x]);
        let out = adam.step(&mut [&mut x], &[Tensor::scalar(f64::NAN)]).unwrap();
        assert_eq!(out, AdamOutcome::SkippedNonFinite);
        assert_eq!(x.item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut x = Tensor::<f64>::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default(), [&x]);
        assert!(adam.step(&mut [&mut x], &[Tensor::zeros(&[1, 2])]).is_err());
    }
}
