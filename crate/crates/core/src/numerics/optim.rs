use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moment estimates and step count for decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F: Real = f64> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new<'a>(config: AdamWConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (first, second) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        OptimizerState { config, step: 0, first, second }
    }

    /// One AdamW update. `lrs[i]` is the learning rate applied to parameter `i`;
    /// a missing gradient counts as zero.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<F>>,
        grads: &[Option<Tensor<F>>],
        lrs: &[f64],
    ) -> Result<(), NumericsError> {
        if grads.len() != self.first.len() || lrs.len() != self.first.len() {
            return Err(NumericsError::Shape(format!(
                "optimizer tracks {} parameters, got {} gradients and {} rates",
                self.first.len(),
                grads.len(),
                lrs.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != self.first[i].shape() {
                    return Err(NumericsError::Shape(format!("gradient {i} has shape {:?}", g.shape())));
                }
                if !g.is_finite() {
                    return Err(NumericsError::TrainingFault(format!("non-finite gradient for parameter {i}")));
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let eps = F::from_f64(c.eps);

        let mut n = 0;
        for (i, p) in params.into_iter().enumerate() {
            n += 1;
            if p.shape() != self.first[i].shape() {
                return Err(NumericsError::Shape(format!("parameter {i} has shape {:?}", p.shape())));
            }
            let lr = lrs[i];
            let decay = F::from_f64(1.0 - lr * c.weight_decay);
            let step_size = F::from_f64(lr / bias1);
            let inv_bias2 = F::from_f64(1.0 / bias2);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = grads[i].as_ref().map_or(F::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                pd[j] *= decay;
                pd[j] -= step_size * m[j] / ((v[j] * inv_bias2).sqrt() + eps);
            }
        }
        if n != self.first.len() {
            return Err(NumericsError::Shape(format!("expected {} parameters, got {n}", self.first.len())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(wd: f64, shapes: &[&[usize]]) -> OptimizerState {
        OptimizerState::new(AdamWConfig { weight_decay: wd, ..Default::default() }, shapes.iter().copied())
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut s = state(0.0, &[&[3]]);
        s.step(p.iter_mut(), &[Some(Tensor::zeros(&[3]))], &[0.1]).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let mut s = state(0.5, &[&[2]]);
        s.step(p.iter_mut(), &[None], &[0.1]).unwrap();
        assert_eq!(p[0].data(), &[1.0 * (1.0 - 0.05), -2.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn two_steps_match_hand_unrolled_rule() {
        // Hand-unrolled AdamW with g = 1, lr = 0.1, wd = 0.01, x0 = 0.5.
        let (lr, wd, b1, b2, eps) = (0.1, 0.01, 0.9, 0.999, 1e-8);
        let mut x = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x *= 1.0 - lr * wd;
            x -= lr * mhat / (vhat.sqrt() + eps);
        }

        let mut p = vec![Tensor::scalar(0.5)];
        let mut s = state(wd, &[&[1]]);
        for _ in 0..2 {
            s.step(p.iter_mut(), &[Some(Tensor::scalar(1.0))], &[lr]).unwrap();
        }
        assert!((p[0].item() - x).abs() < 1e-12, "{} vs {x}", p[0].item());
        // With bias correction each step moves by ~lr for a constant gradient.
        assert!((0.5 - p[0].item() - 0.2).abs() < 0.01);
    }

    #[test]
    fn nan_gradient_is_a_training_fault() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = state(0.0, &[&[1]]);
        let err = s.step(p.iter_mut(), &[Some(Tensor::scalar(f64::NAN))], &[0.1]).unwrap_err();
        assert!(matches!(err, NumericsError::TrainingFault(_)));
        assert_eq!(s.step, 0);
    }
}
