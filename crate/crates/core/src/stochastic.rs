//! Diagonal-Gaussian step embeddings: sampling, KL to the standard normal,
//! and the harmonic-mean uncertainty score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::{Graph, NumericsError, Real, Var};

/// Standard-deviation clamp applied to every predicted sigma.
pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 1e4;

/// Log-variance bounds equivalent to the sigma clamp.
pub fn logvar_bounds() -> (f64, f64) {
    (2.0 * SIGMA_MIN.ln(), 2.0 * SIGMA_MAX.ln())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbedding {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, NumericsError> {
        if mu.len() != sigma.len() {
            return Err(NumericsError::Shape(format!("mu has {} dims, sigma {}", mu.len(), sigma.len())));
        }
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(NumericsError::Domain(format!("sigma must be positive and finite, got {s}")));
        }
        Ok(GaussianEmbedding { mu, sigma })
    }

    /// From a predicted log-variance, with sigma clamped to `[SIGMA_MIN, SIGMA_MAX]`.
    pub fn from_logvar(mu: Vec<f64>, logvar: &[f64]) -> Result<Self, NumericsError> {
        let sigma = logvar.iter().map(|lv| (0.5 * lv).exp().clamp(SIGMA_MIN, SIGMA_MAX)).collect();
        Self::new(mu, sigma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `mu + sigma ∘ noise`.
pub fn sample_reparameterized(g: &GaussianEmbedding, noise: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if noise.len() != g.dim() {
        return Err(NumericsError::Shape(format!("noise has {} dims, embedding {}", noise.len(), g.dim())));
    }
    Ok(g.mu.iter().zip(&g.sigma).zip(noise).map(|((m, s), e)| m + s * e).collect())
}

/// Differentiable reparameterized draw; `noise` enters as a constant.
pub fn sample_var<F: Real>(
    graph: &mut Graph<F>,
    mu: Var,
    sigma: Var,
    noise: Var,
) -> Result<Var, NumericsError> {
    let spread = graph.mul(sigma, noise)?;
    graph.add(mu, spread)
}

/// `KL(N(mu, diag sigma²) || N(0, I))` in closed form.
pub fn kl_standard_normal(g: &GaussianEmbedding) -> Result<f64, NumericsError> {
    if let Some(s) = g.sigma.iter().find(|s| **s <= 0.0) {
        return Err(NumericsError::Domain(format!("sigma must be positive, got {s}")));
    }
    Ok(0.5
        * g.mu
            .iter()
            .zip(&g.sigma)
            .map(|(m, s)| m * m + s * s - (s * s).ln() - 1.0)
            .sum::<f64>())
}

/// Differentiable KL summed over all entries, written in terms of the
/// (already clamped) log-variance: `½ Σ (mu² + exp(lv) − lv − 1)`.
pub fn kl_var<F: Real>(graph: &mut Graph<F>, mu: Var, logvar: Var) -> Result<Var, NumericsError> {
    let mu2 = graph.square(mu)?;
    let var = graph.exp(logvar)?;
    let a = graph.add(mu2, var)?;
    let b = graph.sub(a, logvar)?;
    let c = graph.offset(b, -F::one())?;
    let s = graph.sum(c)?;
    graph.scale(s, F::from_f64(0.5))
}

/// Sum over steps of the harmonic mean of each step's sigmas.
pub fn uncertainty(per_step_sigmas: &[Vec<f64>]) -> Result<f64, NumericsError> {
    let first = per_step_sigmas
        .first()
        .ok_or_else(|| NumericsError::Contract("uncertainty of an empty step list".into()))?;
    let d = first.len();
    let mut total = 0.0;
    for sigmas in per_step_sigmas {
        if sigmas.len() != d || d == 0 {
            return Err(NumericsError::Shape("steps must share a non-zero latent width".into()));
        }
        if let Some(s) = sigmas.iter().find(|s| **s <= 0.0) {
            return Err(NumericsError::Domain(format!("sigma must be positive, got {s}")));
        }
        total += d as f64 / sigmas.iter().map(|s| 1.0 / s).sum::<f64>();
    }
    Ok(total)
}

/// Keyed standard-normal stream: every `(key, sample, step)` triple gets an
/// independent generator, so draws never depend on evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey(pub u64);

impl NoiseKey {
    pub fn draws(self, sample: u64, step: u64, dim: usize) -> Vec<f64> {
        let seed = mix(mix(self.0 ^ 0x9e37_79b9_7f4a_7c15, sample), step);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn derive(self, tag: u64) -> NoiseKey {
        NoiseKey(mix(self.0, tag))
    }
}

/// SplitMix64 finalizer over a combined word.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn reparameterized_samples() {
        let g = GaussianEmbedding::new(vec![1.0, 2.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(sample_reparameterized(&g, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(sample_reparameterized(&g, &[1.0, -1.0]).unwrap(), vec![2.0, -1.0]);
        assert!(sample_reparameterized(&g, &[1.0]).is_err());

        let tight = GaussianEmbedding::from_logvar(vec![0.5, -0.5], &[-1e3, -1e3]).unwrap();
        assert_eq!(tight.sigma, vec![SIGMA_MIN, SIGMA_MIN]);
        let z = sample_reparameterized(&tight, &[2.5, -3.0]).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-3 && (z[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn kl_examples() {
        let prior = GaussianEmbedding::new(vec![0.0; 5], vec![1.0; 5]).unwrap();
        assert_eq!(kl_standard_normal(&prior).unwrap(), 0.0);
        let shifted = GaussianEmbedding::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_standard_normal(&shifted).unwrap() - 0.5).abs() < 1e-12);
        let wide = GaussianEmbedding::new(vec![0.0], vec![std::f64::consts::E.sqrt()]).unwrap();
        let expected = (std::f64::consts::E - 2.0) / 2.0;
        assert!((kl_standard_normal(&wide).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn kl_rejects_bad_sigma() {
        let g = GaussianEmbedding { mu: vec![0.0], sigma: vec![0.0] };
        assert!(matches!(kl_standard_normal(&g), Err(NumericsError::Domain(_))));
        assert!(GaussianEmbedding::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn kl_graph_matches_closed_form_and_gradient() {
        let mu = vec![0.3, -1.2, 0.0];
        let sigma: Vec<f64> = vec![0.5, 1.7, 1.0];
        let logvar: Vec<f64> = sigma.iter().map(|s| (s * s).ln()).collect();
        let mut g = Graph::<f64>::new();
        let m = g.param(Tensor::row_vector(mu.clone()).unwrap());
        let lv = g.param(Tensor::row_vector(logvar).unwrap());
        let kl = kl_var(&mut g, m, lv).unwrap();
        let closed = kl_standard_normal(&GaussianEmbedding::new(mu.clone(), sigma).unwrap()).unwrap();
        assert!((g.value(kl).item() - closed).abs() < 1e-12);
        let grads = g.backward(kl).unwrap();
        for (gm, m) in grads.wrt(m).unwrap().data().iter().zip(&mu) {
            assert!((gm - m).abs() < 1e-7);
        }
    }

    #[test]
    fn uncertainty_examples() {
        assert!((uncertainty(&[vec![0.5, 0.5]]).unwrap() - 0.5).abs() < 1e-12);
        assert!((uncertainty(&[vec![1.0, 0.5]]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((uncertainty(&[vec![0.5; 4], vec![0.5; 4]]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(uncertainty(&[]), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn noise_streams_are_keyed() {
        let k = NoiseKey(42);
        assert_eq!(k.draws(3, 1, 8), k.draws(3, 1, 8));
        assert_ne!(k.draws(3, 1, 8), k.draws(3, 2, 8));
        assert_ne!(k.draws(3, 1, 8), NoiseKey(43).draws(3, 1, 8));
    }
}
