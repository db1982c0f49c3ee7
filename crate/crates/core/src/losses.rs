//! Training objective: score MSE, KL to the prior, and the attention-ordering
//! auxiliaries (sparsity around each step's temporal center, hinge ranking of
//! the centers).

use serde::{Deserialize, Serialize};

use crate::model::AttentionMap;
use crate::numerics::{Graph, NumericsError, Real, Tensor, Var};
use crate::stochastic::{kl_standard_normal, GaussianEmbedding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta_start: f64,
    pub beta_max: f64,
    pub gamma: f64,
    /// Ranking margin, in clips.
    pub margin: f64,
    /// Fixed output standard deviation of the score likelihood.
    pub output_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta_start: 1e-5, beta_max: 0.005, gamma: 0.1, margin: 1.0, output_sigma: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_max) {
            return Err(NumericsError::Contract("need 0 < beta_start <= beta_max".into()));
        }
        if self.gamma < 0.0 || self.margin <= 0.0 || self.output_sigma <= 0.0 {
            return Err(NumericsError::Contract("gamma >= 0, margin > 0 and output_sigma > 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    /// Absent for deterministic models.
    pub kl: Option<f64>,
    pub sparsity: f64,
    pub ranking: f64,
    pub total: f64,
    pub beta_used: f64,
}

impl LossBreakdown {
    pub fn recompose(&self, gamma: f64) -> f64 {
        self.mse + self.beta_used * self.kl.unwrap_or(0.0) + gamma * (self.sparsity + self.ranking)
    }
}

/// `(1/N) Σ (ŷ − y)² / σ²`.
pub fn mse_loss(pred: &[f64], target: &[f64], sigma: f64) -> Result<f64, NumericsError> {
    if pred.is_empty() {
        return Err(NumericsError::Contract("empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(NumericsError::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / (sigma * sigma) / n)
}

/// Temporally weighted center `Σ_t t·A[s,t]` of each row, with 1-indexed clips.
pub fn attention_centers(a: &AttentionMap) -> Vec<f64> {
    (0..a.k)
        .map(|s| a.row(s).iter().enumerate().map(|(t, w)| (t + 1) as f64 * w).sum())
        .collect()
}

/// `Σ_s Σ_t |t − center_s| · A[s,t]`.
pub fn sparsity_loss(a: &AttentionMap) -> f64 {
    attention_centers(a)
        .iter()
        .enumerate()
        .map(|(s, c)| {
            a.row(s)
                .iter()
                .enumerate()
                .map(|(t, w)| ((t + 1) as f64 - c).abs() * w)
                .sum::<f64>()
        })
        .sum()
}

/// Hinge loss keeping centers ordered, separated by `margin` and inside `[1, T]`.
pub fn ranking_loss(centers: &[f64], t: usize, margin: f64) -> Result<f64, NumericsError> {
    let (first, last) = match (centers.first(), centers.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(NumericsError::Contract("ranking loss needs at least one center".into())),
    };
    let pairs: f64 = centers.windows(2).map(|w| (w[0] - w[1] + margin).max(0.0)).sum();
    Ok(pairs + (1.0 - first + margin).max(0.0) + (last - t as f64 + margin).max(0.0))
}

/// Linear anneal from `beta_start` at step 0 to `beta_max` at `total_steps`.
pub fn beta_schedule(step: u64, total_steps: u64, cfg: &LossConfig) -> Result<f64, NumericsError> {
    if step > total_steps {
        return Err(NumericsError::Contract(format!("step {step} beyond schedule of {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(cfg.beta_max);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(cfg.beta_start + (cfg.beta_max - cfg.beta_start) * frac)
}

/// Everything `total_loss` needs from one scored video.
#[derive(Clone, Debug)]
pub struct ScoredSample<'a> {
    pub prediction: f64,
    pub target: f64,
    /// Step embeddings; `None` in deterministic mode.
    pub embeddings: Option<&'a [GaussianEmbedding]>,
    pub attention: &'a AttentionMap,
}

/// Batch objective. KL is summed over steps and every term averaged over the
/// batch; `use_aux` switches the attention terms on.
pub fn total_loss(
    batch: &[ScoredSample<'_>],
    beta: f64,
    cfg: &LossConfig,
    use_aux: bool,
) -> Result<LossBreakdown, NumericsError> {
    let preds: Vec<f64> = batch.iter().map(|b| b.prediction).collect();
    let targets: Vec<f64> = batch.iter().map(|b| b.target).collect();
    let mse = mse_loss(&preds, &targets, cfg.output_sigma)?;
    let n = batch.len() as f64;

    let stochastic = batch.iter().all(|b| b.embeddings.is_some());
    let kl = if stochastic {
        let mut sum = 0.0;
        for b in batch {
            for g in b.embeddings.unwrap_or_default() {
                sum += kl_standard_normal(g)?;
            }
        }
        Some(sum / n)
    } else {
        None
    };

    let (mut sparsity, mut ranking) = (0.0, 0.0);
    if use_aux {
        for b in batch {
            sparsity += sparsity_loss(b.attention);
            ranking += ranking_loss(&attention_centers(b.attention), b.attention.t, cfg.margin)?;
        }
        sparsity /= n;
        ranking /= n;
    }
    let beta_used = if stochastic { beta } else { 0.0 };
    let mut out = LossBreakdown { mse, kl, sparsity, ranking, total: 0.0, beta_used };
    out.total = out.recompose(if use_aux { cfg.gamma } else { 0.0 });
    Ok(out)
}

/// Differentiable K×1 centers of a K×T attention matrix.
pub fn centers_var<F: Real>(g: &mut Graph<F>, attention: Var) -> Result<Var, NumericsError> {
    let t = g.shape(attention)[1];
    let clips = g.constant(Tensor::new(vec![t, 1], (1..=t).map(F::from_usize).collect())?);
    g.matmul(attention, clips)
}

/// Differentiable sparsity loss.
pub fn sparsity_var<F: Real>(g: &mut Graph<F>, attention: Var, centers: Var) -> Result<Var, NumericsError> {
    let t = g.shape(attention)[1];
    let ones = g.constant(Tensor::full(&[1, t], F::one()));
    let clips = g.constant(Tensor::new(vec![1, t], (1..=t).map(F::from_usize).collect())?);
    let k = g.shape(attention)[0];
    let clip_grid = {
        let col = g.constant(Tensor::full(&[k, 1], F::one()));
        g.matmul(col, clips)?
    };
    let spread = g.matmul(centers, ones)?;
    let dist = g.sub(clip_grid, spread)?;
    let dist = g.abs(dist)?;
    let weighted = g.mul(dist, attention)?;
    g.sum(weighted)
}

/// Differentiable ranking loss over K×1 centers.
pub fn ranking_var<F: Real>(g: &mut Graph<F>, centers: Var, t: usize, margin: f64) -> Result<Var, NumericsError> {
    let k = g.shape(centers)[0];
    let m = F::from_f64(margin);
    let first = g.slice_rows(centers, 0, 1)?;
    let last = g.slice_rows(centers, k - 1, k)?;
    // max(0, 1 − c₁ + m)
    let lower = g.neg(first)?;
    let lower = g.offset(lower, F::one() + m)?;
    let mut terms = vec![g.relu(lower)?];
    // max(0, c_K − T + m)
    let upper = g.offset(last, m - F::from_usize(t))?;
    terms.push(g.relu(upper)?);
    if k > 1 {
        let head = g.slice_rows(centers, 0, k - 1)?;
        let tail = g.slice_rows(centers, 1, k)?;
        let gap = g.sub(head, tail)?;
        let gap = g.offset(gap, m)?;
        terms.push(g.relu(gap)?);
    }
    let mut total = g.sum(terms[0])?;
    for &term in &terms[1..] {
        let s = g.sum(term)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn amap(rows: &[&[f64]]) -> AttentionMap {
        AttentionMap { k: rows.len(), t: rows[0].len(), values: rows.concat() }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.3, 0.7], &[0.3, 0.7], 1.0).unwrap(), 0.0);
        assert_eq!(mse_loss(&[3.0], &[1.0], 1.0).unwrap(), 4.0);
        assert!((mse_loss(&[1.0, 3.0], &[0.0, 0.0], 2.0).unwrap() - 1.25).abs() < 1e-12);
        assert!(mse_loss(&[], &[], 1.0).is_err());
    }

    #[test]
    fn centers_examples() {
        let mut one_hot = vec![0.0; 8];
        one_hot[4] = 1.0;
        assert_eq!(attention_centers(&amap(&[&one_hot])), vec![5.0]);
        assert_eq!(attention_centers(&amap(&[&[0.25; 4]])), vec![2.5]);
        assert_eq!(attention_centers(&amap(&[&[0.5, 0.0, 0.5]])), vec![2.0]);
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_loss(&amap(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]])), 0.0);
        assert!((sparsity_loss(&amap(&[&[0.5, 0.5]])) - 0.5).abs() < 1e-12);
        assert!(sparsity_loss(&amap(&[&[0.9, 0.1]])) > 0.0);
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(ranking_loss(&[2.0, 5.0, 8.0], 10, 1.0).unwrap(), 0.0);
        assert_eq!(ranking_loss(&[5.0, 2.0], 10, 1.0).unwrap(), 4.0);
        assert_eq!(ranking_loss(&[2.0], 10, 1.0).unwrap(), 0.0);
        assert_eq!(ranking_loss(&[9.0], 10, 1.0).unwrap(), 0.0);
        assert!(ranking_loss(&[], 10, 1.0).is_err());
    }

    #[test]
    fn beta_examples() {
        let cfg = LossConfig::default();
        assert_eq!(beta_schedule(0, 1000, &cfg).unwrap(), 1e-5);
        assert_eq!(beta_schedule(1000, 1000, &cfg).unwrap(), 0.005);
        assert!((beta_schedule(500, 1000, &cfg).unwrap() - 0.002505).abs() < 1e-15);
        assert!(beta_schedule(1001, 1000, &cfg).is_err());
    }

    #[test]
    fn graph_losses_match_values() {
        let a = amap(&[&[0.1, 0.6, 0.3, 0.0], &[0.2, 0.2, 0.2, 0.4], &[0.7, 0.1, 0.1, 0.1]]);
        let mut g = Graph::<f64>::new();
        let av = g.constant(Tensor::new(vec![3, 4], a.values.clone()).unwrap());
        let c = centers_var(&mut g, av).unwrap();
        assert_eq!(g.value(c).data(), attention_centers(&a).as_slice());
        let sp = sparsity_var(&mut g, av, c).unwrap();
        assert!((g.value(sp).item() - sparsity_loss(&a)).abs() < 1e-12);
        let rk = ranking_var(&mut g, c, 4, 1.0).unwrap();
        let expected = ranking_loss(&attention_centers(&a), 4, 1.0).unwrap();
        assert!((g.value(rk).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_zero_for_perfect_batch() {
        let a = amap(&[&[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]]);
        let prior = vec![GaussianEmbedding::new(vec![0.0; 3], vec![1.0; 3]).unwrap(); 2];
        let batch = [ScoredSample { prediction: 0.4, target: 0.4, embeddings: Some(&prior), attention: &a }];
        // centers 2 and 3 with margin 0.5 in T=4: every hinge inactive
        let cfg = LossConfig { margin: 0.5, ..Default::default() };
        let out = total_loss(&batch, 0.003, &cfg, true).unwrap();
        assert_eq!(out.total, 0.0);
    }

    #[test]
    fn total_loss_reduces_to_mse() {
        let a = amap(&[&[0.5, 0.5]]);
        let emb = vec![GaussianEmbedding::new(vec![0.4, -1.0], vec![0.5, 2.0]).unwrap()];
        let batch = [
            ScoredSample { prediction: 0.1, target: 0.5, embeddings: Some(&emb), attention: &a },
            ScoredSample { prediction: 0.9, target: 0.6, embeddings: Some(&emb), attention: &a },
        ];
        let cfg = LossConfig { gamma: 0.0, output_sigma: 1.0, ..Default::default() };
        let out = total_loss(&batch, 0.0, &cfg, true).unwrap();
        assert!((out.total - out.mse).abs() < 1e-15);
    }
}
