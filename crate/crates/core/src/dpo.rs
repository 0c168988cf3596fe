//! Direct preference optimization on origin-action log-probabilities.
//!
//! Both branches of a pair share the origin candidate set, so log π(x⁺) − log π(x⁻)
//! is a difference of logits and the softmax normalizer cancels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{self, PolicyParams};
use crate::preference::PreferencePair;
use crate::scalar::{sigmoid, softplus, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 0.1, learning_rate: 1.0, epochs: 4, batch_size: 32 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("dpo.beta", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("dpo.learning_rate", "must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("dpo.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("dpo.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// `-log σ(β (logp_pos - logp_neg))`.
pub fn dpo_loss<T: Real>(logp_pos: T, logp_neg: T, beta: T) -> Result<T> {
    if !logp_pos.is_finite() || !logp_neg.is_finite() || !beta.is_finite() {
        return Err(Error::NonFinite("dpo log-probabilities"));
    }
    Ok(softplus(-(beta * (logp_pos - logp_neg))))
}

/// Origin candidate features with the preferred and dispreferred indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoExample<T> {
    pub candidates: Vec<Vec<T>>,
    pub positive: usize,
    pub negative: usize,
}

impl DpoExample<f64> {
    pub fn from_pair(pair: &PreferencePair) -> Result<Self> {
        let (p, n) = (&pair.positive, &pair.negative);
        if p.origin() != n.origin() || p.candidates != n.candidates {
            return Err(Error::InvalidAction("pair branches do not share an origin".into()));
        }
        if p.candidates.is_empty() {
            return Err(Error::Empty("origin candidates"));
        }
        Ok(DpoExample {
            candidates: p.candidates.iter().map(|c| c.features.clone()).collect(),
            positive: p.action_index,
            negative: n.action_index,
        })
    }
}

impl<T: Real> DpoExample<T> {
    fn check(&self, dim: usize) -> Result<()> {
        let len = self.candidates.len();
        for i in [self.positive, self.negative] {
            if i >= len {
                return Err(Error::IndexOutOfRange { index: i, len });
            }
        }
        if self.positive == self.negative {
            return Err(Error::InvalidAction("pair takes the same action twice".into()));
        }
        if let Some(bad) = self.candidates.iter().find(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch { left: bad.len(), right: dim });
        }
        Ok(())
    }

    pub fn log_prob_margin(&self, weights: &[T], temperature: T) -> Result<T> {
        self.check(weights.len())?;
        let lp = policy::log_probs(weights, &self.candidates, temperature);
        Ok(lp[self.positive] - lp[self.negative])
    }
}

pub fn mean_dpo_loss<T: Real>(weights: &[T], examples: &[DpoExample<T>], beta: T, temperature: T) -> Result<T> {
    if examples.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    let mut total = T::zero();
    for ex in examples {
        let m = ex.log_prob_margin(weights, temperature)?;
        total = total + softplus(-(beta * m));
    }
    Ok(total / T::from_usize(examples.len()).unwrap())
}

/// Analytic gradient of [`mean_dpo_loss`] with respect to the policy weights.
pub fn dpo_gradient<T: Real>(weights: &[T], examples: &[DpoExample<T>], beta: T, temperature: T) -> Result<Vec<T>> {
    if examples.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    let mut grad = vec![T::zero(); weights.len()];
    let n = T::from_usize(examples.len()).unwrap();
    for ex in examples {
        let m = ex.log_prob_margin(weights, temperature)?;
        let c = -(beta * sigmoid(-(beta * m))) / (temperature * n);
        let (p, q) = (&ex.candidates[ex.positive], &ex.candidates[ex.negative]);
        for ((g, &a), &b) in grad.iter_mut().zip(p).zip(q) {
            *g = *g + c * (a - b);
        }
    }
    Ok(grad)
}

/// E epochs of shuffled mini-batch gradient descent. Returns the successor
/// snapshot and the mean pre-update loss of each epoch.
pub fn dpo_train(
    params: &PolicyParams,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
    temperature: f64,
    seed: u64,
) -> Result<(PolicyParams, Vec<f64>)> {
    let examples = pairs.iter().map(DpoExample::from_pair).collect::<Result<Vec<_>>>()?;
    let (weights, curve) = dpo_train_examples(&params.weights, &examples, cfg, temperature, seed)?;
    Ok((params.successor(weights), curve))
}

pub fn dpo_train_examples(
    weights: &[f64],
    examples: &[DpoExample<f64>],
    cfg: &DpoConfig,
    temperature: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = weights.to_vec();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<DpoExample<f64>> = chunk.iter().map(|&i| examples[i].clone()).collect();
            weighted += mean_dpo_loss(&w, &batch, cfg.beta, temperature)? * batch.len() as f64;
            if cfg.learning_rate > 0.0 {
                let g = dpo_gradient(&w, &batch, cfg.beta, temperature)?;
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= cfg.learning_rate * gi;
                }
            }
        }
        curve.push(weighted / examples.len() as f64);
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("policy weights"));
    }
    Ok((w, curve))
}
