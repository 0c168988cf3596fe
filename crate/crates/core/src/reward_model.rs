//! Seven-head linear preference model over a frozen prefix encoding.
//!
//! Loss per pair: `-(1/7) * sum_k log σ(o_k * (f_k(x+) - f_k(x-)))`, where the
//! orientation `o_k` is +1 unless per-component targets flip a head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed;
use crate::error::{Error, Result};
use crate::preference::{Branch, PreferencePair};
use crate::scalar::{log_sigmoid, sigmoid, Real};

pub const HEADS: usize = 7;
pub const HEAD_NAMES: [&str; HEADS] =
    ["retrieval_bonus", "overlap", "backtrack", "refusal", "step_cost", "answer_correctness", "action_penalty"];

/// Hashed prefix text followed by the origin action's feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixEncoding<T = f64> {
    pub values: Vec<T>,
}

fn serialize_prefix(b: &Branch) -> String {
    let s = &b.origin_state;
    let mut parts = vec![format!("question {}", s.question_id)];
    for (q, docs) in s.sub_queries.iter().zip(&s.retrieved_sets) {
        parts.push(format!("query {q}"));
        parts.extend(docs.iter().map(|d| format!("doc{d}")));
    }
    for n in &s.notes {
        parts.push(n.clone());
    }
    parts.push(format!("action {}", b.action()));
    parts.join(" ")
}

pub fn encode_prefix(branch: &Branch, embed_dim: usize) -> Result<PrefixEncoding<f64>> {
    let text = serialize_prefix(branch);
    let features = &branch.candidates[branch.action_index].features;
    let mut values = vec![0.0; embed_dim + features.len()];
    embed::embed_text::<f64>(&text, embed_dim)?.write_dense(&mut values, 0);
    values[embed_dim..].copy_from_slice(features);
    Ok(PrefixEncoding { values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmParams<T> {
    pub heads: Vec<Vec<T>>,
    pub biases: Vec<T>,
    /// All heads share one weight vector (single-head variant).
    #[serde(default)]
    pub tied: bool,
}

impl<T: Real> RmParams<T> {
    pub fn zeros(dim: usize) -> Self {
        RmParams { heads: vec![vec![T::zero(); dim]; HEADS], biases: vec![T::zero(); HEADS], tied: false }
    }

    pub fn dim(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.len() != HEADS || self.biases.len() != HEADS {
            return Err(Error::Corrupt { what: "reward model".into(), reason: "expected seven heads".into() });
        }
        let d = self.dim();
        if self.heads.iter().any(|h| h.len() != d) {
            return Err(Error::Corrupt { what: "reward model".into(), reason: "ragged heads".into() });
        }
        if self.heads.iter().flatten().chain(&self.biases).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reward model"));
        }
        Ok(())
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn score<T: Real>(rm: &RmParams<T>, enc: &[T]) -> Result<[T; HEADS]> {
    if enc.len() != rm.dim() {
        return Err(Error::DimensionMismatch { left: enc.len(), right: rm.dim() });
    }
    let mut out = [T::zero(); HEADS];
    for k in 0..HEADS {
        out[k] = dot(&rm.heads[k], enc) + rm.biases[k];
    }
    Ok(out)
}

pub fn mean_score<T: Real>(rm: &RmParams<T>, enc: &[T]) -> Result<T> {
    let s = score(rm, enc)?;
    Ok(s.iter().fold(T::zero(), |a, &b| a + b) / T::from_usize(HEADS).unwrap())
}

/// One encoded comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct RmExample<T> {
    pub positive: Vec<T>,
    pub negative: Vec<T>,
    pub orientation: [T; HEADS],
}

impl<T: Real> RmExample<T> {
    pub fn new(positive: Vec<T>, negative: Vec<T>) -> Self {
        RmExample { positive, negative, orientation: [T::one(); HEADS] }
    }
}

/// Which ordering each head is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTargets {
    /// Every head sees the total-return ordering.
    #[default]
    Shared,
    /// Head k follows the ordering of its own weighted component return.
    PerComponent,
}

pub fn encode_pairs(pairs: &[PreferencePair], embed_dim: usize, targets: HeadTargets) -> Result<Vec<RmExample<f64>>> {
    pairs
        .iter()
        .map(|p| {
            let mut ex = RmExample::new(
                encode_prefix(&p.positive, embed_dim)?.values,
                encode_prefix(&p.negative, embed_dim)?.values,
            );
            if targets == HeadTargets::PerComponent {
                let (a, b) = (p.positive.component_returns(), p.negative.component_returns());
                for k in 0..HEADS {
                    if a[k] < b[k] {
                        ex.orientation[k] = -1.0;
                    }
                }
            }
            Ok(ex)
        })
        .collect()
}

// Biases cancel in f_k(x+) - f_k(x-), so they are left out of the difference.
fn head_diffs<T: Real>(rm: &RmParams<T>, ex: &RmExample<T>) -> Result<[T; HEADS]> {
    for x in [&ex.positive, &ex.negative] {
        if x.len() != rm.dim() {
            return Err(Error::DimensionMismatch { left: x.len(), right: rm.dim() });
        }
    }
    let mut d = [T::zero(); HEADS];
    for k in 0..HEADS {
        d[k] = ex.orientation[k] * (dot(&rm.heads[k], &ex.positive) - dot(&rm.heads[k], &ex.negative));
    }
    Ok(d)
}

pub fn rm_loss<T: Real>(rm: &RmParams<T>, examples: &[RmExample<T>]) -> Result<T> {
    if examples.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    let heads = T::from_usize(HEADS).unwrap();
    let mut total = T::zero();
    for ex in examples {
        let d = head_diffs(rm, ex)?;
        let per = d.iter().fold(T::zero(), |acc, &x| acc - log_sigmoid(x)) / heads;
        total = total + per;
    }
    Ok(total / T::from_usize(examples.len()).unwrap())
}

/// Gradient of [`rm_loss`] with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RmGradient<T> {
    pub heads: Vec<Vec<T>>,
    pub biases: Vec<T>,
}

pub fn rm_gradient<T: Real>(rm: &RmParams<T>, examples: &[RmExample<T>]) -> Result<RmGradient<T>> {
    if examples.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    let dim = rm.dim();
    let mut heads = vec![vec![T::zero(); dim]; HEADS];
    let scale = T::one() / (T::from_usize(HEADS).unwrap() * T::from_usize(examples.len()).unwrap());
    for ex in examples {
        let d = head_diffs(rm, ex)?;
        for k in 0..HEADS {
            // d/dw_k [-(1/7) log σ(d_k)] = -(1/7) σ(-d_k) o_k (x+ - x-)
            let c = -sigmoid(-d[k]) * ex.orientation[k] * scale;
            if c == T::zero() {
                continue;
            }
            for ((g, &p), &n) in heads[k].iter_mut().zip(&ex.positive).zip(&ex.negative) {
                *g = *g + c * (p - n);
            }
        }
    }
    // biases cancel in every pairwise difference
    Ok(RmGradient { heads, biases: vec![T::zero(); HEADS] })
}

fn apply<T: Real>(rm: &mut RmParams<T>, g: &RmGradient<T>, lr: T) {
    if rm.tied {
        let mut shared = vec![T::zero(); rm.dim()];
        for gk in &g.heads {
            for (s, &v) in shared.iter_mut().zip(gk) {
                *s = *s + v;
            }
        }
        for h in rm.heads.iter_mut() {
            for (w, &s) in h.iter_mut().zip(&shared) {
                *w = *w - lr * s;
            }
        }
    } else {
        for (h, gk) in rm.heads.iter_mut().zip(&g.heads) {
            for (w, &v) in h.iter_mut().zip(gk) {
                *w = *w - lr * v;
            }
        }
    }
    for (b, &v) in rm.biases.iter_mut().zip(&g.biases) {
        *b = *b - lr * v;
    }
}

/// One pass of mini-batch gradient descent over shuffled examples.
/// Returns the updated parameters and the mean pre-update batch loss.
pub fn rm_train_epoch<T: Real>(
    rm: &RmParams<T>,
    examples: &[RmExample<T>],
    lr: T,
    batch_size: usize,
    seed: u64,
) -> Result<(RmParams<T>, T)> {
    if examples.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    if lr < T::zero() || !lr.is_finite() {
        return Err(Error::config("train.rm_lr", "must be finite and non-negative"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut params = rm.clone();
    let mut weighted = T::zero();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Vec<RmExample<T>> = chunk.iter().map(|&i| examples[i].clone()).collect();
        weighted = weighted + rm_loss(&params, &batch)? * T::from_usize(batch.len()).unwrap();
        if lr > T::zero() {
            let g = rm_gradient(&params, &batch)?;
            apply(&mut params, &g, lr);
        }
    }
    Ok((params, weighted / T::from_usize(examples.len()).unwrap()))
}
