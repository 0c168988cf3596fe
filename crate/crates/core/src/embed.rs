//! Deterministic hashed bag-of-tokens embedding.
//!
//! Tokens are lowercased, split on whitespace and hashed with FNV-1a (64-bit)
//! into `d` buckets. Counts are L2-normalized. The vector is stored sparsely
//! (sorted `(bucket, value)` pairs) so large `d` costs nothing extra.

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_DIM: usize = 256;
pub const MIN_DIM: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Bucket of a single (already lowercased) token.
pub fn bucket(token: &str, d: usize) -> usize {
    (fnv1a64(token.as_bytes()) % d as u64) as usize
}

/// A unit-norm (or all-zero) vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T = f64> {
    dim: usize,
    entries: Vec<(u32, T)>,
}

impl<T: Real> Embedding<T> {
    pub fn zero(dim: usize) -> Self {
        Embedding { dim, entries: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    /// Non-zero `(bucket, value)` pairs in ascending bucket order.
    pub fn entries(&self) -> &[(u32, T)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }

    pub fn norm(&self) -> T {
        self.entries.iter().fold(T::zero(), |acc, &(_, v)| acc + v * v).sqrt()
    }

    /// Writes the dense values into `out[offset..offset + dim]`.
    pub fn write_dense(&self, out: &mut [T], offset: usize) {
        for &(i, v) in &self.entries {
            out[offset + i as usize] = v;
        }
    }

    fn dot(&self, other: &Self) -> T {
        let (mut i, mut j) = (0, 0);
        let mut acc = T::zero();
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc = acc + a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

pub fn embed_text<T: Real>(text: &str, d: usize) -> Result<Embedding<T>> {
    if d < MIN_DIM {
        return Err(Error::DimensionTooSmall(d));
    }
    let mut counts: Vec<(u32, u32)> = text
        .split_whitespace()
        .map(|tok| (bucket(&tok.to_lowercase(), d) as u32, 1))
        .collect();
    counts.sort_unstable_by_key(|&(b, _)| b);
    counts.dedup_by(|next, acc| {
        if next.0 == acc.0 {
            acc.1 += next.1;
            true
        } else {
            false
        }
    });
    let sq: u64 = counts.iter().map(|&(_, c)| (c as u64) * (c as u64)).sum();
    if sq == 0 {
        return Ok(Embedding::zero(d));
    }
    let norm = T::from_u64(sq).unwrap().sqrt();
    let entries = counts.into_iter().map(|(b, c)| (b, T::from_u32(c).unwrap() / norm)).collect();
    Ok(Embedding { dim: d, entries })
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine<T: Real>(a: &Embedding<T>, b: &Embedding<T>) -> Result<T> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch { left: a.dim, right: b.dim });
    }
    if a.is_zero() || b.is_zero() {
        return Ok(T::zero());
    }
    let c = a.dot(b) / (a.norm() * b.norm());
    Ok(c.max(-T::one()).min(T::one()))
}
