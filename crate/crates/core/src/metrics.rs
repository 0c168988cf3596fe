//! Normalized exact match and token-level F1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, strip ASCII punctuation, drop articles, split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|tok| !ARTICLES.contains(tok))
        .map(str::to_owned)
        .collect()
}

pub fn em(pred: &str, gold: &str) -> u8 {
    u8::from(normalize(pred) == normalize(gold))
}

/// Multiset token F1.
pub fn f1<T: Real>(pred: &str, gold: &str) -> T {
    let p = normalize(pred);
    let g = normalize(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return T::one(),
        (true, false) | (false, true) => return T::zero(),
        _ => {}
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for tok in &g {
        *gold_counts.entry(tok).or_default() += 1;
    }
    let mut common = 0usize;
    for tok in &p {
        if let Some(c) = gold_counts.get_mut(tok.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return T::zero();
    }
    let common = T::from_usize(common).unwrap();
    let precision = common / T::from_usize(p.len()).unwrap();
    let recall = common / T::from_usize(g.len()).unwrap();
    T::lit(2.0) * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub em: u8,
    pub f1: f64,
}

impl MetricPair {
    pub fn score(pred: &str, gold: &str) -> Self {
        MetricPair { em: em(pred, gold), f1: f1(pred, gold) }
    }
}

/// Aggregate evaluation statistics over a question set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub avg_steps: f64,
    pub refusal_accuracy: f64,
    pub answerable: usize,
    pub unanswerable: usize,
    pub total: usize,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("The 1865."), vec!["1865"]);
        assert_eq!(normalize("George V"), vec!["george", "v"]);
        assert!(normalize("").is_empty());
    }

    #[test]
    fn em_examples() {
        assert_eq!(em("1865", "1865"), 1);
        assert_eq!(em("1867", "1865"), 0);
        assert_eq!(em("the 1865", "1865"), 1);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1::<f64>("george v", "george v"), 1.0);
        // P = 1, R = 1/2, F1 = 2 * 1 * 0.5 / 1.5
        assert!((f1::<f64>("george", "george v") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1::<f64>("alpha", "beta"), 0.0);
        assert_eq!(f1::<f64>("", ""), 1.0);
        assert_eq!(f1::<f64>("", "x"), 0.0);
    }

    #[test]
    fn duplicate_tokens_use_counts() {
        // pred has "a1" twice, gold once: common = 1, P = 1/2, R = 1
        assert!((f1::<f64>("a1 a1", "a1") - 2.0 / 3.0).abs() < 1e-12);
    }

    fn phrase() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-d]{1,2}", 0..6)
    }

    proptest! {
        #[test]
        fn symmetric(p in phrase(), g in phrase()) {
            let (p, g) = (p.join(" "), g.join(" "));
            prop_assert_eq!(em(&p, &g), em(&g, &p));
            prop_assert!((f1::<f64>(&p, &g) - f1::<f64>(&g, &p)).abs() < 1e-12);
        }

        #[test]
        fn em_implies_full_f1(p in phrase()) {
            let s = p.join(" ");
            let with_article = format!("the {s}");
            prop_assert_eq!(em(&with_article, &s), 1);
            prop_assert_eq!(f1::<f64>(&with_article, &s), 1.0);
        }

        #[test]
        fn f1_permutation_invariant(mut p in phrase(), g in phrase()) {
            let g = g.join(" ");
            let a = f1::<f64>(&p.join(" "), &g);
            p.reverse();
            prop_assert!((a - f1::<f64>(&p.join(" "), &g)).abs() < 1e-12);
        }
    }
}
