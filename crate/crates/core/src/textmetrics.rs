//! Word tokenization and ROUGE-1/2/L scoring.
//!
//! N-gram overlap is clipped (multiset intersection), so repeating a
//! matching word never earns more than the reference supports.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Lowercased word tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl<S: AsRef<str>> FromIterator<S> for TokenizedText {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenizedText {
            tokens: iter.into_iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        if candidate_total == 0 || reference_total == 0 {
            return RougeScore::default();
        }
        let precision = overlap as f64 / candidate_total as f64;
        let recall = overlap as f64 / reference_total as f64;
        RougeScore {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }
}

pub fn harmonic_mean(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Lowercases and splits on every maximal run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> TokenizedText {
    TokenizedText {
        tokens: text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect(),
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped n-gram counts.
///
/// # Panics
/// Panics if `n == 0`.
pub fn rouge_n(candidate: &TokenizedText, reference: &TokenizedText, n: usize) -> RougeScore {
    assert!(n >= 1, "ROUGE order must be >= 1");
    let cand = ngram_counts(&candidate.tokens, n);
    let refs = ngram_counts(&reference.tokens, n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refs.values().sum();
    let overlap: usize = cand
        .iter()
        .map(|(gram, c)| (*c).min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(overlap, cand_total, ref_total)
}

/// Length of the longest common subsequence, O(|a|·|b|) time and O(|b|) space.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l(candidate: &TokenizedText, reference: &TokenizedText) -> RougeScore {
    let l = lcs_length(&candidate.tokens, &reference.tokens);
    RougeScore::from_counts(l, candidate.len(), reference.len())
}

/// Mean of the ROUGE-1, ROUGE-2 and ROUGE-L F1 scores.
pub fn reason_score(candidate_think: &str, reference_reason: &str) -> f64 {
    let cand = tokenize(candidate_think);
    let reference = tokenize(reference_reason);
    let r1 = rouge_n(&cand, &reference, 1).f1;
    let r2 = rouge_n(&cand, &reference, 2).f1;
    let rl = rouge_l(&cand, &reference).f1;
    (r1 + r2 + rl) / 3.0
}
