//! Sentence-level BLEU, ROUGE-L and METEOR, all on a 0-100 scale.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::text::{stem, tokenize};

/// Precision used in place of an empty or zero k-gram precision.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts(tokens: &[String], k: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= k {
        for w in tokens.windows(k) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped k-gram matches and the number of candidate k-grams.
pub fn clipped_matches(cand: &[String], reference: &[String], k: usize) -> (usize, usize) {
    let c = ngram_counts(cand, k);
    let r = ngram_counts(reference, k);
    let matched = c
        .iter()
        .map(|(g, &n)| n.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(k - 1))
}

pub fn bleu_tokens(cand: &[String], reference: &[String], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order {n} outside 1..=4");
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, total) = clipped_matches(cand, reference, k);
        let p = if m == 0 || total == 0 {
            BLEU_EPSILON
        } else {
            m as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = cand.len() as f64;
    let r = reference.len() as f64;
    let bp = (1.0 - r / c).exp().min(1.0);
    100.0 * bp * (log_sum / n as f64).exp()
}

pub fn bleu_n(candidate: &str, reference: &str, n: usize) -> f64 {
    bleu_tokens(&tokenize(candidate), &tokenize(reference), n)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    100.0 * 2.0 * p * r / (p + r)
}

pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeteorConfig {
    /// Groups of interchangeable words.
    pub synonyms: Vec<Vec<String>>,
}

impl Default for MeteorConfig {
    fn default() -> Self {
        let groups: [&[&str]; 5] = [
            &["normal", "unremarkable"],
            &["observed", "seen", "noted"],
            &["lung", "pulmonary"],
            &["heart", "cardiac"],
            &["mass", "lesion"],
        ];
        Self {
            synonyms: groups
                .iter()
                .map(|g| g.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }
}

impl MeteorConfig {
    fn synonym_class(&self, w: &str) -> Option<usize> {
        let s = stem(w);
        self.synonyms
            .iter()
            .position(|g| g.iter().any(|x| x == w || stem(x) == s))
    }
}

/// Matched (candidate index, reference index) pairs, exact then stem then
/// synonym; each stage pairs words left to right.
pub fn meteor_alignment(cand: &[String], reference: &[String], cfg: &MeteorConfig) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; cand.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let stages: [&dyn Fn(&str, &str) -> bool; 3] = [
        &|a, b| a == b,
        &|a, b| stem(a) == stem(b),
        &|a, b| match (cfg.synonym_class(a), cfg.synonym_class(b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        },
    ];
    for matches in stages {
        for (i, c) in cand.iter().enumerate() {
            if used_c[i] {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !used_r[j] && matches(c, &reference[j])) {
                used_c[i] = true;
                used_r[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

pub fn meteor_tokens(cand: &[String], reference: &[String], cfg: &MeteorConfig) -> f64 {
    let pairs = meteor_alignment(cand, reference, cfg);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    100.0 * fmean * (1.0 - penalty)
}

pub fn meteor(candidate: &str, reference: &str) -> f64 {
    meteor_tokens(&tokenize(candidate), &tokenize(reference), &MeteorConfig::default())
}
