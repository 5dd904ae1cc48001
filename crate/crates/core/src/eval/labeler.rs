//! Abnormality label extraction.

use crate::volume::{AbnormalityVocab, LabelVector};

use super::text::{stem, tokenize};

pub const NEGATION_WINDOW: usize = 4;

/// Text to label vector over a fixed vocabulary.
pub trait Labeler: Send + Sync {
    fn vocabulary(&self) -> &AbnormalityVocab;
    fn extract(&self, text: &str) -> LabelVector;
}

/// Keyword matcher with a preceding-token negation window. Keywords are the
/// vocabulary names, compared after stemming.
#[derive(Debug, Clone)]
pub struct RuleLabeler {
    vocab: AbnormalityVocab,
    keywords: Vec<Vec<String>>,
}

impl RuleLabeler {
    pub fn new(vocab: AbnormalityVocab) -> Self {
        let keywords = vocab
            .names()
            .iter()
            .map(|n| tokenize(n).iter().map(|t| stem(t)).collect())
            .collect();
        Self { vocab, keywords }
    }
}

impl Default for RuleLabeler {
    fn default() -> Self {
        Self::new(AbnormalityVocab::default())
    }
}

fn negated(tokens: &[String], at: usize) -> bool {
    let lo = at.saturating_sub(NEGATION_WINDOW);
    let window = &tokens[lo..at];
    window.iter().any(|t| t == "no" || t == "not" || t == "without")
        || window.windows(2).any(|w| w[0] == "negative" && w[1] == "for")
}

impl Labeler for RuleLabeler {
    fn vocabulary(&self) -> &AbnormalityVocab {
        &self.vocab
    }

    fn extract(&self, text: &str) -> LabelVector {
        let mut out = LabelVector::empty(self.vocab.len());
        for sentence in text.split(['.', '!', '?', ';', '\n']) {
            let tokens = tokenize(sentence);
            let stems: Vec<String> = tokens.iter().map(|t| stem(t)).collect();
            for (i, kw) in self.keywords.iter().enumerate() {
                if kw.is_empty() || out.get(i) {
                    continue;
                }
                let hit = stems
                    .windows(kw.len())
                    .enumerate()
                    .any(|(p, w)| w == kw.as_slice() && !negated(&tokens, p));
                if hit {
                    out.set(i, true);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(l: &RuleLabeler, name: &str) -> usize {
        l.vocabulary().names().iter().position(|n| n == name).unwrap()
    }

    #[test]
    fn mentions_and_negation() {
        let l = RuleLabeler::default();
        let n = idx(&l, "nodule");
        assert!(l.extract("Nodule is observed in the lungs.").get(n));
        assert!(!l.extract("No nodule is observed.").get(n));
        assert!(!l.extract("Negative for nodule.").get(n));
        assert!(l.extract("No effusion. Nodules are seen.").get(n));
        assert!(l.extract("no a b c d nodule").get(n));
        assert!(!l.extract("no a b c nodule").get(n));
        assert_eq!(l.extract("").count_positive(), 0);
    }

    #[test]
    fn case_and_whitespace_invariant() {
        let l = RuleLabeler::default();
        let t = "Mass is observed in the heart. No effusion.";
        assert_eq!(l.extract(t), l.extract(&format!("  {}  ", t.to_uppercase())));
    }
}
