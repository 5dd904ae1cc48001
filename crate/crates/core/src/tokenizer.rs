//! Word-level tokenizer over a closed report lexicon with byte fallback.
//!
//! Text is split into pieces: a run of alphanumerics (optionally carrying one
//! leading space), or a single other character. Pieces found in the vocabulary
//! map to one id; anything else falls back to one id per UTF-8 byte, so every
//! string round-trips.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::{abnormal_sentence, normal_sentence};
use crate::volume::{AbnormalityVocab, Area};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Section separator; decodes to a newline.
pub const SEP: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];
const BYTE_BASE: u32 = SPECIALS.len() as u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Splits text into tokenizer pieces.
pub fn pieces(s: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = s.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        let mut j = i + 1;
        let leading_space = c == ' ' && chars.get(j).is_some_and(|&(_, n)| n.is_alphanumeric());
        if leading_space || c.is_alphanumeric() {
            while chars.get(j).is_some_and(|&(_, n)| n.is_alphanumeric()) {
                j += 1;
            }
        }
        let end = chars.get(j).map_or(s.len(), |&(k, _)| k);
        out.push(&s[start..end]);
        i = j;
    }
    out
}

impl Tokenizer {
    /// Vocabulary: specials, 256 byte tokens, then `lexicon` pieces (sorted).
    pub fn from_pieces<I, S>(lexicon: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..=255u8).map(|b| format!("<0x{b:02X}>")));
        let extra: BTreeSet<String> = lexicon
            .into_iter()
            .map(|s| s.as_ref().to_string())
            .filter(|s| !s.is_empty() && s != "\n")
            .collect();
        tokens.extend(extra);
        Self::from_tokens(tokens).expect("generated vocabulary is valid")
    }

    /// Tokenizer covering the report templates, prefixes and `extra_text`.
    pub fn for_reports(vocab: &AbnormalityVocab, extra_text: &[&str]) -> Self {
        let mut texts: Vec<String> = Vec::new();
        for area in Area::ALL {
            texts.push(normal_sentence(area));
            for name in vocab.names() {
                texts.push(abnormal_sentence(name, area));
                texts.push(format!("No {name} is observed in the {area}."));
            }
        }
        for i in 1..=Area::ALL.len() {
            for area in Area::ALL {
                texts.push(format!("The region [{i}] is {area}. "));
            }
        }
        texts.extend(extra_text.iter().map(|s| s.to_string()));
        // Sentences also occur after a space, so every word gets both forms.
        let lexicon: BTreeSet<String> = texts
            .iter()
            .flat_map(|t| [t.clone(), format!(" {t}")])
            .flat_map(|t| pieces(&t).into_iter().map(str::to_string).collect::<Vec<_>>())
            .collect();
        Self::from_pieces(lexicon)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < BYTE_BASE as usize + 256 {
            return Err(Error::Config("tokenizer vocabulary lacks byte tokens".into()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Config(format!("special token {i} must be {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn encode(&self, s: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for p in pieces(s) {
            if p == "\n" {
                ids.push(SEP);
            } else if let Some(&id) = self.index.get(p) {
                ids.push(id);
            } else {
                ids.extend(p.bytes().map(|b| BYTE_BASE + b as u32));
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                SEP => bytes.push(b'\n'),
                id if (BYTE_BASE..BYTE_BASE + 256).contains(&id) => {
                    bytes.push((id - BYTE_BASE) as u8)
                }
                id => {
                    if let Some(t) = self.tokens.get(id as usize) {
                        bytes.extend_from_slice(t.as_bytes());
                    }
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// `{token: id}` JSON object.
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, u32> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text)?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Config(format!("token id {id} out of range")))?;
            *slot = t;
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
