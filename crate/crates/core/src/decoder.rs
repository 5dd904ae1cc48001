//! Causal transformer decoder over mixed embedding sequences.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, ParamStore};
use crate::tensor::Matrix;
use crate::tokenizer::{BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub llm_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_sequence_length: usize,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            llm_dim: 192,
            layers: 4,
            heads: 4,
            max_sequence_length: 1024,
            dropout: 0.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.llm_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("decoder sizes must be > 0".into()));
        }
        if self.llm_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "llm_dim {} not divisible by {} heads",
                self.llm_dim, self.heads
            )));
        }
        if self.max_sequence_length == 0 {
            return Err(Error::Config("max_sequence_length must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    Greedy,
    TopK { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_new_tokens: 256,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        if let Strategy::TopK { k: 0 } = self.strategy {
            return Err(Error::Config("top-k needs k >= 1".into()));
        }
        Ok(())
    }
}

/// Anything that can turn token ids into embedding rows on a tape.
pub trait TokenEmbedder {
    fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[u32]) -> Var;
    fn width(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    tok_emb: String,
    pos_emb: String,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

const POS_SCALE: f64 = 1.0;

/// Fixed-frequency sine/cosine table used to initialise the learned
/// positional embeddings.
pub fn sinusoidal(len: usize, dim: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for p in 0..len {
        for k in 0..dim {
            let freq = 10000f64.powf(-((k / 2 * 2) as f64) / dim as f64);
            let a = p as f64 * freq;
            m.data_mut()[p * dim + k] = scale * if k % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    m
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.llm_dim;
        let tok_emb = "dec.tok_emb".to_string();
        store.insert(tok_emb.clone(), Matrix::uniform(cfg.vocab_size, d, 0.1, rng));
        let pos_emb = "dec.pos_emb".to_string();
        store.insert(pos_emb.clone(), sinusoidal(cfg.max_sequence_length, d, POS_SCALE));
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, rng, &format!("dec.block{i}"), d, cfg.heads))
            .collect();
        let ln_f = LayerNorm::new(store, "dec.ln_f", d);
        let head = Linear::with_bound(store, rng, "dec.head", d, cfg.vocab_size, false, 0.02);
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    /// Logits for every input row.
    pub fn logits<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let (len, width) = tape.shape(inputs);
        if len > self.cfg.max_sequence_length {
            return Err(Error::SequenceTooLong {
                len,
                max: self.cfg.max_sequence_length,
            });
        }
        if width != self.cfg.llm_dim {
            return Err(Error::Shape(format!(
                "decoder width {} vs input width {width}",
                self.cfg.llm_dim
            )));
        }
        let table = tape.param(store, &self.pos_emb);
        let pos = tape.slice_rows(table, 0, len);
        let mut x = tape.add(inputs, pos);
        for b in &self.blocks {
            x = b.forward(tape, store, x, true, self.cfg.dropout, rng);
        }
        let x = self.ln_f.forward(tape, store, x);
        Ok(self.head.forward(tape, store, x))
    }

    /// Teacher-forced pass. `targets[t]` is the id predicted at row `t`; only
    /// rows with `loss_mask[t]` contribute to the mean negative log-likelihood.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: Var,
        targets: &[u32],
        loss_mask: &[bool],
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let len = tape.shape(inputs).0;
        if targets.len() != len || loss_mask.len() != len {
            return Err(Error::Shape(format!(
                "sequence length {len}, targets {}, mask {}",
                targets.len(),
                loss_mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Shape(format!("target id {bad} outside vocabulary")));
        }
        let logits = self.logits(tape, store, inputs, rng)?;
        let loss = tape.cross_entropy(logits, targets, loss_mask);
        Ok((logits, loss))
    }

    /// Autoregressive continuation of `prompt` (already substituted embeddings,
    /// without BOS). Returns the new ids; a terminating EOS is included.
    pub fn generate(
        &self,
        store: &ParamStore,
        prompt: &Matrix,
        gcfg: &GenerationConfig,
    ) -> Result<Vec<u32>> {
        gcfg.validate()?;
        if prompt.rows() + 1 > self.cfg.max_sequence_length {
            return Err(Error::SequenceTooLong {
                len: prompt.rows() + 1,
                max: self.cfg.max_sequence_length,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
        let mut ids: Vec<u32> = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..gcfg.max_new_tokens {
            if prompt.rows() + ids.len() > self.cfg.max_sequence_length {
                break;
            }
            let mut tape = Tape::new(false);
            let p = tape.constant(prompt.clone());
            let t = self.embed(&mut tape, store, &ids);
            let x = tape.concat_rows(&[p, t]);
            let logits = self.logits(&mut tape, store, x, &mut rng)?;
            let lv = tape.value(logits);
            let last = lv.row(lv.rows() - 1);
            let next = match gcfg.strategy {
                Strategy::Greedy => argmax(last),
                Strategy::TopK { k } => sample_top_k(last, k, &mut rng),
            };
            out.push(next);
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(out)
    }

    pub fn head_weight(&self) -> &str {
        &self.head.weight
    }
}

impl TokenEmbedder for Decoder {
    fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[u32]) -> Var {
        let table = tape.param(store, &self.tok_emb);
        tape.gather(table, ids)
    }

    fn width(&self) -> usize {
        self.cfg.llm_dim
    }
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_top_k<R: Rng + ?Sized>(row: &[f64], k: usize, rng: &mut R) -> u32 {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.max(1));
    let max = row[idx[0]];
    let weights: Vec<f64> = idx.iter().map(|&i| (row[i] - max).exp()).collect();
    let dist = WeightedIndex::new(&weights).expect("positive weights");
    idx[dist.sample(rng)] as u32
}
