//! The assembled model: encoders, decoder, tokenizer and prompt template.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::decoder::{Decoder, DecoderConfig, GenerationConfig, TokenEmbedder};
use crate::encoders::{build_local_feature, EncoderConfig, Encoders, FeatureFlags, GlobalFeature, LocalFeature};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::prompt::{
    parse_generated, serialize_target, substitute_embeddings, EmbeddingSequence, PromptTemplate,
    RegionAssignment, StructuredReport,
};
use crate::region::PreparedSample;
use crate::tokenizer::{Tokenizer, BOS, EOS, PAD};
use crate::volume::Area;

/// Ablation switches. All on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_geometry: bool,
    pub use_global: bool,
    pub use_rra: bool,
    pub use_lfd: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_geometry: true,
            use_global: true,
            use_rra: true,
            use_lfd: true,
        }
    }
}

impl AblationFlags {
    /// Turns one switch off by name (`geometry`, `global`, `rra`, `lfd`).
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name.trim().to_ascii_lowercase().as_str() {
            "geometry" => self.use_geometry = false,
            "global" => self.use_global = false,
            "rra" => self.use_rra = false,
            "lfd" => self.use_lfd = false,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }

    fn feature_flags(&self) -> FeatureFlags {
        FeatureFlags {
            texture: true,
            geometry: self.use_geometry && self.use_lfd,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.llm_dim != self.decoder.llm_dim {
            return Err(Error::Config(format!(
                "encoder llm_dim {} differs from decoder llm_dim {}",
                self.encoder.llm_dim, self.decoder.llm_dim
            )));
        }
        Ok(())
    }
}

/// Teacher-forcing inputs for one sample.
#[derive(Debug, Clone)]
pub struct Example {
    pub inputs: Var,
    pub prompt: EmbeddingSequence,
    pub target_ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub slot_areas: Vec<Area>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub ids: Vec<u32>,
    pub text: String,
    pub slot_areas: Vec<Area>,
    pub report: StructuredReport,
}

#[derive(Debug, Clone)]
pub struct Reg2Rg {
    pub cfg: ModelConfig,
    pub encoders: Encoders,
    pub decoder: Decoder,
    pub tokenizer: Tokenizer,
    pub prompt: PromptTemplate,
}

impl Reg2Rg {
    /// Builds the model and a freshly initialised parameter store. The
    /// decoder vocabulary size is taken from the tokenizer.
    pub fn new(
        mut cfg: ModelConfig,
        tokenizer: Tokenizer,
        prompt: PromptTemplate,
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        cfg.decoder.vocab_size = tokenizer.len();
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoders = Encoders::new(&mut store, &mut rng, &cfg.encoder)?;
        let decoder = Decoder::new(&mut store, &mut rng, &cfg.decoder)?;
        Ok((
            Self {
                cfg,
                encoders,
                decoder,
                tokenizer,
                prompt,
            },
            store,
        ))
    }

    /// SHA-256 over the model config and the tokenizer vocabulary.
    pub fn config_hash(&self) -> String {
        config_hash(&self.cfg, &self.tokenizer)
    }

    pub fn local_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &PreparedSample,
        flags: AblationFlags,
    ) -> Result<Vec<LocalFeature>> {
        let ff = flags.feature_flags();
        sample
            .regions
            .iter()
            .map(|r| {
                if flags.use_lfd {
                    let t = self.encoders.texture_feature(tape, store, &r.texture)?;
                    let g = if ff.geometry {
                        Some(self.encoders.encode_mask(tape, store, &r.geometry)?)
                    } else {
                        None
                    };
                    build_local_feature(tape, t, g, r.area, ff)
                } else {
                    let t = self.encoders.encode_volume(tape, store, &r.masked)?;
                    let rows = self.encoders.adapt(tape, store, &t)?;
                    Ok(LocalFeature {
                        rows,
                        n_rows: tape.shape(rows).0,
                        area: r.area,
                    })
                }
            })
            .collect()
    }

    pub fn global_feature(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &PreparedSample,
        flags: AblationFlags,
    ) -> Result<Option<GlobalFeature>> {
        if flags.use_global {
            Ok(Some(self.encoders.encode_global(tape, store, &sample.global)?))
        } else {
            Ok(None)
        }
    }

    pub fn prompt_embeddings(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &PreparedSample,
        flags: AblationFlags,
        assignment: &RegionAssignment,
    ) -> Result<EmbeddingSequence> {
        let spec = self.prompt.build(sample.regions.len())?;
        let global = self.global_feature(tape, store, sample, flags)?;
        let locals = self.local_features(tape, store, sample, flags)?;
        substitute_embeddings(
            tape,
            store,
            &spec,
            global,
            &locals,
            assignment,
            &self.decoder,
            &self.tokenizer,
        )
    }

    /// Target ids for a slot order, terminated by EOS. Prefixes are written
    /// only when `flags.use_rra`.
    pub fn target_ids(
        &self,
        slot_areas: &[Area],
        reports: &BTreeMap<Area, String>,
        flags: AblationFlags,
    ) -> Result<Vec<u32>> {
        let mut ids = serialize_target(slot_areas, reports, &self.tokenizer, flags.use_rra)?;
        ids.push(EOS);
        Ok(ids)
    }

    /// Prompt rows, then BOS and the target shifted right; only target
    /// positions carry loss.
    pub fn example(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &PreparedSample,
        reports: &BTreeMap<Area, String>,
        flags: AblationFlags,
        assignment: &RegionAssignment,
    ) -> Result<Example> {
        let slot_areas = assignment.slot_areas(&sample.areas());
        let target_ids = self.target_ids(&slot_areas, reports, flags)?;
        let prompt = self.prompt_embeddings(tape, store, sample, flags, assignment)?;
        let mut shifted = Vec::with_capacity(target_ids.len());
        shifted.push(BOS);
        shifted.extend_from_slice(&target_ids[..target_ids.len() - 1]);
        let text = self.decoder.embed(tape, store, &shifted);
        let inputs = tape.concat_rows(&[prompt.rows, text]);
        let mut targets = vec![PAD; prompt.len];
        targets.extend_from_slice(&target_ids);
        let mut loss_mask = vec![false; prompt.len];
        loss_mask.resize(targets.len(), true);
        Ok(Example {
            inputs,
            prompt,
            target_ids,
            targets,
            loss_mask,
            slot_areas,
        })
    }

    /// Mean masked negative log-likelihood of one sample.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &PreparedSample,
        reports: &BTreeMap<Area, String>,
        flags: AblationFlags,
        assignment: &RegionAssignment,
        rng: &mut R,
    ) -> Result<(Var, Example)> {
        let ex = self.example(tape, store, sample, reports, flags, assignment)?;
        let (_, loss) = self
            .decoder
            .forward(tape, store, ex.inputs, &ex.targets, &ex.loss_mask, rng)?;
        Ok((loss, ex))
    }

    pub fn generate(
        &self,
        store: &ParamStore,
        sample: &PreparedSample,
        flags: AblationFlags,
        assignment: &RegionAssignment,
        gcfg: &GenerationConfig,
    ) -> Result<Generated> {
        let mut tape = Tape::new(false);
        let prompt = self.prompt_embeddings(&mut tape, store, sample, flags, assignment)?;
        let rows = tape.value(prompt.rows).clone();
        let ids = self.decoder.generate(store, &rows, gcfg)?;
        let text = self.tokenizer.decode(&ids);
        Ok(Generated {
            report: parse_generated(&text),
            slot_areas: assignment.slot_areas(&sample.areas()),
            text,
            ids,
        })
    }
}

pub fn config_hash(cfg: &ModelConfig, tokenizer: &Tokenizer) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    for t in tokenizer.tokens() {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    hex::encode(h.finalize())
}
