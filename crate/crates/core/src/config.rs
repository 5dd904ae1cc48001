//! Run configuration: one TOML document with a section per module.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, GenerationConfig, Strategy};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::MeteorConfig;
use crate::model::ModelConfig;
use crate::prompt::PromptTemplate;
use crate::region::RegionConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Use an existing manifest instead of the synthetic one in `run_dir/data`.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Present regions in a seeded random slot order instead of manifest order.
    pub shuffle_slots: bool,
}

impl Default for GenerateSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            strategy: g.strategy,
            max_new_tokens: g.max_new_tokens,
            seed: g.seed,
            shuffle_slots: false,
        }
    }
}

impl GenerateSection {
    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            strategy: self.strategy,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// The last `holdout` manifest records are excluded from training and
    /// used for generation; 0 generates on the training records.
    pub holdout: usize,
    pub meteor: MeteorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperScale,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-scale" => Ok(Preset::PaperScale),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub region: RegionConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub prompt: PromptTemplate,
    pub train: TrainConfig,
    pub generate: GenerateSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            seed: 0,
            run_dir: None,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            region: RegionConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            prompt: PromptTemplate::default(),
            train: TrainConfig::default(),
            generate: GenerateSection::default(),
            eval: EvalConfig::default(),
        };
        match p {
            Preset::Desk => base,
            Preset::PaperScale => Self {
                synth: SynthConfig {
                    dims: [256, 256, 64],
                    ..SynthConfig::default()
                },
                region: RegionConfig::paper_scale(),
                encoder: EncoderConfig::paper_scale(),
                decoder: DecoderConfig {
                    llm_dim: 4096,
                    layers: 32,
                    heads: 32,
                    max_sequence_length: 2048,
                    ..DecoderConfig::default()
                },
                ..base
            },
        }
    }

    /// Parses TOML on top of a preset; keys absent from the file keep the
    /// preset's values.
    pub fn from_toml(text: &str, preset: Preset) -> Result<Self> {
        let base = toml::Value::try_from(Self::preset(preset))
            .map_err(|e| Error::Config(format!("preset: {e}")))?;
        let overlay: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, overlay);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, preset).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.region.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        self.generate.generation().validate()?;
        if self.encoder.llm_dim != self.decoder.llm_dim {
            return Err(Error::Config(format!(
                "encoder.llm_dim {} != decoder.llm_dim {}",
                self.encoder.llm_dim, self.decoder.llm_dim
            )));
        }
        if self.region.texture_input_dims != self.encoder.input_dims {
            return Err(Error::Config(format!(
                "region.texture_input_dims {:?} != encoder.input_dims {:?}",
                self.region.texture_input_dims, self.encoder.input_dims
            )));
        }
        if self.region.geometry_input_dims != self.encoder.mask_input_dims {
            return Err(Error::Config(format!(
                "region.geometry_input_dims {:?} != encoder.mask_input_dims {:?}",
                self.region.geometry_input_dims, self.encoder.mask_input_dims
            )));
        }
        self.prompt.build(1)?;
        Ok(())
    }
}

fn merge(base: toml::Value, overlay: toml::Value) -> toml::Value {
    match (base, overlay) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}
