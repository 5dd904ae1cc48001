#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reg2rg::autograd::Tape;
use reg2rg::config::RunConfig;
use reg2rg::decoder::DecoderConfig;
use reg2rg::encoders::EncoderConfig;
use reg2rg::model::{AblationFlags, Reg2Rg};
use reg2rg::nn::ParamStore;
use reg2rg::prompt::RegionAssignment;
use reg2rg::region::RegionConfig;
use reg2rg::synth::{synthesize_samples, SynthConfig, SynthSample};
use reg2rg::tensor::Matrix;
use reg2rg::tokenizer::Tokenizer;
use reg2rg::trainer::{TrainConfig, TrainSample};

/// A model small enough for finite differences and quick training tests.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = SynthConfig {
        samples: 3,
        regions_per_sample: 2,
        p_abnormal: 0.2,
        ..SynthConfig::default()
    };
    cfg.region = RegionConfig {
        texture_input_dims: [8, 8, 4],
        geometry_input_dims: [8, 8, 4],
        ..RegionConfig::default()
    };
    cfg.encoder = EncoderConfig {
        input_dims: [8, 8, 4],
        patch_size: [4, 4, 2],
        model_dim: 8,
        num_layers: 1,
        num_heads: 2,
        adapter_latents: 32,
        llm_dim: 8,
        mask_input_dims: [8, 8, 4],
        mask_patch_size: [4, 4, 2],
        mask_dim: 8,
        mask_layers: 3,
        mask_heads: 2,
    };
    cfg.decoder = DecoderConfig {
        llm_dim: 8,
        layers: 2,
        heads: 2,
        max_sequence_length: 512,
        ..DecoderConfig::default()
    };
    cfg.train = TrainConfig {
        lr: 1e-3,
        warmup_steps: 2,
        batch_size: 2,
        epochs: 100,
        ..TrainConfig::default()
    };
    cfg.generate.max_new_tokens = 8;
    cfg.validate().unwrap();
    cfg
}

pub fn tokenizer_for(cfg: &RunConfig, samples: &[SynthSample]) -> Tokenizer {
    let mut extra: Vec<&str> = vec![cfg.prompt.instruction.as_str()];
    extra.extend(samples.iter().flat_map(|s| s.reports.values().map(String::as_str)));
    Tokenizer::for_reports(&cfg.synth.abnormalities, &extra)
}

pub struct Fixture {
    pub cfg: RunConfig,
    pub model: Reg2Rg,
    pub store: ParamStore,
    pub synth: Vec<SynthSample>,
    pub samples: Vec<TrainSample>,
}

pub fn fixture(cfg: RunConfig) -> Fixture {
    let synth = synthesize_samples(&cfg.synth, cfg.seed).unwrap();
    let samples = synth
        .iter()
        .map(|s| TrainSample::from_synth(s, &cfg.region).unwrap())
        .collect();
    let tok = tokenizer_for(&cfg, &synth);
    let (model, store) = Reg2Rg::new(cfg.model_config(), tok, cfg.prompt.clone(), cfg.seed).unwrap();
    Fixture {
        cfg,
        model,
        store,
        synth,
        samples,
    }
}

pub fn tiny_fixture() -> Fixture {
    fixture(tiny_config())
}

/// Masked LM loss of one sample under `store`, identity slot order.
pub fn sample_loss(f: &Fixture, store: &ParamStore, i: usize) -> f64 {
    let s = &f.samples[i];
    let mut tape = Tape::new(true);
    let a = RegionAssignment::identity(s.sample.regions.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, _) = f
        .model
        .loss(&mut tape, store, &s.sample, &s.reports, AblationFlags::default(), &a, &mut rng)
        .unwrap();
    tape.value(loss).data()[0]
}

pub fn sample_grads(f: &Fixture, store: &ParamStore, i: usize) -> BTreeMap<String, Matrix> {
    let s = &f.samples[i];
    let mut tape = Tape::new(true);
    let a = RegionAssignment::identity(s.sample.regions.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, _) = f
        .model
        .loss(&mut tape, store, &s.sample, &s.reports, AblationFlags::default(), &a, &mut rng)
        .unwrap();
    let g = tape.backward(loss);
    tape.param_grads(&g)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub directions: usize,
    pub max_rel_err: f64,
    pub min_abs_derivative: f64,
}

/// Fourth-order central differences of the full model loss along random unit
/// directions in the parameter subspace of names starting with `prefix`.
pub fn directional_grad_check(f: &Fixture, prefix: &str, directions: usize, seed: u64) -> GradCheck {
    let names: Vec<String> = f.store.names().filter(|n| n.starts_with(prefix)).cloned().collect();
    assert!(!names.is_empty(), "no parameters under {prefix}");
    let grads = sample_grads(f, &f.store, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-3;
    let mut max_rel: f64 = 0.0;
    let mut min_abs = f64::INFINITY;
    for _ in 0..directions {
        let mut dir: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut norm = 0.0;
        for n in &names {
            let len = f.store.get(n).unwrap().len();
            let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            norm += v.iter().map(|x| x * x).sum::<f64>();
            dir.insert(n, v);
        }
        let norm = norm.sqrt();
        let mut analytic = 0.0;
        for n in &names {
            if let Some(g) = grads.get(n) {
                analytic += g.data().iter().zip(&dir[n.as_str()]).map(|(g, u)| g * u / norm).sum::<f64>();
            }
        }
        let shifted = |t: f64| {
            let mut s = f.store.clone();
            for n in &names {
                for (x, u) in s.get_mut(n).unwrap().data_mut().iter_mut().zip(&dir[n.as_str()]) {
                    *x += t * u / norm;
                }
            }
            sample_loss(f, &s, 0)
        };
        let numeric = (8.0 * (shifted(h) - shifted(-h)) - (shifted(2.0 * h) - shifted(-2.0 * h))) / (12.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        min_abs = min_abs.min(scale);
        max_rel = max_rel.max((analytic - numeric).abs() / scale);
    }
    GradCheck {
        directions,
        max_rel_err: max_rel,
        min_abs_derivative: min_abs,
    }
}

/// The encoder and decoder parameter groups.
pub const BLOCKS: [(&str, &str); 5] = [
    ("volume encoder f_V", "fv."),
    ("adapter f_A", "fa."),
    ("mask encoder f_M", "fm."),
    ("mask projection f_P", "fp."),
    ("decoder", "dec."),
];
