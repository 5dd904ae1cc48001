//! Region-report alignment training loop with AdamW, checkpointing and a
//! JSON-lines loss log.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::checkpoint::{fill_store, read_checkpoint, write_checkpoint, CheckpointMeta, RngState};
use crate::error::{Error, Result};
use crate::model::{AblationFlags, Reg2Rg};
use crate::nn::ParamStore;
use crate::prompt::{shuffle_regions, RegionAssignment};
use crate::region::{prepare_sample, PreparedSample, RegionConfig};
use crate::synth::SynthSample;
use crate::tensor::Matrix;
use crate::volume::Area;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            warmup_steps: 50,
            batch_size: 16,
            epochs: 10,
            max_steps: None,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("grad_clip must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// A prepared sample with its per-area report bodies.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sample: PreparedSample,
    pub reports: BTreeMap<Area, String>,
}

impl TrainSample {
    pub fn from_synth(s: &SynthSample, cfg: &RegionConfig) -> Result<Self> {
        let sample = prepare_sample(&s.sample_id, &s.volume, &s.masks, cfg)?;
        Ok(Self {
            sample,
            reports: s.reports.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    pub params: ParamStore,
    pub adam_m: ParamStore,
    pub adam_v: ParamStore,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ParamStore, seed: u64) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::default();
            for (n, m) in p.iter() {
                z.insert(n.clone(), Matrix::zeros(m.rows(), m.cols()));
            }
            z
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Self {
            step: 0,
            epoch: 0,
            adam_m: zeros(&params),
            adam_v: zeros(&params),
            params,
            rng,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub permutation_digest: String,
}

/// Where a run writes its outputs; both are optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub loss_log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct Trainer<'a> {
    pub model: &'a Reg2Rg,
    pub cfg: TrainConfig,
    pub samples: &'a [TrainSample],
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Reg2Rg, cfg: TrainConfig, samples: &'a [TrainSample]) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        Ok(Self { model, cfg, samples })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.samples.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.cfg.epochs as u64 * self.steps_per_epoch();
        self.cfg.max_steps.map_or(full, |m| full.min(m as u64))
    }

    /// Sample order of an epoch, a pure function of (seed, epoch).
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Sample indices of a step. A batch larger than the dataset wraps
    /// around the epoch order, each occurrence drawing its own shuffle.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let order = self.epoch_order(step / spe);
        let n = order.len();
        let bs = self.cfg.batch_size;
        if bs >= n {
            return (0..bs).map(|k| order[k % n]).collect();
        }
        let b = (step % spe) as usize * bs;
        order[b..(b + bs).min(n)].to_vec()
    }

    /// Draws per-sample region orders for a batch from the state rng.
    pub fn draw_assignments(&self, batch: &[usize], rng: &mut ChaCha8Rng) -> Vec<(RegionAssignment, u64)> {
        batch
            .iter()
            .map(|&i| {
                let regions = &self.samples[i].sample.regions;
                let a = if self.cfg.flags.use_rra {
                    shuffle_regions(regions, rng)
                } else {
                    RegionAssignment::identity(regions.len())
                };
                (a, rng.next_u64())
            })
            .collect()
    }

    /// One optimizer step.
    pub fn step(&self, state: &mut TrainState) -> Result<LossRecord> {
        let batch = self.batch(state.step);
        let draws = self.draw_assignments(&batch, &mut state.rng);
        let params = &state.params;
        let results: Vec<Result<(f64, BTreeMap<String, Matrix>)>> = batch
            .par_iter()
            .zip(draws.par_iter())
            .map(|(&i, (assignment, dseed))| {
                let s = &self.samples[i];
                let mut tape = Tape::new(true);
                let mut drng = ChaCha8Rng::seed_from_u64(*dseed);
                let (loss, _) = self.model.loss(
                    &mut tape,
                    params,
                    &s.sample,
                    &s.reports,
                    self.cfg.flags,
                    assignment,
                    &mut drng,
                )?;
                let value = tape.value(loss).data()[0];
                let grads = tape.backward(loss);
                Ok((value, tape.param_grads(&grads)))
            })
            .collect();
        let mut losses = Vec::with_capacity(batch.len());
        let mut total: BTreeMap<String, Matrix> = BTreeMap::new();
        for r in results {
            let (l, g) = r?;
            losses.push(l);
            for (name, m) in g {
                match total.get_mut(&name) {
                    Some(acc) => acc.add_assign(&m),
                    None => {
                        total.insert(name, m);
                    }
                }
            }
        }
        let ids: Vec<String> = batch
            .iter()
            .map(|&i| self.samples[i].sample.sample_id.clone())
            .collect();
        if losses.iter().any(|l| !l.is_finite()) || total.values().any(|g| !g.all_finite()) {
            log::error!("non-finite loss at step {}: samples {ids:?}, losses {losses:?}", state.step + 1);
            return Err(Error::NanLoss {
                step: state.step + 1,
                samples: ids,
            });
        }
        let n = batch.len() as f64;
        let loss = losses.iter().sum::<f64>() / n;
        let mut sq = 0.0;
        for g in total.values_mut() {
            g.scale_assign(1.0 / n);
            sq += g.sq_norm();
        }
        let norm = sq.sqrt();
        if norm > self.cfg.grad_clip {
            let s = self.cfg.grad_clip / norm;
            for g in total.values_mut() {
                g.scale_assign(s);
            }
        }
        let lr = self.cfg.lr_at(state.step);
        adamw(state, &total, lr, self.cfg.weight_decay);
        state.step += 1;
        state.epoch = state.step / self.steps_per_epoch();
        Ok(LossRecord {
            step: state.step,
            epoch: (state.step - 1) / self.steps_per_epoch(),
            loss,
            lr,
            permutation_digest: permutation_digest(&ids, &draws),
        })
    }

    /// Runs until `total_steps` (or `stop_at`, if smaller), appending to the
    /// loss log and writing per-epoch checkpoints.
    pub fn run(&self, state: &mut TrainState, out: &TrainOutputs, stop_at: Option<u64>) -> Result<Vec<LossRecord>> {
        let end = stop_at.map_or(self.total_steps(), |s| s.min(self.total_steps()));
        let mut log = match &out.loss_log {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(p)
                        .map_err(|e| Error::io(p, e))?,
                )
            }
            None => None,
        };
        let mut records = Vec::new();
        while state.step < end {
            let rec = match self.step(state) {
                Ok(r) => r,
                Err(e @ Error::NanLoss { .. }) => {
                    if let Some(p) = &out.loss_log {
                        let dump = p.with_file_name("nan_dump.json");
                        let body = serde_json::json!({"error": e.to_string(), "step": state.step + 1});
                        fs::write(&dump, body.to_string()).map_err(|e| Error::io(&dump, e))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let (Some(f), Some(p)) = (log.as_mut(), out.loss_log.as_ref()) {
                writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(p, e))?;
            }
            log::info!("step {} epoch {} loss {:.6} lr {:.3e}", rec.step, rec.epoch, rec.loss, rec.lr);
            if let Some(dir) = &out.checkpoint_dir {
                let epoch_end = state.step % self.steps_per_epoch() == 0;
                if epoch_end {
                    let p = dir.join(format!("epoch_{:04}.ckpt", state.step / self.steps_per_epoch()));
                    save_checkpoint(&p, self.model, state, self.cfg.flags)?;
                }
                if epoch_end || state.step == end {
                    save_checkpoint(&dir.join("last.ckpt"), self.model, state, self.cfg.flags)?;
                }
            }
            records.push(rec);
        }
        Ok(records)
    }
}

fn adamw(state: &mut TrainState, grads: &BTreeMap<String, Matrix>, lr: f64, wd: f64) {
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let names: Vec<String> = state.params.names().cloned().collect();
    for name in names {
        let p = state.params.get_mut(&name).expect("param");
        let m = state.adam_m.get_mut(&name).expect("moment");
        let v = state.adam_v.get_mut(&name).expect("moment");
        let g = grads.get(&name);
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            let mk = BETA1 * m.data()[k] + (1.0 - BETA1) * gk;
            let vk = BETA2 * v.data()[k] + (1.0 - BETA2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let update = (mk / c1) / ((vk / c2).sqrt() + ADAM_EPS);
            let pk = &mut p.data_mut()[k];
            *pk -= lr * (update + wd * *pk);
        }
    }
}

fn permutation_digest(ids: &[String], draws: &[(RegionAssignment, u64)]) -> String {
    let mut h = Sha256::new();
    for (id, (a, _)) in ids.iter().zip(draws) {
        h.update(id.as_bytes());
        h.update([0]);
        for &o in &a.order {
            h.update((o as u32).to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

pub fn save_checkpoint(path: &Path, model: &Reg2Rg, state: &TrainState, flags: AblationFlags) -> Result<()> {
    let meta = CheckpointMeta {
        step: state.step,
        epoch: state.epoch,
        rng: RngState::capture(&state.rng),
        model: model.cfg.clone(),
        tokenizer: model.tokenizer.tokens().to_vec(),
        flags,
        prompt: model.prompt.clone(),
    };
    let names: Vec<(String, String)> = ["param/", "adam_m/", "adam_v/"]
        .iter()
        .flat_map(|p| state.params.names().map(move |n| (p.to_string(), n.clone())))
        .collect();
    let tensors: Vec<(String, &Matrix)> = names
        .iter()
        .map(|(p, n)| {
            let src = match p.as_str() {
                "param/" => &state.params,
                "adam_m/" => &state.adam_m,
                _ => &state.adam_v,
            };
            (format!("{p}{n}"), src.get(n).expect("name from params"))
        })
        .collect();
    let refs: Vec<(&str, &Matrix)> = tensors.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    write_checkpoint(path, &model.config_hash(), serde_json::to_value(meta)?, &refs)
}

/// Restores a training state for `model`; the checkpoint must have been
/// written for an identical model config and vocabulary.
pub fn load_checkpoint(path: &Path, model: &Reg2Rg, template: &ParamStore) -> Result<(TrainState, CheckpointMeta)> {
    let (header, mut tensors) = read_checkpoint(path)?;
    if header.config_hash != model.config_hash() {
        return Err(Error::ConfigHashMismatch {
            checkpoint: header.config_hash,
            model: model.config_hash(),
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(header.meta)?;
    let mut params = template.clone();
    let mut adam_m = template.clone();
    let mut adam_v = template.clone();
    fill_store(&mut params, &mut tensors, "param/")?;
    fill_store(&mut adam_m, &mut tensors, "adam_m/")?;
    fill_store(&mut adam_v, &mut tensors, "adam_v/")?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    let state = TrainState {
        step: meta.step,
        epoch: meta.epoch,
        params,
        adam_m,
        adam_v,
        rng: meta.rng.restore()?,
    };
    Ok((state, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| c.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ParamStore::default();
        p.insert("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut s = TrainState::new(p, 0);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Matrix::from_vec(1, 2, vec![0.5, -2.0]));
        adamw(&mut s, &g, 0.1, 0.0);
        let w = s.params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }
}
