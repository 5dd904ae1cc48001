//! Run-directory orchestration behind the CLI: synth, preprocess, train,
//! generate, evaluate and plot, each recorded in a stage manifest so that a
//! rerun with unchanged inputs is skipped.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::load_model;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOutput, EvalPair, LengthDistribution, RuleLabeler};
use crate::model::{config_hash, Reg2Rg};
use crate::prompt::{shuffle_regions, RegionAssignment, ReportSection, StructuredReport};
use crate::region::FeatureCache;
use crate::synth::synthesize_dataset;
use crate::tokenizer::Tokenizer;
use crate::trainer::{load_checkpoint, TrainOutputs, TrainSample, TrainState, Trainer};
use crate::volume::{load_manifest_with_vocab, Area, SampleRecord};

pub const STAGE_FILE: &str = "stage.json";

/// Fixed layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn generated(&self) -> PathBuf {
        self.root.join("generated")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn create_all(&self) -> Result<()> {
        for d in [
            self.data(),
            self.features(),
            self.checkpoints(),
            self.generated(),
            self.eval(),
            self.plots(),
        ] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }
}

/// Exclusive hold on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run: &RunDir) -> Result<Self> {
        fs::create_dir_all(run.root()).map_err(|e| Error::io(run.root(), e))?;
        let path = run.root().join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub input_hash: String,
    /// Output files relative to the run directory.
    pub outputs: Vec<String>,
    pub output_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub status: StageStatus,
    pub manifest: StageManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    sample_id: String,
    cache_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub sample_id: String,
    pub slot_areas: Vec<Area>,
    pub raw: String,
    pub sections: Vec<ReportSection>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_files(root: &Path, rel: &[String]) -> Result<String> {
    let mut h = Sha256::new();
    for r in rel {
        let p = root.join(r);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update((r.len() as u64).to_le_bytes());
        h.update(r.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, out)?;
        } else if p.file_name().and_then(|n| n.to_str()) != Some(STAGE_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Orchestrates one run directory under a fixed configuration.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub run: RunDir,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, run_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let run = RunDir::new(run_dir);
        run.create_all()?;
        Ok(Self { cfg, run })
    }

    fn stage_path(dir: &Path) -> PathBuf {
        dir.join(STAGE_FILE)
    }

    pub fn read_stage(&self, dir: &Path) -> Result<Option<StageManifest>> {
        let p = Self::stage_path(dir);
        match fs::read_to_string(&p) {
            Ok(t) => Ok(Some(serde_json::from_str(&t)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&p, e)),
        }
    }

    fn upstream_hash(&self, dir: &Path, stage: &str) -> Result<String> {
        self.read_stage(dir)?
            .map(|m| m.output_hash)
            .ok_or_else(|| Error::MissingArtifact(format!("{stage} has not run in {}", self.run.root().display())))
    }

    fn is_fresh(&self, m: &StageManifest, input_hash: &str) -> bool {
        m.input_hash == input_hash
            && m.outputs.iter().all(|o| self.run.root().join(o).is_file())
            && hash_files(self.run.root(), &m.outputs).is_ok_and(|h| h == m.output_hash)
    }

    /// Runs `body` unless `dir/stage.json` records the same input hash and
    /// all recorded outputs are intact. `body` returns its output files.
    fn run_stage(
        &self,
        stage: &str,
        dir: &Path,
        input_hash: String,
        force: bool,
        body: impl FnOnce() -> Result<Vec<PathBuf>>,
    ) -> Result<StageReport> {
        if !force {
            if let Some(m) = self.read_stage(dir)? {
                if self.is_fresh(&m, &input_hash) {
                    log::info!("{stage}: inputs unchanged, skipping");
                    return Ok(StageReport {
                        stage: stage.into(),
                        status: StageStatus::Skipped,
                        manifest: m,
                    });
                }
            }
        }
        let _ = fs::remove_file(Self::stage_path(dir));
        let files = body()?;
        let mut outputs: Vec<String> = files
            .iter()
            .map(|p| {
                p.strip_prefix(self.run.root())
                    .map(|r| r.to_string_lossy().replace('\\', "/"))
                    .map_err(|_| Error::Config(format!("output {} outside run dir", p.display())))
            })
            .collect::<Result<_>>()?;
        outputs.sort();
        outputs.dedup();
        let manifest = StageManifest {
            stage: stage.into(),
            output_hash: hash_files(self.run.root(), &outputs)?,
            input_hash,
            outputs,
        };
        write_file(&Self::stage_path(dir), serde_json::to_string_pretty(&manifest)?)?;
        log::info!("{stage}: done");
        Ok(StageReport {
            stage: stage.into(),
            status: StageStatus::Ran,
            manifest,
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.cfg
            .data
            .manifest
            .clone()
            .unwrap_or_else(|| self.run.data().join("manifest.json"))
    }

    pub fn records(&self) -> Result<Vec<SampleRecord>> {
        load_manifest_with_vocab(&self.manifest_path(), self.cfg.synth.abnormalities.len())
    }

    /// Records used for training and those used for generation.
    pub fn split(&self) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
        let records = self.records()?;
        let h = self.cfg.eval.holdout;
        if h == 0 {
            return Ok((records.clone(), records));
        }
        if h >= records.len() {
            return Err(Error::Config(format!(
                "holdout {h} leaves no training records out of {}",
                records.len()
            )));
        }
        let cut = records.len() - h;
        let test = records[cut..].to_vec();
        let mut train = records;
        train.truncate(cut);
        Ok((train, test))
    }

    pub fn synth(&self, force: bool) -> Result<StageReport> {
        let input = sha_hex(&serde_json::to_vec(&(&self.cfg.synth, self.cfg.seed))?);
        let dir = self.run.data();
        self.run_stage("synth", &dir, input, force, || {
            let out = synthesize_dataset(&self.cfg.synth, self.cfg.seed, &dir)?;
            let mut files = Vec::new();
            files_under(&dir, &mut files)?;
            debug_assert!(files.contains(&out.manifest));
            Ok(files)
        })
    }

    fn manifest_input_hash(&self) -> Result<String> {
        let path = self.manifest_path();
        let records = self.records()?;
        let mut h = Sha256::new();
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(&text);
        for r in &records {
            for p in std::iter::once(&r.volume_path).chain(r.masks.iter().map(|m| &m.path)) {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                h.update(Sha256::digest(&bytes));
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn preprocess(&self, force: bool) -> Result<StageReport> {
        let mut h = Sha256::new();
        h.update(self.manifest_input_hash()?);
        h.update(serde_json::to_vec(&self.cfg.region)?);
        let input = hex::encode(h.finalize());
        let dir = self.run.features();
        self.run_stage("preprocess", &dir, input, force, || {
            let records = self.records()?;
            let cache = FeatureCache::new(dir.join("cache"));
            let hits: Vec<bool> = records
                .par_iter()
                .map(|r| cache.get_or_prepare(r, &self.cfg.region).map(|(_, hit)| hit))
                .collect::<Result<_>>()?;
            log::info!(
                "preprocess: {} samples, {} cache hits",
                records.len(),
                hits.iter().filter(|&&h| h).count()
            );
            let index: Vec<IndexEntry> = records
                .iter()
                .map(|r| IndexEntry {
                    sample_id: r.sample_id.clone(),
                    cache_dir: format!("cache/{}", r.sample_id),
                })
                .collect();
            write_file(&dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
            let mut files = Vec::new();
            files_under(&dir, &mut files)?;
            Ok(files)
        })
    }

    fn train_samples(&self, records: &[SampleRecord]) -> Result<Vec<TrainSample>> {
        let cache = FeatureCache::new(self.run.features().join("cache"));
        records
            .par_iter()
            .map(|r| {
                Ok(TrainSample {
                    sample: cache.load_any(&r.sample_id)?,
                    reports: r.region_reports.clone(),
                })
            })
            .collect()
    }

    /// Tokenizer covering the report templates, the instruction and every
    /// report body in the manifest.
    pub fn tokenizer(&self, records: &[SampleRecord]) -> Tokenizer {
        let mut extra: Vec<&str> = vec![self.cfg.prompt.instruction.as_str()];
        extra.extend(records.iter().flat_map(|r| r.region_reports.values().map(String::as_str)));
        Tokenizer::for_reports(&self.cfg.synth.abnormalities, &extra)
    }

    /// Trains from scratch, or from `checkpoints/last.ckpt` when `resume`.
    pub fn train(&self, force: bool, resume: bool) -> Result<StageReport> {
        let upstream = self.upstream_hash(&self.run.features(), "preprocess")?;
        let tcfg = self.cfg.train_config();
        let input = sha_hex(&serde_json::to_vec(&(
            &upstream,
            self.cfg.model_config(),
            &self.cfg.prompt,
            &tcfg,
            self.cfg.eval.holdout,
        ))?);
        let dir = self.run.checkpoints();
        self.run_stage("train", &dir, input, force || resume, || {
            let (train_records, _) = self.split()?;
            let tokenizer = self.tokenizer(&self.records()?);
            let (model, store) = Reg2Rg::new(self.cfg.model_config(), tokenizer, self.cfg.prompt.clone(), self.cfg.seed)?;
            let samples = self.train_samples(&train_records)?;
            let trainer = Trainer::new(&model, tcfg.clone(), &samples)?;
            let log_path = dir.join("loss_log.jsonl");
            let last = dir.join("last.ckpt");
            let mut state = if resume && last.is_file() {
                let (state, _) = load_checkpoint(&last, &model, &store)?;
                log::info!("train: resuming at step {}", state.step);
                state
            } else {
                for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                    let p = entry.map_err(|e| Error::io(&dir, e))?.path();
                    if p.extension().is_some_and(|x| x == "ckpt") {
                        fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                    }
                }
                write_file(&log_path, "")?;
                TrainState::new(store, tcfg.seed)
            };
            model.tokenizer.save(&dir.join("tokenizer.json"))?;
            let out = TrainOutputs {
                loss_log: Some(log_path),
                checkpoint_dir: Some(dir.clone()),
            };
            trainer.run(&mut state, &out, None)?;
            if !last.is_file() {
                crate::trainer::save_checkpoint(&last, &model, &state, tcfg.flags)?;
            }
            let mut files = Vec::new();
            files_under(&dir, &mut files)?;
            Ok(files)
        })
    }

    fn assignment(&self, sample_id: &str, n: usize) -> RegionAssignment {
        if self.cfg.generate.shuffle_slots {
            let mut h = Sha256::new();
            h.update(self.cfg.generate.seed.to_le_bytes());
            h.update(sample_id.as_bytes());
            let digest = h.finalize();
            let mut seed = [0u8; 32];
            seed.copy_from_slice(&digest);
            let items: Vec<usize> = (0..n).collect();
            shuffle_regions(&items, &mut ChaCha8Rng::from_seed(seed))
        } else {
            RegionAssignment::identity(n)
        }
    }

    /// Generates reports for the evaluation records with `checkpoint`, or
    /// `checkpoints/last.ckpt`.
    pub fn generate(&self, checkpoint: Option<&Path>, force: bool) -> Result<StageReport> {
        let ckpt = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.run.checkpoints().join("last.ckpt"));
        if !ckpt.is_file() {
            return Err(Error::MissingArtifact(format!("checkpoint {}", ckpt.display())));
        }
        let (model, store, meta) = load_model(&ckpt)?;
        let mut expected = self.cfg.model_config();
        expected.decoder.vocab_size = model.tokenizer.len();
        let current = config_hash(&expected, &model.tokenizer);
        if current != model.config_hash() {
            return Err(Error::ConfigHashMismatch {
                checkpoint: model.config_hash(),
                model: current,
            });
        }
        if meta.flags != self.cfg.train.flags {
            log::warn!("generate: using the checkpoint's ablation flags {:?}", meta.flags);
        }
        let ckpt_bytes = fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let input = sha_hex(&serde_json::to_vec(&(
            sha_hex(&ckpt_bytes),
            self.upstream_hash(&self.run.features(), "preprocess")?,
            &self.cfg.generate,
            self.cfg.eval.holdout,
        ))?);
        let dir = self.run.generated();
        self.run_stage("generate", &dir, input, force, || {
            let (_, records) = self.split()?;
            let samples = self.train_samples(&records)?;
            let gcfg = self.cfg.generate.generation();
            let out: Vec<GeneratedRecord> = samples
                .par_iter()
                .map(|s| {
                    let a = self.assignment(&s.sample.sample_id, s.sample.regions.len());
                    let g = model.generate(&store, &s.sample, meta.flags, &a, &gcfg)?;
                    Ok(GeneratedRecord {
                        sample_id: s.sample.sample_id.clone(),
                        slot_areas: g.slot_areas,
                        raw: g.report.raw,
                        sections: g.report.sections,
                    })
                })
                .collect::<Result<_>>()?;
            let path = dir.join("reports.jsonl");
            let mut text = String::new();
            for r in &out {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            write_file(&path, text)?;
            Ok(vec![path])
        })
    }

    pub fn read_generated(&self) -> Result<Vec<GeneratedRecord>> {
        let path = self.run.generated().join("reports.jsonl");
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    pub fn evaluate(&self, force: bool) -> Result<StageReport> {
        let upstream = self.upstream_hash(&self.run.generated(), "generate")?;
        let input = sha_hex(&serde_json::to_vec(&(
            &upstream,
            self.manifest_input_hash()?,
            &self.cfg.eval.meteor,
            self.cfg.synth.abnormalities.names(),
        ))?);
        let dir = self.run.eval();
        self.run_stage("evaluate", &dir, input, force, || {
            let generated = self.read_generated()?;
            let records: BTreeMap<String, SampleRecord> = self
                .records()?
                .into_iter()
                .map(|r| (r.sample_id.clone(), r))
                .collect();
            let pairs = generated
                .into_iter()
                .map(|g| {
                    let rec = records
                        .get(&g.sample_id)
                        .ok_or_else(|| Error::Manifest(format!("generated sample {} not in manifest", g.sample_id)))?;
                    let reference = g
                        .slot_areas
                        .iter()
                        .map(|a| {
                            rec.region_reports.get(a).cloned().ok_or_else(|| Error::MissingReport {
                                record: g.sample_id.clone(),
                                area: a.name().into(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                        .join(" ");
                    Ok(EvalPair {
                        sample_id: g.sample_id,
                        generated: StructuredReport {
                            raw: g.raw,
                            sections: g.sections,
                        },
                        reference,
                        slot_areas: g.slot_areas,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let labeler = RuleLabeler::new(self.cfg.synth.abnormalities.clone());
            let out = evaluate(&pairs, &labeler, &self.cfg.eval.meteor)?;
            write_eval(&dir, &out)
        })
    }

    pub fn plot(&self, force: bool) -> Result<StageReport> {
        let upstream = self.upstream_hash(&self.run.eval(), "evaluate")?;
        let dir = self.run.plots();
        self.run_stage("plot", &dir, upstream, force, || {
            let src = self.run.eval().join("lengths.tsv");
            let text = fs::read_to_string(&src).map_err(|e| Error::io(&src, e))?;
            let dist = LengthDistribution::from_tsv(&text)?;
            let tsv = dir.join("length_distribution.tsv");
            let svg = dir.join("length_distribution.svg");
            write_file(&tsv, dist.to_tsv())?;
            write_file(&svg, length_svg(&dist))?;
            Ok(vec![tsv, svg])
        })
    }

    /// Every stage in order; later stages skip themselves when fresh.
    pub fn all(&self, force: bool) -> Result<Vec<StageReport>> {
        let mut out = Vec::new();
        if self.cfg.data.manifest.is_none() {
            out.push(self.synth(force)?);
        }
        out.push(self.preprocess(force)?);
        out.push(self.train(force, false)?);
        out.push(self.generate(None, force)?);
        out.push(self.evaluate(force)?);
        out.push(self.plot(force)?);
        Ok(out)
    }
}

fn write_eval(dir: &Path, out: &EvalOutput) -> Result<Vec<PathBuf>> {
    let metrics = dir.join("metrics.json");
    write_file(&metrics, serde_json::to_string_pretty(&out.report)?)?;
    let per_sample = dir.join("per_sample.tsv");
    let mut t = String::from("sample_id\tbleu1\tbleu2\tbleu3\tbleu4\tmeteor\trouge_l\n");
    for s in &out.per_sample {
        t.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            s.sample_id, s.bleu[0], s.bleu[1], s.bleu[2], s.bleu[3], s.meteor, s.rouge_l
        ));
    }
    write_file(&per_sample, t)?;
    let lengths = dir.join("lengths.tsv");
    write_file(&lengths, out.lengths.to_tsv())?;
    Ok(vec![metrics, per_sample, lengths])
}

/// Grouped bar chart of the two length histograms.
pub fn length_svg(d: &LengthDistribution) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let n = d.bins.len().max(1) as f64;
    let top = d
        .bins
        .iter()
        .flat_map(|b| [b.p_gen, b.p_gt])
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let slot = (w - 2.0 * pad) / n;
    let bar = slot * 0.4;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        y0 = h - pad,
        x1 = w - pad
    );
    for (i, b) in d.bins.iter().enumerate() {
        let x = pad + i as f64 * slot + slot * 0.1;
        for (k, (p, color)) in [(b.p_gen, "#d95f02"), (b.p_gt, "#1b9e77")].iter().enumerate() {
            let bh = p / top * (h - 2.0 * pad);
            s.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\"/>\n",
                x + k as f64 * bar,
                h - pad - bh,
                bar,
                bh
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            x + bar,
            h - pad + 14.0,
            b.lo
        ));
    }
    s.push_str(&format!(
        "<text x=\"{pad}\" y=\"20\" font-size=\"12\">report length (tokens): generated (orange) vs reference (green), KL = {:.4}</text>\n</svg>\n",
        d.kl
    ));
    s
}
