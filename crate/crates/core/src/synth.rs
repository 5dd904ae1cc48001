//! Deterministic synthetic phantoms: disjoint ellipsoidal "organs" with masks,
//! optional lesion blobs, and template region reports.
//!
//! Each area owns a fixed cell of a 5 x 2 partition of the `H x W` plane
//! (spanning all of `D`), so organs never overlap and their bounding boxes
//! are known analytically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    save_mask, save_volume, write_manifest_entries, AbnormalityVocab, Area, LabelVector,
    ManifestEntry, MaskEntry, RegionMask, Volume,
};

const CELL_GRID: [usize; 2] = [5, 2];
const BACKGROUND: f32 = -900.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub samples: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub regions_per_sample: usize,
    /// Injection probability for each (region, abnormality type) pair.
    pub p_abnormal: f64,
    pub abnormalities: AbnormalityVocab,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            dims: [32, 32, 16],
            spacing: [1.0, 1.0, 3.0],
            regions_per_sample: 3,
            p_abnormal: 0.05,
            abnormalities: AbnormalityVocab::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("synth samples must be >= 1".into()));
        }
        if self.regions_per_sample == 0 || self.regions_per_sample > Area::ALL.len() {
            return Err(Error::Synthesis(format!(
                "requested {} regions per sample, vocabulary has {}",
                self.regions_per_sample,
                Area::ALL.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.p_abnormal) {
            return Err(Error::Config(format!("p_abnormal {} outside [0,1]", self.p_abnormal)));
        }
        let [h, w, d] = self.dims;
        if h / CELL_GRID[0] < 3 || w / CELL_GRID[1] < 3 || d < 3 {
            return Err(Error::Synthesis(format!(
                "dims {:?} too small to place disjoint organs (need >= {}x{}x3)",
                self.dims,
                3 * CELL_GRID[0],
                3 * CELL_GRID[1]
            )));
        }
        Ok(())
    }
}

/// Ground-truth geometry of one synthetic organ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganTruth {
    pub area: Area,
    pub center: [usize; 3],
    pub radii: [f64; 3],
    /// Indices of injected abnormalities in the vocabulary.
    pub abnormalities: Vec<usize>,
}

impl OrganTruth {
    /// Inclusive-exclusive voxel bounds of the ellipsoid.
    pub fn bounds(&self) -> ([usize; 3], [usize; 3]) {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let r = self.radii[a].floor() as usize;
            lo[a] = self.center[a] - r;
            hi[a] = self.center[a] + r + 1;
        }
        (lo, hi)
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - self.center[a] as f64) / self.radii[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub sample_id: String,
    pub organs: Vec<OrganTruth>,
}

/// In-memory synthetic sample.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub sample_id: String,
    pub volume: Volume,
    pub masks: Vec<RegionMask>,
    pub reports: BTreeMap<Area, String>,
    pub labels: LabelVector,
    pub truth: SampleTruth,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub truth: Vec<SampleTruth>,
}

/// Sentence used for a region without findings.
pub fn normal_sentence(area: Area) -> String {
    format!("The {area} is normal.")
}

pub fn abnormal_sentence(abnormality: &str, area: Area) -> String {
    let mut chars = abnormality.chars();
    let cap: String = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    format!("{cap} is observed in the {area}.")
}

/// Region report body for the given injected abnormality indices.
pub fn region_body(area: Area, abnormalities: &[usize], vocab: &AbnormalityVocab) -> String {
    if abnormalities.is_empty() {
        normal_sentence(area)
    } else {
        abnormalities
            .iter()
            .map(|&k| abnormal_sentence(vocab.name(k), area))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn cell_bounds(area: Area, dims: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let idx = area.index();
    let (ci, cj) = (idx / CELL_GRID[1], idx % CELL_GRID[1]);
    let ch = dims[0] / CELL_GRID[0];
    let cw = dims[1] / CELL_GRID[1];
    ([ci * ch, cj * cw, 0], [(ci + 1) * ch, (cj + 1) * cw, dims[2]])
}

/// Smooth deterministic organ texture as a function of organ-local offsets.
pub fn organ_texture(area: Area, offset: [i64; 3], salt: u64) -> f32 {
    let base = -500.0 + 100.0 * area.index() as f64;
    let [x, y, z] = offset.map(|v| v as f64);
    let phase = (salt % 1000) as f64 * 0.001;
    let wave = 40.0 * ((0.9 * x + phase).sin() + (0.7 * y).cos() * (0.5 * z + phase).sin());
    (base + wave) as f32
}

fn lesion_intensity(k: usize) -> f32 {
    600.0 + 20.0 * k as f32
}

fn place_organ<R: Rng>(area: Area, dims: [usize; 3], rng: &mut R) -> OrganTruth {
    let (lo, hi) = cell_bounds(area, dims);
    let mut center = [0; 3];
    let mut radii = [0.0; 3];
    for a in 0..3 {
        let size = hi[a] - lo[a];
        let max_r = ((size - 1) / 2) as f64;
        let r = (max_r * rng.gen_range(0.6..=1.0)).max(1.0);
        let ri = r.floor() as usize;
        let cmin = lo[a] + ri;
        let cmax = hi[a] - 1 - ri;
        center[a] = if cmax > cmin { rng.gen_range(cmin..=cmax) } else { cmin };
        radii[a] = r;
    }
    OrganTruth {
        area,
        center,
        radii,
        abnormalities: Vec::new(),
    }
}

/// Generates one sample in memory.
pub fn synthesize_sample(cfg: &SynthConfig, sample_id: &str, rng: &mut ChaCha8Rng) -> SynthSample {
    let dims = cfg.dims;
    let mut areas: Vec<Area> = Area::ALL.to_vec();
    areas.shuffle(rng);
    areas.truncate(cfg.regions_per_sample);
    areas.sort();

    let salt: u64 = rng.gen();
    let mut volume = Volume::from_fn(dims, |x, y, z| {
        BACKGROUND + 20.0 * (((x * 7 + y * 13 + z * 3) % 5) as f32 - 2.0)
    })
    .with_spacing(cfg.spacing);
    let mut masks = Vec::with_capacity(areas.len());
    let mut organs = Vec::with_capacity(areas.len());
    let mut reports = BTreeMap::new();
    let mut labels = LabelVector::empty(cfg.abnormalities.len());

    for &area in &areas {
        let mut organ = place_organ(area, dims, rng);
        for k in 0..cfg.abnormalities.len() {
            if rng.gen_bool(cfg.p_abnormal) {
                organ.abnormalities.push(k);
                labels.set(k, true);
            }
        }
        let (lo, hi) = organ.bounds();
        let mut mask = RegionMask::empty(dims, area);
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    if organ.contains(x, y, z) {
                        mask.set(x, y, z, true);
                        let off = [
                            x as i64 - organ.center[0] as i64,
                            y as i64 - organ.center[1] as i64,
                            z as i64 - organ.center[2] as i64,
                        ];
                        volume.set(x, y, z, organ_texture(area, off, salt));
                    }
                }
            }
        }
        // Lesions: one small blob per abnormality, offset inside the organ.
        for (j, &k) in organ.abnormalities.iter().enumerate() {
            let angle = j as f64 * 2.399_963;
            let c = [
                organ.center[0] as f64 + 0.4 * organ.radii[0] * angle.cos(),
                organ.center[1] as f64 + 0.4 * organ.radii[1] * angle.sin(),
                organ.center[2] as f64,
            ];
            for x in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    for z in lo[2]..hi[2] {
                        let d2 = (x as f64 - c[0]).powi(2)
                            + (y as f64 - c[1]).powi(2)
                            + (z as f64 - c[2]).powi(2);
                        if d2 <= 1.0 && mask.get(x, y, z) == 1 {
                            volume.set(x, y, z, lesion_intensity(k));
                        }
                    }
                }
            }
        }
        reports.insert(area, region_body(area, &organ.abnormalities, &cfg.abnormalities));
        masks.push(mask);
        organs.push(organ);
    }

    SynthSample {
        sample_id: sample_id.to_string(),
        volume,
        masks,
        reports,
        labels,
        truth: SampleTruth {
            sample_id: sample_id.to_string(),
            organs,
        },
    }
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

fn area_slug(area: Area) -> String {
    area.name().replace(' ', "-")
}

/// Generates `cfg.samples` samples in memory; identical `(cfg, seed)` give
/// identical samples.
pub fn synthesize_samples(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..cfg.samples)
        .map(|i| synthesize_sample(cfg, &sample_id(i), &mut rng))
        .collect())
}

/// Writes the synthetic dataset under `out_dir`: `manifest.json`, `truth.json`,
/// `volumes/` and `masks/`.
pub fn synthesize_dataset(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    let samples = synthesize_samples(cfg, seed)?;
    for sub in ["volumes", "masks"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    let mut truth = Vec::with_capacity(samples.len());
    for s in samples {
        let vol_rel = format!("volumes/{}.raw", s.sample_id);
        save_volume(&s.volume, &out_dir.join(&vol_rel))?;
        let mut masks = Vec::new();
        for m in &s.masks {
            let rel = format!("masks/{}_{}.raw", s.sample_id, area_slug(m.area()));
            save_mask(m, &out_dir.join(&rel))?;
            masks.push(MaskEntry {
                area: m.area().name().to_string(),
                path: rel,
            });
        }
        entries.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            volume: vol_rel,
            masks,
            reports: s
                .reports
                .iter()
                .map(|(a, t)| (a.name().to_string(), t.clone()))
                .collect(),
            labels: s.labels.flags().to_vec(),
        });
        truth.push(s.truth);
    }
    let manifest = out_dir.join("manifest.json");
    write_manifest_entries(&manifest, &entries)?;
    let truth_path = out_dir.join("truth.json");
    let text = serde_json::to_string_pretty(&truth)?;
    fs::write(&truth_path, text).map_err(|e| Error::io(&truth_path, e))?;
    Ok(SynthOutput { manifest, truth })
}

/// A volume holding two copies of the same organ, the second translated by
/// `shift` whole voxels. Returns the volume and the masks of both copies.
pub fn translated_twins(
    dims: [usize; 3],
    area: Area,
    center: [usize; 3],
    radii: [f64; 3],
    shift: [usize; 3],
) -> Result<(Volume, RegionMask, RegionMask)> {
    let a = OrganTruth {
        area,
        center,
        radii,
        abnormalities: Vec::new(),
    };
    let b = OrganTruth {
        center: [center[0] + shift[0], center[1] + shift[1], center[2] + shift[2]],
        ..a.clone()
    };
    for o in [&a, &b] {
        for i in 0..3 {
            let r = o.radii[i].floor() as usize;
            if o.radii[i] < 1.0 || o.center[i] < r || o.center[i] + r + 1 > dims[i] {
                return Err(Error::Synthesis("twin organ does not fit in volume".into()));
            }
        }
    }
    let mut volume = Volume::filled(dims, BACKGROUND);
    let mut ma = RegionMask::empty(dims, area);
    let mut mb = RegionMask::empty(dims, area);
    for (organ, mask) in [(&a, &mut ma), (&b, &mut mb)] {
        let (lo, hi) = organ.bounds();
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    if organ.contains(x, y, z) {
                        if mask.get(x, y, z) == 0 && volume.get(x, y, z) != BACKGROUND {
                            return Err(Error::Synthesis("twin organs overlap".into()));
                        }
                        mask.set(x, y, z, true);
                        let off = [
                            x as i64 - organ.center[0] as i64,
                            y as i64 - organ.center[1] as i64,
                            z as i64 - organ.center[2] as i64,
                        ];
                        volume.set(x, y, z, organ_texture(area, off, 0));
                    }
                }
            }
        }
    }
    Ok((volume, ma, mb))
}
