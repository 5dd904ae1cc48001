//! Local feature decoupling preprocessing.
//!
//! A region is split into two encoder inputs: a *texture* input (the masked
//! volume, cropped to the region's bounding box and resampled) and a *geometry*
//! input (the uncropped binary mask, resampled), so that appearance and
//! size/position reach the model through separate streams.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume::{
    load_mask, load_volume, normalize_intensity, save_mask, save_volume, Area, RegionMask,
    SampleRecord, Volume, DEFAULT_WINDOW,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    /// Inclusive lower corner.
    pub lo: [usize; 3],
    /// Exclusive upper corner.
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(Error::InvalidVolume(format!("empty box {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self { lo: [0; 3], hi: dims }
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    /// Voxels added on every face of the tight bounding box.
    pub margin: usize,
    pub texture_input_dims: [usize; 3],
    pub geometry_input_dims: [usize; 3],
    pub window: (f64, f64),
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            margin: 0,
            texture_input_dims: [32, 32, 16],
            geometry_input_dims: [32, 32, 16],
            window: DEFAULT_WINDOW,
        }
    }
}

impl RegionConfig {
    /// Full-resolution preset (256 x 256 x 64 inputs).
    pub fn paper_scale() -> Self {
        Self {
            texture_input_dims: [256, 256, 64],
            geometry_input_dims: [256, 256, 64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.texture_input_dims.contains(&0) || self.geometry_input_dims.contains(&0) {
            return Err(Error::Config("input dims must be >= 1".into()));
        }
        if !(self.window.0 < self.window.1) {
            return Err(Error::Config(format!("window {:?} must have lo < hi", self.window)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureInput {
    pub grid: Volume,
    pub source_box: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryInput {
    pub grid: RegionMask,
}

pub fn apply_mask(v: &Volume, m: &RegionMask) -> Result<Volume> {
    if v.dims() != m.dims() {
        return Err(Error::DimMismatch(format!(
            "volume {:?} vs mask {:?}",
            v.dims(),
            m.dims()
        )));
    }
    let mut out = v.clone();
    for (o, &k) in out.data_mut().iter_mut().zip(m.data()) {
        *o *= k as f32;
    }
    Ok(out)
}

/// Tightest box around the nonzero voxels of `m`, grown by `margin` and
/// clipped to the grid.
pub fn bounding_box(m: &RegionMask, margin: usize) -> Result<BoundingBox> {
    let dims = m.dims();
    let mut lo = dims;
    let mut hi = [0; 3];
    let mut any = false;
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                if m.get(x, y, z) != 0 {
                    any = true;
                    let p = [x, y, z];
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a] + 1);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyRegion {
            area: m.area().to_string(),
        });
    }
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margin);
        hi[a] = (hi[a] + margin).min(dims[a]);
    }
    Ok(BoundingBox { lo, hi })
}

pub fn crop(v: &Volume, b: &BoundingBox) -> Result<Volume> {
    let dims = v.dims();
    if (0..3).any(|a| b.lo[a] >= b.hi[a] || b.hi[a] > dims[a]) {
        return Err(Error::BoxOutOfRange {
            lo: b.lo,
            hi: b.hi,
            dims,
        });
    }
    let out_dims = b.dims();
    let out = Volume::from_fn(out_dims, |x, y, z| {
        v.get(x + b.lo[0], y + b.lo[1], z + b.lo[2])
    });
    Ok(out.with_spacing(v.spacing()))
}

/// Source coordinate of output index `i` (half-voxel-centre convention).
fn source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    let s = (i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    s.clamp(0.0, (in_len - 1) as f64)
}

fn nearest_index(i: usize, in_len: usize, out_len: usize) -> usize {
    let s = ((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    s.min(in_len - 1)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

pub fn resample(v: &Volume, target: [usize; 3], mode: Interpolation) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::InvalidVolume(format!("target dims {target:?} must be >= 1")));
    }
    let dims = v.dims();
    let spacing = v.spacing();
    let new_spacing = [
        spacing[0] * dims[0] as f64 / target[0] as f64,
        spacing[1] * dims[1] as f64 / target[1] as f64,
        spacing[2] * dims[2] as f64 / target[2] as f64,
    ];
    let out = match mode {
        Interpolation::Nearest => {
            let ix: Vec<usize> = (0..target[0]).map(|i| nearest_index(i, dims[0], target[0])).collect();
            let iy: Vec<usize> = (0..target[1]).map(|i| nearest_index(i, dims[1], target[1])).collect();
            let iz: Vec<usize> = (0..target[2]).map(|i| nearest_index(i, dims[2], target[2])).collect();
            Volume::from_fn(target, |x, y, z| v.get(ix[x], iy[y], iz[z]))
        }
        Interpolation::Trilinear => {
            let axis = |a: usize| -> Vec<(usize, usize, f64)> {
                (0..target[a])
                    .map(|i| {
                        let s = source_coord(i, dims[a], target[a]);
                        let i0 = s.floor() as usize;
                        let i1 = (i0 + 1).min(dims[a] - 1);
                        (i0, i1, s - i0 as f64)
                    })
                    .collect()
            };
            let (ax, ay, az) = (axis(0), axis(1), axis(2));
            Volume::from_fn(target, |x, y, z| {
                let (x0, x1, tx) = ax[x];
                let (y0, y1, ty) = ay[y];
                let (z0, z1, tz) = az[z];
                let g = |a, b, c| v.get(a, b, c) as f64;
                let c00 = lerp(g(x0, y0, z0), g(x0, y0, z1), tz);
                let c01 = lerp(g(x0, y1, z0), g(x0, y1, z1), tz);
                let c10 = lerp(g(x1, y0, z0), g(x1, y0, z1), tz);
                let c11 = lerp(g(x1, y1, z0), g(x1, y1, z1), tz);
                let c0 = lerp(c00, c01, ty);
                let c1 = lerp(c10, c11, ty);
                lerp(c0, c1, tx) as f32
            })
        }
    };
    Ok(out.with_spacing(new_spacing))
}

/// Nearest-neighbour resampling of a mask; the result stays binary.
pub fn resample_mask(m: &RegionMask, target: [usize; 3]) -> Result<RegionMask> {
    if target.contains(&0) {
        return Err(Error::InvalidVolume(format!("target dims {target:?} must be >= 1")));
    }
    let dims = m.dims();
    let ix: Vec<usize> = (0..target[0]).map(|i| nearest_index(i, dims[0], target[0])).collect();
    let iy: Vec<usize> = (0..target[1]).map(|i| nearest_index(i, dims[1], target[1])).collect();
    let iz: Vec<usize> = (0..target[2]).map(|i| nearest_index(i, dims[2], target[2])).collect();
    Ok(RegionMask::from_fn(target, m.area(), |x, y, z| {
        m.get(ix[x], iy[y], iz[z]) != 0
    }))
}

pub fn prepare_texture_input(v: &Volume, m: &RegionMask, cfg: &RegionConfig) -> Result<TextureInput> {
    let masked = apply_mask(v, m)?;
    let source_box = bounding_box(m, cfg.margin)?;
    let cropped = crop(&masked, &source_box)?;
    let resized = resample(&cropped, cfg.texture_input_dims, Interpolation::Trilinear)?;
    Ok(TextureInput {
        grid: normalize_intensity(&resized, cfg.window)?,
        source_box,
    })
}

pub fn prepare_geometry_input(m: &RegionMask, cfg: &RegionConfig) -> Result<GeometryInput> {
    Ok(GeometryInput {
        grid: resample_mask(m, cfg.geometry_input_dims)?,
    })
}

/// Whole volume at encoder resolution, used for the global feature.
pub fn prepare_global_input(v: &Volume, cfg: &RegionConfig) -> Result<Volume> {
    let resized = resample(v, cfg.texture_input_dims, Interpolation::Trilinear)?;
    normalize_intensity(&resized, cfg.window)
}

/// Masked but uncropped volume at encoder resolution; the single-stream
/// region input used when decoupling is switched off.
pub fn prepare_masked_input(v: &Volume, m: &RegionMask, cfg: &RegionConfig) -> Result<Volume> {
    let masked = apply_mask(v, m)?;
    let resized = resample(&masked, cfg.texture_input_dims, Interpolation::Trilinear)?;
    normalize_intensity(&resized, cfg.window)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRegion {
    pub area: Area,
    pub texture: TextureInput,
    pub geometry: GeometryInput,
    pub masked: Volume,
}

/// Everything the encoders need for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub sample_id: String,
    pub global: Volume,
    pub regions: Vec<PreparedRegion>,
}

impl PreparedSample {
    pub fn areas(&self) -> Vec<Area> {
        self.regions.iter().map(|r| r.area).collect()
    }
}

/// Prepares all regions of a sample. Regions with empty masks are dropped with
/// a warning; it is an error if none remain.
pub fn prepare_sample(
    sample_id: &str,
    volume: &Volume,
    masks: &[RegionMask],
    cfg: &RegionConfig,
) -> Result<PreparedSample> {
    let mut regions = Vec::with_capacity(masks.len());
    for m in masks {
        let texture = match prepare_texture_input(volume, m, cfg) {
            Ok(t) => t,
            Err(Error::EmptyRegion { area }) => {
                log::warn!("sample {sample_id}: empty mask for {area}; region dropped");
                continue;
            }
            Err(e) => return Err(e),
        };
        regions.push(PreparedRegion {
            area: m.area(),
            texture,
            geometry: prepare_geometry_input(m, cfg)?,
            masked: prepare_masked_input(volume, m, cfg)?,
        });
    }
    if regions.is_empty() {
        return Err(Error::EmptyRegion {
            area: format!("all regions of {sample_id}"),
        });
    }
    Ok(PreparedSample {
        sample_id: sample_id.to_string(),
        global: prepare_global_input(volume, cfg)?,
        regions,
    })
}

/// Hex SHA-256 over the region config, the volume and its masks.
pub fn content_key(cfg: &RegionConfig, volume: &Volume, masks: &[RegionMask]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    for d in volume.dims() {
        h.update((d as u64).to_le_bytes());
    }
    for s in volume.spacing() {
        h.update(s.to_le_bytes());
    }
    for v in volume.data() {
        h.update(v.to_le_bytes());
    }
    for m in masks {
        h.update(m.area().name().as_bytes());
        h.update(m.data());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    key: String,
    regions: Vec<CacheRegion>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRegion {
    area: Area,
    source_box: BoundingBox,
}

/// Per-sample directories of prepared inputs in the volume file format,
/// keyed by [`content_key`].
#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, sample_id: &str) -> PathBuf {
        self.root.join(sample_id)
    }

    /// Loads the cached sample if its key matches, else prepares and stores it.
    /// The boolean is true on a cache hit.
    pub fn get_or_prepare(
        &self,
        record: &SampleRecord,
        cfg: &RegionConfig,
    ) -> Result<(PreparedSample, bool)> {
        let volume = record.load_volume()?;
        let masks = record.load_regions()?;
        let key = content_key(cfg, &volume, &masks);
        if let Some(p) = self.load(&record.sample_id, &key)? {
            return Ok((p, true));
        }
        let prepared = prepare_sample(&record.sample_id, &volume, &masks, cfg)?;
        self.store(&prepared, &key)?;
        Ok((prepared, false))
    }

    pub fn load(&self, sample_id: &str, key: &str) -> Result<Option<PreparedSample>> {
        let dir = self.dir(sample_id);
        let meta_path = dir.join("meta.json");
        let Ok(text) = fs::read_to_string(&meta_path) else {
            return Ok(None);
        };
        let meta: CacheMeta = serde_json::from_str(&text)?;
        if meta.key != key {
            return Ok(None);
        }
        self.read_dir(sample_id, &meta).map(Some)
    }

    /// Loads whatever is cached for `sample_id` without checking the key.
    pub fn load_any(&self, sample_id: &str) -> Result<PreparedSample> {
        let meta_path = self.dir(sample_id).join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CacheMeta = serde_json::from_str(&text)?;
        self.read_dir(sample_id, &meta)
    }

    fn read_dir(&self, sample_id: &str, meta: &CacheMeta) -> Result<PreparedSample> {
        let dir = self.dir(sample_id);
        let mut regions = Vec::with_capacity(meta.regions.len());
        for r in &meta.regions {
            let slug = r.area.name().replace(' ', "-");
            regions.push(PreparedRegion {
                area: r.area,
                texture: TextureInput {
                    grid: load_volume(&dir.join(format!("{slug}.texture.raw")))?,
                    source_box: r.source_box,
                },
                geometry: GeometryInput {
                    grid: load_mask(&dir.join(format!("{slug}.geometry.raw")), r.area)?,
                },
                masked: load_volume(&dir.join(format!("{slug}.masked.raw")))?,
            });
        }
        Ok(PreparedSample {
            sample_id: sample_id.to_string(),
            global: load_volume(&dir.join("global.raw"))?,
            regions,
        })
    }

    pub fn store(&self, p: &PreparedSample, key: &str) -> Result<()> {
        let dir = self.dir(&p.sample_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_volume(&p.global, &dir.join("global.raw"))?;
        for r in &p.regions {
            let slug = r.area.name().replace(' ', "-");
            save_volume(&r.texture.grid, &dir.join(format!("{slug}.texture.raw")))?;
            save_mask(&r.geometry.grid, &dir.join(format!("{slug}.geometry.raw")))?;
            save_volume(&r.masked, &dir.join(format!("{slug}.masked.raw")))?;
        }
        let meta = CacheMeta {
            key: key.to_string(),
            regions: p
                .regions
                .iter()
                .map(|r| CacheRegion {
                    area: r.area,
                    source_box: r.texture.source_box,
                })
                .collect(),
        };
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }
}
