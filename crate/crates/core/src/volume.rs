//! Volume and mask data model, raw file I/O and the dataset manifest.
//!
//! A volume on disk is a raw little-endian payload plus a JSON sidecar header
//! at `<payload>.json`:
//!
//! ```json
//! {"dims":[H,W,D],"spacing":[sx,sy,sz],"dtype":"f32","order":"row-major, D fastest"}
//! ```
//!
//! Masks use the same layout with `"dtype":"u8"`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOXEL_ORDER: &str = "row-major, D fastest";

/// Anatomical areas a region mask can refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Area {
    Abdomen,
    Bones,
    Breasts,
    Esophagus,
    Heart,
    Lungs,
    TracheaAndBronchi,
    Mediastinum,
    Pleura,
    Thyroid,
}

impl Area {
    pub const ALL: [Area; 10] = [
        Area::Abdomen,
        Area::Bones,
        Area::Breasts,
        Area::Esophagus,
        Area::Heart,
        Area::Lungs,
        Area::TracheaAndBronchi,
        Area::Mediastinum,
        Area::Pleura,
        Area::Thyroid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Area::Abdomen => "abdomen",
            Area::Bones => "bones",
            Area::Breasts => "breasts",
            Area::Esophagus => "esophagus",
            Area::Heart => "heart",
            Area::Lungs => "lungs",
            Area::TracheaAndBronchi => "trachea and bronchi",
            Area::Mediastinum => "mediastinum",
            Area::Pleura => "pleura",
            Area::Thyroid => "thyroid",
        }
    }

    pub fn index(self) -> usize {
        Area::ALL.iter().position(|&a| a == self).unwrap()
    }

    /// Case-insensitive lookup; `-` and `_` are accepted in place of spaces.
    pub fn parse(s: &str) -> Option<Area> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| match c {
                '-' | '_' => ' ',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
        Area::ALL.iter().copied().find(|a| a.name() == norm)
    }
}

impl fmt::Display for Area {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Area {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Area::parse(s).ok_or_else(|| Error::UnknownArea {
            name: s.to_string(),
            record: String::new(),
        })
    }
}

impl Serialize for Area {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Area {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Area::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown area {s:?}")))
    }
}

/// Ordered list of abnormality names; a [`LabelVector`] is indexed by it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AbnormalityVocab(Vec<String>);

pub const DEFAULT_ABNORMALITIES: [&str; 18] = [
    "nodule",
    "mass",
    "effusion",
    "consolidation",
    "atelectasis",
    "emphysema",
    "calcification",
    "cardiomegaly",
    "fibrosis",
    "bronchiectasis",
    "opacity",
    "lymphadenopathy",
    "hernia",
    "thickening",
    "cyst",
    "fracture",
    "pneumothorax",
    "embolism",
];

impl Default for AbnormalityVocab {
    fn default() -> Self {
        Self(DEFAULT_ABNORMALITIES.iter().map(|s| s.to_string()).collect())
    }
}

impl AbnormalityVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("abnormality vocabulary is empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() || !seen.insert(n.to_lowercase()) {
                return Err(Error::Config(format!("bad abnormality name {n:?}")));
            }
        }
        Ok(Self(names))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn name(&self, i: usize) -> &str {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector {
    flags: Vec<bool>,
}

impl LabelVector {
    pub fn empty(size: usize) -> Self {
        Self {
            flags: vec![false; size],
        }
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.flags[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.flags[i] = v;
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count_positive(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn union_with(&mut self, other: &LabelVector) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.flags.iter_mut().zip(&other.flags) {
            *a |= b;
        }
    }
}

/// Dense scalar grid in `H x W x D`, stored row-major with `D` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        validate_dims(dims)?;
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!("spacing {spacing:?} must be positive")));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        validate_dims(dims).expect("invalid dims");
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![value; voxel_count(dims)],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut v = Self::zeros(dims);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let i = v.index(x, y, z);
                    v.data[i] = f(x, y, z);
                }
            }
        }
        v
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        assert!(spacing.iter().all(|&s| s > 0.0));
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }
}

/// Binary mask over the grid of its paired volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    dims: [usize; 3],
    area: Area,
    data: Vec<u8>,
}

impl RegionMask {
    pub fn new(dims: [usize; 3], area: Area, data: Vec<u8>) -> Result<Self> {
        validate_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::InvalidVolume(format!(
                "mask length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidVolume(format!("mask value {} at {i} not binary", data[i])));
        }
        Ok(Self { dims, area, data })
    }

    pub fn empty(dims: [usize; 3], area: Area) -> Self {
        validate_dims(dims).expect("invalid dims");
        Self {
            dims,
            area,
            data: vec![0; voxel_count(dims)],
        }
    }

    pub fn full(dims: [usize; 3], area: Area) -> Self {
        let mut m = Self::empty(dims, area);
        m.data.fill(1);
        m
    }

    pub fn from_fn(dims: [usize; 3], area: Area, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut m = Self::empty(dims, area);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let i = m.index(x, y, z);
                    m.data[i] = f(x, y, z) as u8;
                }
            }
        }
        m
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn area(&self) -> Area {
        self.area
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.index(x, y, z);
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Mask as a float volume (spacing 1).
    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: [1.0; 3],
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Masks of one sample, at most one per area.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSet {
    regions: Vec<RegionMask>,
}

impl RegionSet {
    pub fn new(regions: Vec<RegionMask>) -> Result<Self> {
        if regions.is_empty() || regions.len() > Area::ALL.len() {
            return Err(Error::InvalidVolume(format!(
                "region count {} outside 1..=10",
                regions.len()
            )));
        }
        let mut seen = HashSet::new();
        for r in &regions {
            if !seen.insert(r.area()) {
                return Err(Error::InvalidVolume(format!("duplicate area {}", r.area())));
            }
            if r.dims() != regions[0].dims() {
                return Err(Error::DimMismatch("masks in a set differ in dims".into()));
            }
        }
        Ok(Self { regions })
    }

    pub fn regions(&self) -> &[RegionMask] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn areas(&self) -> Vec<Area> {
        self.regions.iter().map(RegionMask::area).collect()
    }
}

fn validate_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidVolume(format!("dims {dims:?} must all be >= 1")));
    }
    Ok(())
}

pub fn voxel_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub order: String,
}

pub fn header_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_header(payload: &Path, header: &VolumeHeader) -> Result<()> {
    let path = header_path(payload);
    let text = serde_json::to_string(header)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_header(payload: &Path, dtype: &str) -> Result<VolumeHeader> {
    let path = header_path(payload);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != dtype {
        return Err(Error::MalformedHeader {
            path,
            reason: format!("dtype {:?}, expected {dtype:?}", header.dtype),
        });
    }
    if header.order != VOXEL_ORDER {
        return Err(Error::MalformedHeader {
            path,
            reason: format!("unsupported order {:?}", header.order),
        });
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::MalformedHeader {
            path,
            reason: format!("dims {:?}", header.dims),
        });
    }
    Ok(header)
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_header(
        path,
        &VolumeHeader {
            dims: v.dims,
            spacing: v.spacing,
            dtype: "f32".into(),
            order: VOXEL_ORDER.into(),
        },
    )
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path, "f32")?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = voxel_count(header.dims) * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            actual: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.dims, header.spacing, data).map_err(|e| match e {
        Error::InvalidVolume(reason) => Error::MalformedHeader {
            path: header_path(path),
            reason,
        },
        e => e,
    })
}

pub fn save_mask(m: &RegionMask, path: &Path) -> Result<()> {
    fs::write(path, &m.data).map_err(|e| Error::io(path, e))?;
    write_header(
        path,
        &VolumeHeader {
            dims: m.dims,
            spacing: [1.0; 3],
            dtype: "u8".into(),
            order: VOXEL_ORDER.into(),
        },
    )
}

pub fn load_mask(path: &Path, area: Area) -> Result<RegionMask> {
    let header = read_header(path, "u8")?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = voxel_count(header.dims);
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            actual: bytes.len(),
        });
    }
    RegionMask::new(header.dims, area, bytes)
}

/// Clip to `[lo, hi]` then map affinely onto `[0, 1]`.
pub fn normalize_intensity(v: &Volume, window: (f64, f64)) -> Result<Volume> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::Config(format!("intensity window lo {lo} must be < hi {hi}")));
    }
    let span = hi - lo;
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64).clamp(lo, hi) - lo) / span)
        .map(|x| x as f32)
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        data,
    })
}

pub const DEFAULT_WINDOW: (f64, f64) = (-1000.0, 1000.0);

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEntry {
    pub area: String,
    pub path: String,
}

/// One manifest record exactly as it appears on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub volume: String,
    pub masks: Vec<MaskEntry>,
    pub reports: BTreeMap<String, String>,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRef {
    pub area: Area,
    pub path: PathBuf,
}

/// Validated manifest record with resolved paths. Volumes are not read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub volume_path: PathBuf,
    pub masks: Vec<MaskRef>,
    pub region_reports: BTreeMap<Area, String>,
    pub abnormality_labels: LabelVector,
}

impl SampleRecord {
    pub fn areas(&self) -> Vec<Area> {
        self.masks.iter().map(|m| m.area).collect()
    }

    pub fn load_volume(&self) -> Result<Volume> {
        load_volume(&self.volume_path)
    }

    pub fn load_regions(&self) -> Result<Vec<RegionMask>> {
        self.masks.iter().map(|m| load_mask(&m.path, m.area)).collect()
    }
}

pub fn read_manifest_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

pub fn write_manifest_entries(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    load_manifest_with_vocab(path, DEFAULT_ABNORMALITIES.len())
}

/// Loads and validates a manifest whose label vectors have `label_count` entries.
pub fn load_manifest_with_vocab(path: &Path, label_count: usize) -> Result<Vec<SampleRecord>> {
    let entries = read_manifest_entries(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut ids = HashSet::new();
    let mut existing: HashSet<PathBuf> = HashSet::new();
    let mut check = |p: PathBuf, record: &str| -> Result<PathBuf> {
        if existing.contains(&p) || p.is_file() {
            existing.insert(p.clone());
            Ok(p)
        } else {
            Err(Error::Manifest(format!(
                "record {record}: file {} does not exist",
                p.display()
            )))
        }
    };
    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        if !ids.insert(e.sample_id.clone()) {
            return Err(Error::DuplicateSample(e.sample_id));
        }
        let mut reports = BTreeMap::new();
        for (name, body) in &e.reports {
            let area = Area::parse(name).ok_or_else(|| Error::UnknownArea {
                name: name.clone(),
                record: e.sample_id.clone(),
            })?;
            reports.insert(area, body.clone());
        }
        let mut masks = Vec::with_capacity(e.masks.len());
        let mut seen = HashSet::new();
        for m in &e.masks {
            let area = Area::parse(&m.area).ok_or_else(|| Error::UnknownArea {
                name: m.area.clone(),
                record: e.sample_id.clone(),
            })?;
            if !seen.insert(area) {
                return Err(Error::Manifest(format!(
                    "record {}: duplicate mask for {area}",
                    e.sample_id
                )));
            }
            if !reports.contains_key(&area) {
                return Err(Error::MissingReport {
                    record: e.sample_id.clone(),
                    area: area.to_string(),
                });
            }
            masks.push(MaskRef {
                area,
                path: check(base.join(&m.path), &e.sample_id)?,
            });
        }
        if masks.is_empty() || masks.len() > Area::ALL.len() {
            return Err(Error::Manifest(format!(
                "record {}: {} masks, expected 1..=10",
                e.sample_id,
                masks.len()
            )));
        }
        if e.labels.len() != label_count {
            return Err(Error::Manifest(format!(
                "record {}: {} labels, vocabulary has {label_count}",
                e.sample_id,
                e.labels.len()
            )));
        }
        records.push(SampleRecord {
            volume_path: check(base.join(&e.volume), &e.sample_id)?,
            sample_id: e.sample_id,
            masks,
            region_reports: reports,
            abnormality_labels: LabelVector::from_flags(e.labels),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_parse_accepts_variants() {
        assert_eq!(Area::parse("Trachea-and-Bronchi"), Some(Area::TracheaAndBronchi));
        assert_eq!(Area::parse(" LUNGS "), Some(Area::Lungs));
        assert_eq!(Area::parse("kidney"), None);
        for a in Area::ALL {
            assert_eq!(Area::parse(a.name()), Some(a));
        }
    }

    #[test]
    fn zero_volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        let v = Volume::zeros([4, 4, 4]).with_spacing([0.5, 1.0, 3.0]);
        save_volume(&v, &p).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn payload_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        save_volume(&Volume::zeros([4, 4, 4]), &p).unwrap();
        fs::write(&p, vec![0u8; 100 * 4]).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(err.to_string().contains("payload-length mismatch"), "{err}");
    }

    #[test]
    fn malformed_header_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        save_volume(&Volume::zeros([2, 2, 2]), &p).unwrap();
        fs::write(header_path(&p), "{\"dims\":[2,2]}").unwrap();
        assert!(matches!(load_volume(&p), Err(Error::MalformedHeader { .. })));

        save_volume(&Volume::zeros([2, 2, 2]), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn mask_round_trip_and_binary_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.raw");
        let m = RegionMask::from_fn([3, 4, 5], Area::Heart, |x, y, z| (x + y + z) % 2 == 0);
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p, Area::Heart).unwrap(), m);
        assert!(RegionMask::new([1, 1, 2], Area::Heart, vec![0, 2]).is_err());
    }

    #[test]
    fn normalize_window_edges() {
        let (lo, hi) = (-1000.0, 1000.0);
        let v = Volume::filled([2, 2, 2], lo as f32);
        assert!(normalize_intensity(&v, (lo, hi)).unwrap().data().iter().all(|&x| x == 0.0));
        let v = Volume::filled([2, 2, 2], hi as f32);
        assert!(normalize_intensity(&v, (lo, hi)).unwrap().data().iter().all(|&x| x == 1.0));
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![lo as f32, 0.0, hi as f32]).unwrap();
        assert_eq!(normalize_intensity(&v, (lo, hi)).unwrap().data(), &[0.0, 0.5, 1.0]);
        let v = Volume::new([1, 1, 2], [1.0; 3], vec![-5000.0, 5000.0]).unwrap();
        assert_eq!(normalize_intensity(&v, (lo, hi)).unwrap().data(), &[0.0, 1.0]);
        assert!(normalize_intensity(&v, (1.0, 1.0)).is_err());
        assert!(normalize_intensity(&v, (2.0, 1.0)).is_err());
    }

    #[test]
    fn region_set_invariants() {
        let a = RegionMask::full([2, 2, 2], Area::Heart);
        let b = RegionMask::full([2, 2, 2], Area::Heart);
        assert!(RegionSet::new(vec![a.clone(), b]).is_err());
        assert!(RegionSet::new(vec![]).is_err());
        assert!(RegionSet::new(vec![a.clone(), RegionMask::full([2, 2, 3], Area::Lungs)]).is_err());
        assert_eq!(RegionSet::new(vec![a]).unwrap().len(), 1);
    }

    #[test]
    fn label_vocab_validation() {
        assert_eq!(AbnormalityVocab::default().len(), 18);
        assert!(AbnormalityVocab::new(vec![]).is_err());
        assert!(AbnormalityVocab::new(vec!["a".into(), "A".into()]).is_err());
    }
}
