//! C ABI over the `reg2rg` library.
//!
//! Every function returns a [`Reg2rgStatus`]; on failure the message is
//! available from [`reg2rg_last_error`] on the same thread. Strings returned
//! through out-parameters are owned by the caller and released with
//! [`reg2rg_string_free`]. Handles are released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use reg2rg::checkpoint::load_model;
use reg2rg::decoder::{GenerationConfig, Strategy};
use reg2rg::eval::{bleu_n, meteor, rouge_l, Labeler, RuleLabeler};
use reg2rg::model::{AblationFlags, Reg2Rg};
use reg2rg::nn::ParamStore;
use reg2rg::prompt::{parse_generated, RegionAssignment};
use reg2rg::region::{prepare_sample, RegionConfig};
use reg2rg::volume::{load_manifest, load_volume, Volume};
use reg2rg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reg2rgStatus {
    Ok = 0,
    /// A null pointer, invalid UTF-8 or an out-of-range argument.
    InvalidArgument = 1,
    /// Input data or configuration was rejected.
    Validation = 2,
    /// A file could not be read or written.
    Io = 3,
    /// Any other failure during execution.
    Runtime = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(Reg2rgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if matches!(e, Error::Io { .. }) {
            Reg2rgStatus::Io
        } else if e.is_validation() {
            Reg2rgStatus::Validation
        } else {
            Reg2rgStatus::Runtime
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(Reg2rgStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Reg2rgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            Reg2rgStatus::Ok
        }
        Ok(Err(Failure(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("panic in reg2rg");
            Reg2rgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(&format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{name} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(&format!("{name} is null")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(Reg2rgStatus::Runtime, "string contains NUL".into()))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on this thread.
#[no_mangle]
pub extern "C" fn reg2rg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed only once.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// BLEU-`n` of `candidate` against `reference`, on a 0-100 scale.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_bleu(
    candidate: *const c_char,
    reference: *const c_char,
    n: usize,
    out: *mut f64,
) -> Reg2rgStatus {
    guard(|| {
        let c = str_arg(candidate, "candidate")?;
        let r = str_arg(reference, "reference")?;
        let out = out_arg(out, "out")?;
        if !(1..=4).contains(&n) {
            return Err(invalid("n must be in 1..=4"));
        }
        *out = bleu_n(c, r, n);
        Ok(())
    })
}

/// ROUGE-L F1 on a 0-100 scale.
///
/// # Safety
/// As for [`reg2rg_bleu`].
#[no_mangle]
pub unsafe extern "C" fn reg2rg_rouge_l(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> Reg2rgStatus {
    guard(|| {
        let c = str_arg(candidate, "candidate")?;
        let r = str_arg(reference, "reference")?;
        *out_arg(out, "out")? = rouge_l(c, r);
        Ok(())
    })
}

/// METEOR with the default synonym table, on a 0-100 scale.
///
/// # Safety
/// As for [`reg2rg_bleu`].
#[no_mangle]
pub unsafe extern "C" fn reg2rg_meteor(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> Reg2rgStatus {
    guard(|| {
        let c = str_arg(candidate, "candidate")?;
        let r = str_arg(reference, "reference")?;
        *out_arg(out, "out")? = meteor(c, r);
        Ok(())
    })
}

/// Parses generated text into a JSON object `{raw, sections}`.
///
/// # Safety
/// `text` must be a valid string; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_parse_report(text: *const c_char, out_json: *mut *mut c_char) -> Reg2rgStatus {
    guard(|| {
        let t = str_arg(text, "text")?;
        let out = out_arg(out_json, "out_json")?;
        *out = into_c_string(parse_generated(t).to_json()?)?;
        Ok(())
    })
}

/// Abnormality names the default rule labeler finds positive in `text`, as a
/// JSON array of strings.
///
/// # Safety
/// As for [`reg2rg_parse_report`].
#[no_mangle]
pub unsafe extern "C" fn reg2rg_extract_labels(text: *const c_char, out_json: *mut *mut c_char) -> Reg2rgStatus {
    guard(|| {
        let t = str_arg(text, "text")?;
        let out = out_arg(out_json, "out_json")?;
        let labeler = RuleLabeler::default();
        let labels = labeler.extract(t);
        let names: Vec<&str> = labeler
            .vocabulary()
            .names()
            .iter()
            .zip(labels.flags())
            .filter(|(_, &on)| on)
            .map(|(n, _)| n.as_str())
            .collect();
        let json = serde_json::to_string(&names).map_err(Error::from)?;
        *out = into_c_string(json)?;
        Ok(())
    })
}

/// Opaque volume handle.
pub struct Reg2rgVolume {
    volume: Volume,
}

/// Loads a raw volume with its JSON sidecar header.
///
/// # Safety
/// `path` must be a valid string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_volume_load(path: *const c_char, out: *mut *mut Reg2rgVolume) -> Reg2rgStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let volume = load_volume(Path::new(p))?;
        *out = Box::into_raw(Box::new(Reg2rgVolume { volume }));
        Ok(())
    })
}

/// Writes the volume's `[H, W, D]` into `dims`.
///
/// # Safety
/// `volume` must come from [`reg2rg_volume_load`]; `dims` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_volume_dims(volume: *const Reg2rgVolume, dims: *mut usize) -> Reg2rgStatus {
    guard(|| {
        let v = volume.as_ref().ok_or_else(|| invalid("volume is null"))?;
        if dims.is_null() {
            return Err(invalid("dims is null"));
        }
        let d = v.volume.dims();
        ptr::copy_nonoverlapping(d.as_ptr(), dims, 3);
        Ok(())
    })
}

/// Borrows the voxel data; valid while the handle lives.
///
/// # Safety
/// `volume` must come from [`reg2rg_volume_load`]; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_volume_data(
    volume: *const Reg2rgVolume,
    data: *mut *const f32,
    len: *mut usize,
) -> Reg2rgStatus {
    guard(|| {
        let v = volume.as_ref().ok_or_else(|| invalid("volume is null"))?;
        let d = out_arg(data, "data")?;
        let l = out_arg(len, "len")?;
        *d = v.volume.data().as_ptr();
        *l = v.volume.data().len();
        Ok(())
    })
}

/// # Safety
/// `volume` must be null or a handle from [`reg2rg_volume_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_volume_free(volume: *mut Reg2rgVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Opaque model handle: a model with its trained parameters.
pub struct Reg2rgModel {
    model: Reg2Rg,
    store: ParamStore,
    flags: AblationFlags,
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a valid string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_model_load(path: *const c_char, out: *mut *mut Reg2rgModel) -> Reg2rgStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let (model, store, meta) = load_model(Path::new(p))?;
        *out = Box::into_raw(Box::new(Reg2rgModel {
            model,
            store,
            flags: meta.flags,
        }));
        Ok(())
    })
}

/// The model's config hash as a hex string.
///
/// # Safety
/// `model` must come from [`reg2rg_model_load`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_model_config_hash(model: *const Reg2rgModel, out: *mut *mut c_char) -> Reg2rgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        *out_arg(out, "out")? = into_c_string(m.model.config_hash())?;
        Ok(())
    })
}

/// Greedily generates a report for record `sample_id` of the manifest at
/// `manifest_path`, with regions in manifest order. The result is the JSON
/// object `{raw, sections}`.
///
/// # Safety
/// `model` must come from [`reg2rg_model_load`]; strings must be valid;
/// `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_model_generate(
    model: *const Reg2rgModel,
    manifest_path: *const c_char,
    sample_id: *const c_char,
    max_new_tokens: usize,
    out_json: *mut *mut c_char,
) -> Reg2rgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        let manifest = str_arg(manifest_path, "manifest_path")?;
        let id = str_arg(sample_id, "sample_id")?;
        let out = out_arg(out_json, "out_json")?;
        let records = load_manifest(Path::new(manifest))?;
        let record = records
            .iter()
            .find(|r| r.sample_id == id)
            .ok_or_else(|| invalid(&format!("no record {id:?} in manifest")))?;
        let enc = &m.model.cfg.encoder;
        let rcfg = RegionConfig {
            texture_input_dims: enc.input_dims,
            geometry_input_dims: enc.mask_input_dims,
            ..RegionConfig::default()
        };
        let sample = prepare_sample(&record.sample_id, &record.load_volume()?, &record.load_regions()?, &rcfg)?;
        let gcfg = GenerationConfig {
            strategy: Strategy::Greedy,
            max_new_tokens,
            seed: 0,
        };
        gcfg.validate()?;
        let assignment = RegionAssignment::identity(sample.regions.len());
        let g = m.model.generate(&m.store, &sample, m.flags, &assignment, &gcfg)?;
        *out = into_c_string(g.report.to_json()?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`reg2rg_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn reg2rg_model_free(model: *mut Reg2rgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
