//! C ABI over `orthofair`.
//!
//! Objects are opaque heap handles released with the matching `*_free`.
//! Every fallible call returns an [`OfStatus`]; on failure the message is
//! kept per thread and read with [`of_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use orthofair::cli::RunConfig;
use orthofair::data::Dataset;
use orthofair::eval::{evaluate, extract_embeddings, probe_seed, ProbeConfig};
use orthofair::model::{Checkpoint, Embedding, FairModel};
use orthofair::train::{resolve_model_config, train, TrainConfig};
use orthofair::Error;

/// Result codes; the nonzero values match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfStatus {
    Ok = 0,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Contract = 5,
    Io = 6,
    NullArgument = 10,
    InvalidUtf8 = 11,
    Panic = 12,
}

impl From<&Error> for OfStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            2 => OfStatus::Config,
            3 => OfStatus::Data,
            4 => OfStatus::Numeric,
            6 => OfStatus::Io,
            _ => OfStatus::Contract,
        }
    }
}

/// Which code `of_model_embed` returns.
pub const OF_EMBED_ZT_MEAN: u32 = 0;
pub const OF_EMBED_ZS_MEAN: u32 = 1;
pub const OF_EMBED_ZT_SAMPLE: u32 = 2;

/// Probe metrics of one model on the test split.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OfResult {
    pub target_accuracy: f64,
    pub sensitive_accuracy: f64,
    pub target_majority: f64,
    pub sensitive_majority: f64,
    pub predictor_accuracy: f64,
}

pub struct OfDataset(Dataset);

pub struct OfModel {
    model: FairModel,
    seed: u64,
    probe: ProbeConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, mapping errors and panics to a status and the last-error slot.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OfStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            OfStatus::from(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            OfStatus::NullArgument
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            OfStatus::InvalidUtf8
        }
        Err(_) => {
            set_error("internal panic".into());
            OfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn of_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn of_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the dataset described by a config file path or preset name.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn of_dataset_from_config(config: *const c_char, out: *mut *mut OfDataset) -> OfStatus {
    guard(|| {
        let cfg = RunConfig::resolve(str_arg(config, "config")?)?;
        put(out, OfDataset(cfg.data.load()?))
    })
}

/// Reads a dataset cache written by `orthofair preprocess`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn of_dataset_load_cache(path: *const c_char, out: *mut *mut OfDataset) -> OfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, OfDataset(Dataset::read_cache(Path::new(path))?))
    })
}

/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn of_dataset_rows(ds: *const OfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.rows())
}

/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn of_dataset_dim(ds: *const OfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.dim())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn of_dataset_free(ds: *mut OfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains with the model, train and probe settings of `config` (file path
/// or preset name); the dataset section of the config is ignored.
///
/// # Safety
/// `ds` must be a live dataset, `config` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn of_model_train(
    ds: *const OfDataset,
    config: *const c_char,
    seed: u64,
    out: *mut *mut OfModel,
) -> OfStatus {
    guard(|| {
        let data = &ref_arg(ds, "dataset")?.0;
        let cfg = RunConfig::resolve(str_arg(config, "config")?)?;
        let model_cfg = resolve_model_config(&cfg.model, data)?;
        let (model, _) = train(data, &model_cfg, &TrainConfig { seed, ..cfg.train })?;
        put(out, OfModel { model, seed, probe: cfg.probe })
    })
}

/// Loads a `checkpoint.json`; probes use default settings.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn of_model_load(path: *const c_char, out: *mut *mut OfModel) -> OfStatus {
    guard(|| {
        let ckpt = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        let model = FairModel::from_checkpoint(&ckpt)?;
        put(out, OfModel { model, seed: ckpt.seed, probe: ProbeConfig::default() })
    })
}

/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn of_model_save(model: *const OfModel, path: *const c_char) -> OfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        m.model.to_checkpoint(m.seed).save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Width of the target code, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn of_model_code_dim(model: *const OfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().code_dim)
}

/// Writes the `rows × cols` embedding of every dataset row into `buf`
/// (row-major). Call with `buf = null` to query the shape only.
///
/// # Safety
/// `buf` must be null or hold `capacity` doubles; `rows` and `cols` valid.
#[no_mangle]
pub unsafe extern "C" fn of_model_embed(
    model: *const OfModel,
    ds: *const OfDataset,
    which: u32,
    buf: *mut f64,
    capacity: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> OfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let data = &ref_arg(ds, "dataset")?.0;
        if rows.is_null() || cols.is_null() {
            return Err(Failure::Null("rows/cols"));
        }
        let which = match which {
            OF_EMBED_ZT_MEAN => Embedding::ZtMean,
            OF_EMBED_ZS_MEAN => Embedding::ZsMean,
            OF_EMBED_ZT_SAMPLE => Embedding::ZtSample,
            other => return Err(Error::Config(format!("unknown embedding kind {other}")).into()),
        };
        let emb = extract_embeddings(&m.model, data, which, probe_seed(m.seed))?;
        *rows = emb.rows();
        *cols = emb.cols();
        if buf.is_null() {
            return Ok(());
        }
        let values = emb.data();
        if capacity < values.len() {
            return Err(Error::Contract(format!("buffer holds {capacity} values, need {}", values.len())).into());
        }
        ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
        Ok(())
    })
}

/// Trains fresh target and sensitive probes on the frozen target code.
///
/// # Safety
/// `model` and `ds` must be live handles and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn of_model_evaluate(model: *const OfModel, ds: *const OfDataset, out: *mut OfResult) -> OfStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let data = &ref_arg(ds, "dataset")?.0;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let probe = ProbeConfig { seed: probe_seed(m.seed), ..m.probe.clone() };
        let r = evaluate(&m.model, data, &probe)?;
        *out = OfResult {
            target_accuracy: r.target_accuracy,
            sensitive_accuracy: r.sensitive_accuracy,
            target_majority: r.target_majority,
            sensitive_majority: r.sensitive_majority,
            predictor_accuracy: r.predictor_accuracy,
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn of_model_free(model: *mut OfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
