//! C ABI over `ncdlab`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns an
//! [`NcdStatus`]; on failure the message is available through
//! [`ncd_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ncdlab::data::{generate, load_dataset, save_dataset, Dataset, SyntheticSpec};
use ncdlab::metrics::{task_agnostic_eval, train_novel_acc};
use ncdlab::model::{load_checkpoint, save_checkpoint, ModelParams};
use ncdlab::trainer::{discover, pretrain};
use ncdlab::{Error, RunConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Shape = 6,
    Numeric = 7,
    Diverged = 8,
    Checkpoint = 9,
    Panic = 10,
}

pub struct NcdConfig(RunConfig);
pub struct NcdDataset(Dataset);
pub struct NcdModel(ModelParams);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NcdEvalReport {
    pub known_acc: f64,
    pub novel_cluster_acc: f64,
    pub all_acc: f64,
    pub n_known: usize,
    pub n_novel: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> NcdStatus {
    match err {
        Error::ShapeMismatch { .. } | Error::LabelOutOfRange { .. } => NcdStatus::Shape,
        Error::Domain { .. } | Error::NonFinite { .. } | Error::NonScalarLoss(_) => NcdStatus::Numeric,
        Error::InvalidArgument(_) | Error::Empty(_) | Error::InfeasibleSpec(_) => NcdStatus::InvalidArgument,
        Error::Parse { .. } | Error::Json(_) => NcdStatus::Parse,
        Error::Config(_) => NcdStatus::Config,
        Error::Checkpoint(_) => NcdStatus::Checkpoint,
        Error::Diverged { .. } => NcdStatus::Diverged,
        Error::File { .. } | Error::Io(_) => NcdStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NcdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            NcdStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            NcdStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            NcdStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            NcdStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns the full message length in
/// bytes, excluding the terminator. `buf` may be null to query the length.
#[no_mangle]
pub unsafe extern "C" fn ncd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// A config holding the defaults.
#[no_mangle]
pub extern "C" fn ncd_config_new() -> *mut NcdConfig {
    Box::into_raw(Box::new(NcdConfig(RunConfig::default())))
}

#[no_mangle]
pub unsafe extern "C" fn ncd_config_free(cfg: *mut NcdConfig) {
    free(cfg);
}

/// Sets one `key=value` config entry, e.g. `("beta", "0.2")`.
#[no_mangle]
pub unsafe extern "C" fn ncd_config_set(cfg: *mut NcdConfig, key: *const c_char, value: *const c_char) -> NcdStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or(Failure::Null("config"))?;
        let (key, value) = (text(key, "key")?, text(value, "value")?);
        let mut next = cfg.0.clone();
        next.set(key, value)?;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Parses a whole `key=value` config text on top of the defaults.
#[no_mangle]
pub unsafe extern "C" fn ncd_config_parse(text_in: *const c_char, out: *mut *mut NcdConfig) -> NcdStatus {
    guard(|| {
        let cfg = RunConfig::from_kv_text(text(text_in, "text")?)?;
        put(out, NcdConfig(cfg))
    })
}

/// Writes the 16 hex digit config hash plus a NUL into `buf`, which must
/// hold at least 17 bytes.
#[no_mangle]
pub unsafe extern "C" fn ncd_config_hash(cfg: *const NcdConfig, buf: *mut c_char, len: usize) -> NcdStatus {
    guard(|| {
        let cfg = borrow(cfg, "config")?;
        if buf.is_null() {
            return Err(Failure::Null("buffer"));
        }
        let hash = cfg.0.hash();
        if len <= hash.len() {
            return Err(Error::InvalidArgument(format!("buffer of {len} bytes is too small")).into());
        }
        ptr::copy_nonoverlapping(hash.as_ptr().cast::<c_char>(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// Generates a synthetic dataset from `key=value` spec text; null or empty
/// text selects the default spec.
#[no_mangle]
pub unsafe extern "C" fn ncd_dataset_generate(spec_text: *const c_char, out: *mut *mut NcdDataset) -> NcdStatus {
    guard(|| {
        let spec = if spec_text.is_null() {
            SyntheticSpec::default()
        } else {
            SyntheticSpec::from_kv_text(text(spec_text, "spec text")?)?
        };
        let (dataset, _) = generate(&spec)?;
        put(out, NcdDataset(dataset))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncd_dataset_load(path: *const c_char, out: *mut *mut NcdDataset) -> NcdStatus {
    guard(|| {
        let dataset = load_dataset(&PathBuf::from(text(path, "path")?))?;
        put(out, NcdDataset(dataset))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncd_dataset_save(dataset: *const NcdDataset, path: *const c_char) -> NcdStatus {
    guard(|| {
        let dataset = borrow(dataset, "dataset")?;
        save_dataset(&dataset.0, &PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncd_dataset_free(dataset: *mut NcdDataset) {
    free(dataset);
}

/// Number of samples, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ncd_dataset_len(dataset: *const NcdDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn ncd_dataset_dim(dataset: *const NcdDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.dim())
}

#[no_mangle]
pub unsafe extern "C" fn ncd_dataset_num_known(dataset: *const NcdDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.num_known())
}

#[no_mangle]
pub unsafe extern "C" fn ncd_dataset_num_novel(dataset: *const NcdDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.num_novel())
}

/// Supervised pretraining; writes a new model handle to `out`.
#[no_mangle]
pub unsafe extern "C" fn ncd_pretrain(
    dataset: *const NcdDataset,
    cfg: *const NcdConfig,
    out: *mut *mut NcdModel,
) -> NcdStatus {
    guard(|| {
        let (dataset, cfg) = (borrow(dataset, "dataset")?, borrow(cfg, "config")?);
        let (model, _) = pretrain(&dataset.0, &cfg.0)?;
        put(out, NcdModel(model))
    })
}

/// Discovery training from `pretrained`, which is left untouched.
#[no_mangle]
pub unsafe extern "C" fn ncd_discover(
    dataset: *const NcdDataset,
    pretrained: *const NcdModel,
    cfg: *const NcdConfig,
    out: *mut *mut NcdModel,
) -> NcdStatus {
    guard(|| {
        let dataset = borrow(dataset, "dataset")?;
        let pretrained = borrow(pretrained, "pretrained model")?;
        let cfg = borrow(cfg, "config")?;
        let (model, _) = discover(&dataset.0, &pretrained.0, &cfg.0)?;
        put(out, NcdModel(model))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncd_model_load(path: *const c_char, out: *mut *mut NcdModel) -> NcdStatus {
    guard(|| {
        let model = load_checkpoint(&PathBuf::from(text(path, "path")?))?;
        put(out, NcdModel(model))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncd_model_save(model: *const NcdModel, path: *const c_char) -> NcdStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        save_checkpoint(&model.0, &PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ncd_model_free(model: *mut NcdModel) {
    free(model);
}

/// Task-agnostic evaluation on the test splits.
#[no_mangle]
pub unsafe extern "C" fn ncd_evaluate(
    model: *const NcdModel,
    dataset: *const NcdDataset,
    cfg: *const NcdConfig,
    out: *mut NcdEvalReport,
) -> NcdStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let dataset = borrow(dataset, "dataset")?;
        let cfg = borrow(cfg, "config")?;
        let out = out.as_mut().ok_or(Failure::Null("output report"))?;
        let r = task_agnostic_eval(&model.0, &dataset.0, &cfg.0)?;
        *out = NcdEvalReport {
            known_acc: r.known_acc,
            novel_cluster_acc: r.novel_cluster_acc,
            all_acc: r.all_acc,
            n_known: r.n_known,
            n_novel: r.n_novel,
        };
        Ok(())
    })
}

/// Clustering accuracy of the novel head on the unlabeled training split.
#[no_mangle]
pub unsafe extern "C" fn ncd_train_novel_acc(
    model: *const NcdModel,
    dataset: *const NcdDataset,
    cfg: *const NcdConfig,
    out: *mut f64,
) -> NcdStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let dataset = borrow(dataset, "dataset")?;
        let cfg = borrow(cfg, "config")?;
        let out = out.as_mut().ok_or(Failure::Null("output"))?;
        *out = train_novel_acc(&model.0, &dataset.0, cfg.0.tau)?;
        Ok(())
    })
}
