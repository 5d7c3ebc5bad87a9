//! C ABI over the `tmag` pipeline.
//!
//! Handles are opaque pointers created by `*_new`/`*_load`/`*_train` and
//! released with the matching `*_free`. Every fallible function returns a
//! [`TmagStatus`]; on failure the message is available from
//! [`tmag_last_error`] on the same thread until the next failing call.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tmag::config::RunConfig;
use tmag::dataset::EvalTask;
use tmag::eval::MetricReport;
use tmag::model::{forward, Forward, ModelContext};
use tmag::pipeline::{self, Prepared};
use tmag::TmagError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmagStatus {
    Ok = 0,
    /// Bad configuration key or value, or an out-of-range argument.
    Usage = 1,
    /// Unreadable or inconsistent input data, or a missing file.
    Data = 2,
    /// NaN or divergence during training or scoring.
    Numeric = 3,
    /// A required pointer argument was null or a string was not UTF-8.
    InvalidArgument = 4,
    /// An internal panic was caught.
    Internal = 5,
}

/// Ranking metric selector for [`tmag_model_metric`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmagMetric {
    Recall = 0,
    Ndcg = 1,
    Map = 2,
}

/// Run configuration.
pub struct TmagConfig {
    inner: RunConfig,
}

/// A trained recommender with its evaluation results.
pub struct TmagModel {
    prep: Prepared,
    fw: Forward,
    reports: Vec<MetricReport>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &TmagError) -> TmagStatus {
    match e.exit_code() {
        1 => TmagStatus::Usage,
        3 => TmagStatus::Numeric,
        _ => TmagStatus::Data,
    }
}

struct Fail(TmagStatus, String);

impl From<TmagError> for Fail {
    fn from(e: TmagError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(TmagStatus::InvalidArgument, msg.to_owned())
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TmagStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TmagStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            TmagStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(invalid(&format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tmag_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tmag_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New configuration holding the defaults.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn tmag_config_new(out: *mut *mut TmagConfig) -> TmagStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(TmagConfig {
            inner: RunConfig::default(),
        }));
        Ok(())
    })
}

/// Configuration read from a `key = value` file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as for [`tmag_config_new`].
#[no_mangle]
pub unsafe extern "C" fn tmag_config_load(path: *const c_char, out: *mut *mut TmagConfig) -> TmagStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        out_arg(out, "out")?;
        let inner = RunConfig::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(TmagConfig { inner }));
        Ok(())
    })
}

/// Set one key; the configuration is unchanged if the value is rejected.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tmag_config_set(cfg: *mut TmagConfig, key: *const c_char, value: *const c_char) -> TmagStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| invalid("cfg is null"))?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        cfg.inner = cfg.inner.apply([(key, value)])?;
        Ok(())
    })
}

/// Canonical text of the configuration. The returned string must be released
/// with [`tmag_string_free`].
///
/// # Safety
/// `cfg` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmag_config_to_text(cfg: *const TmagConfig, out: *mut *mut c_char) -> TmagStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        out_arg(out, "out")?;
        *out = CString::new(cfg.inner.to_text()).expect("config text has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tmag_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `cfg` must come from [`tmag_config_new`] or [`tmag_config_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn tmag_config_free(cfg: *mut TmagConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Write the synthetic dataset (400 users, 200 items, 4 planted clusters)
/// and a matching `tmag.conf` into `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tmag_synth_write(dir: *const c_char, seed: u64) -> TmagStatus {
    guard(|| {
        let dir = Path::new(str_arg(dir, "dir")?);
        let data = tmag::experiment::synthetic_data(seed, Default::default())?;
        data.write(dir)?;
        let cfg = RunConfig {
            interactions: dir.join("interactions.tsv").display().to_string(),
            user_attributes: dir.join("users.tsv").display().to_string(),
            item_attributes: dir.join("items.tsv").display().to_string(),
            workdir: dir.join("run").display().to_string(),
            ..tmag::experiment::synthetic_preset(seed)
        };
        std::fs::write(dir.join("tmag.conf"), cfg.to_text()).map_err(TmagError::from)?;
        Ok(())
    })
}

/// Ingest, pretrain, cluster, meta-train and evaluate in memory.
///
/// # Safety
/// `cfg` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmag_model_train(cfg: *const TmagConfig, out: *mut *mut TmagModel) -> TmagStatus {
    guard(|| {
        let cfg = &ref_arg(cfg, "cfg")?.inner;
        out_arg(out, "out")?;
        let prep = pipeline::ingest(cfg)?;
        let ae = pipeline::pretrain(cfg, &prep)?;
        let clusters = pipeline::cluster(cfg, &prep, &ae)?;
        let outcome = pipeline::train(cfg, &prep, &ae, &clusters, |_, _, _| Ok(()))?;
        let setup = pipeline::test_setup(cfg, &prep, &outcome.params)?;
        let reports = pipeline::meta_test(cfg, &prep, &clusters, &setup)?
            .into_iter()
            .map(|r| r.report)
            .collect();
        let ctx = ModelContext::new(&setup.graph, &prep.user_attr, &prep.item_attr, cfg.model_config()?)?;
        let fw = forward(&setup.params, &ctx)?;
        *out = Box::into_raw(Box::new(TmagModel { prep, fw, reports }));
        Ok(())
    })
}

/// Number of users and items known to the model.
///
/// # Safety
/// `model` must come from [`tmag_model_train`]; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmag_model_counts(model: *const TmagModel, n_users: *mut usize, n_items: *mut usize) -> TmagStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        out_arg(n_users, "n_users")?;
        out_arg(n_items, "n_items")?;
        *n_users = m.prep.users.len();
        *n_items = m.prep.items.len();
        Ok(())
    })
}

/// Mean metric at the configured cutoff for evaluation task 1, 2 or 3.
///
/// # Safety
/// `model` must come from [`tmag_model_train`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmag_model_metric(model: *const TmagModel, task: u8, metric: TmagMetric, out: *mut f64) -> TmagStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        out_arg(out, "out")?;
        EvalTask::from_number(task).ok_or_else(|| Fail(TmagStatus::Usage, format!("task {task} is not 1, 2 or 3")))?;
        let r = m
            .reports
            .iter()
            .find(|r| r.task == task)
            .ok_or_else(|| Fail(TmagStatus::Data, format!("task {task} had no evaluable user")))?;
        *out = match metric {
            TmagMetric::Recall => r.recall,
            TmagMetric::Ndcg => r.ndcg,
            TmagMetric::Map => r.map,
        };
        Ok(())
    })
}

/// Preference score of a user for an item, both given by raw id, before
/// any per-cluster adaptation.
///
/// # Safety
/// `model` must come from [`tmag_model_train`]; ids NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tmag_model_score(
    model: *const TmagModel,
    user: *const c_char,
    item: *const c_char,
    out: *mut f64,
) -> TmagStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let (user, item) = (str_arg(user, "user")?, str_arg(item, "item")?);
        out_arg(out, "out")?;
        let u = m.prep.users.get(user).ok_or_else(|| Fail(TmagStatus::Data, format!("unknown user {user:?}")))?;
        let i = m.prep.items.get(item).ok_or_else(|| Fail(TmagStatus::Data, format!("unknown item {item:?}")))?;
        *out = m.fw.score(u, i);
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`tmag_model_train`] or be null.
#[no_mangle]
pub unsafe extern "C" fn tmag_model_free(model: *mut TmagModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
