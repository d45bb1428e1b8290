//! C ABI over the gmmil toolkit.
//!
//! Datasets and fits are opaque handles created and destroyed through
//! this interface; every fallible call returns a [`GmmilStatus`] and
//! leaves a human-readable message retrievable via
//! [`gmmil_last_error_message`] (thread-local, valid until the next
//! failing call on the same thread). Configuration crosses the boundary
//! as the same dotted `key=value` text the CLI uses, so bindings need no
//! struct marshalling.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

use libc::{c_char, c_double, c_int};

use gmmil::bmle::fit_bmle;
use gmmil::config::{em_options_from, sim_config_from, Config};
use gmmil::error::Error;
use gmmil::imle::fit_imle;
use gmmil::metrics::{bag_positive_prob, PosteriorScorer};
use gmmil::model::{flatten, BagDataset, EstimatorKind, FitResult};
use gmmil::sim::simulate;
use gmmil::smle::fit_smle;
use gmmil::subsample::design_subsample;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmmilStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Utf8 = 3,
    Io = 4,
    ParseError = 5,
    SchemaError = 6,
    DataError = 7,
    FitError = 8,
    ConfigError = 9,
}

/// Estimator selector for [`gmmil_fit`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmmilEstimator {
    Imle = 0,
    Bmle = 1,
    Smle = 2,
}

/// Opaque dataset handle.
pub struct GmmilDataset {
    inner: BagDataset,
}

/// Opaque fit handle.
pub struct GmmilFit {
    inner: FitResult,
    scorer: PosteriorScorer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").expect("empty"));
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul filtered");
    });
}

fn status_of(err: &Error) -> GmmilStatus {
    match err {
        Error::Io { .. } => GmmilStatus::Io,
        Error::Parse { .. } => GmmilStatus::ParseError,
        Error::Schema { .. } => GmmilStatus::SchemaError,
        Error::Config(_) | Error::InvalidConfig(_) | Error::ConfigTooLarge(_) => {
            GmmilStatus::ConfigError
        }
        Error::EmptyDataset
        | Error::NoPositiveBags
        | Error::NoPositiveInstances
        | Error::NoNegativeInstances
        | Error::UnlabeledInstance { .. }
        | Error::InconsistentSubsample(_)
        | Error::MissingTruthLabel { .. }
        | Error::DimensionMismatch { .. } => GmmilStatus::DataError,
        _ => GmmilStatus::FitError,
    }
}

fn fail(err: &Error) -> GmmilStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn null_arg(name: &str) -> GmmilStatus {
    set_error(&format!("{name} is null"));
    GmmilStatus::NullPointer
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn cstr<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, GmmilStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error(&format!("{name} is not valid UTF-8"));
        GmmilStatus::Utf8
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gmmil_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last error on this thread. Valid until the next
/// failing call on the same thread; never NULL.
#[no_mangle]
pub extern "C" fn gmmil_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Reads a dataset CSV into a new handle.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn gmmil_dataset_read_csv(
    path: *const c_char,
    out: *mut *mut GmmilDataset,
) -> GmmilStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let path = match unsafe { cstr(path, "path") } {
        Ok(s) => s,
        Err(code) => return code,
    };
    match gmmil::io::read_dataset(Path::new(path)) {
        Ok((inner, _present)) => {
            unsafe { *out = Box::into_raw(Box::new(GmmilDataset { inner })) };
            GmmilStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Writes a dataset handle back to CSV.
///
/// # Safety
/// `ds` must be a live handle from this library; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gmmil_dataset_write_csv(
    ds: *const GmmilDataset,
    path: *const c_char,
) -> GmmilStatus {
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    let path = match unsafe { cstr(path, "path") } {
        Ok(s) => s,
        Err(code) => return code,
    };
    match gmmil::io::write_dataset(&ds.inner, Path::new(path)) {
        Ok(()) => GmmilStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Simulates a dataset from dotted `key=value` configuration text
/// (same keys as the CLI: `sim.n_bags`, `sim.pi`, `sim.regime`, ...).
///
/// # Safety
/// `config_text` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gmmil_dataset_simulate(
    config_text: *const c_char,
    out: *mut *mut GmmilDataset,
) -> GmmilStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let text = match unsafe { cstr(config_text, "config_text") } {
        Ok(s) => s,
        Err(code) => return code,
    };
    let result = parse_config(text)
        .and_then(|cfg| sim_config_from(&cfg))
        .and_then(|sim| simulate(&sim));
    match result {
        Ok(inner) => {
            unsafe { *out = Box::into_raw(Box::new(GmmilDataset { inner })) };
            GmmilStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

fn parse_config(text: &str) -> Result<Config, Error> {
    let mut cfg = Config::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value", ln + 1)));
        };
        cfg.set(k.trim(), v.trim());
    }
    Ok(cfg)
}

/// Draws a posterior-guided subsampling plan and returns the masked
/// dataset an annotation pipeline would see (indicators set, hidden
/// labels removed). `pilot_fraction = 0` selects the uniform scheme.
///
/// # Safety
/// `ds` must be a live handle; `options_text` may be NULL; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gmmil_dataset_subsample(
    ds: *const GmmilDataset,
    pilot_fraction: c_double,
    target_fraction: c_double,
    seed: u64,
    options_text: *const c_char,
    out: *mut *mut GmmilDataset,
) -> GmmilStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    let options = if options_text.is_null() {
        Ok(Config::new())
    } else {
        match unsafe { cstr(options_text, "options_text") } {
            Ok(text) => parse_config(text),
            Err(code) => return code,
        }
    };
    let result = options
        .and_then(|cfg| em_options_from(&cfg))
        .and_then(|em| design_subsample(&ds.inner, pilot_fraction, target_fraction, &em, seed))
        .and_then(|plan| plan.apply_masked(&ds.inner));
    match result {
        Ok(inner) => {
            unsafe { *out = Box::into_raw(Box::new(GmmilDataset { inner })) };
            GmmilStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// # Safety
/// `ds` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gmmil_dataset_n_bags(ds: *const GmmilDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.inner.n_bags())
}

/// # Safety
/// `ds` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gmmil_dataset_n_instances(ds: *const GmmilDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.inner.n_instances())
}

/// Feature dimension of the dataset.
///
/// # Safety
/// `ds` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gmmil_dataset_dim(ds: *const GmmilDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.inner.p)
}

/// Releases a dataset handle. NULL is ignored.
///
/// # Safety
/// `ds` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gmmil_dataset_free(ds: *mut GmmilDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Fits an estimator. `options_text` uses the CLI's `em.*` keys and may
/// be NULL for defaults.
///
/// # Safety
/// `ds` must be a live handle; `options_text` NULL or NUL-terminated;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit(
    ds: *const GmmilDataset,
    estimator: GmmilEstimator,
    options_text: *const c_char,
    out: *mut *mut GmmilFit,
) -> GmmilStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    let options = if options_text.is_null() {
        Ok(Config::new())
    } else {
        match unsafe { cstr(options_text, "options_text") } {
            Ok(text) => parse_config(text),
            Err(code) => return code,
        }
    };
    let result = options.and_then(|cfg| em_options_from(&cfg)).and_then(|em| match estimator {
        GmmilEstimator::Imle => fit_imle(&ds.inner),
        GmmilEstimator::Bmle => fit_bmle(&ds.inner, &em),
        GmmilEstimator::Smle => fit_smle(&ds.inner, &em),
    });
    match result.and_then(|inner| {
        let scorer = PosteriorScorer::new(&inner.params)?;
        Ok(GmmilFit { inner, scorer })
    }) {
        Ok(fit) => {
            unsafe { *out = Box::into_raw(Box::new(fit)) };
            GmmilStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Length of the flattened parameter vector
/// `(pi, mu1, mu0, vech(Omega))`.
///
/// # Safety
/// `fit` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit_param_len(fit: *const GmmilFit) -> usize {
    unsafe { fit.as_ref() }.map_or(0, |f| f.inner.params.q())
}

/// Feature dimension of the fitted model.
///
/// # Safety
/// `fit` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit_dim(fit: *const GmmilFit) -> usize {
    unsafe { fit.as_ref() }.map_or(0, |f| f.inner.params.p())
}

/// Copies the flattened parameters into `buf` (length must be
/// `gmmil_fit_param_len`).
///
/// # Safety
/// `fit` live handle; `buf` must point to at least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit_params_flat(
    fit: *const GmmilFit,
    buf: *mut c_double,
    len: usize,
) -> GmmilStatus {
    let Some(fit) = (unsafe { fit.as_ref() }) else {
        return null_arg("fit");
    };
    if buf.is_null() {
        return null_arg("buf");
    }
    if len != fit.inner.params.q() {
        set_error(&format!("buffer length {len}, expected {}", fit.inner.params.q()));
        return GmmilStatus::InvalidArgument;
    }
    match flatten(&fit.inner.params) {
        Ok(theta) => {
            unsafe { std::ptr::copy_nonoverlapping(theta.as_slice().as_ptr(), buf, len) };
            GmmilStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Estimated bag prevalence (mean bag label).
///
/// # Safety
/// `fit` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit_alpha(fit: *const GmmilFit) -> c_double {
    unsafe { fit.as_ref() }.map_or(f64::NAN, |f| f.inner.params.alpha)
}

/// 1 when the EM converged (always 1 for the closed-form estimator).
///
/// # Safety
/// `fit` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit_converged(fit: *const GmmilFit) -> c_int {
    unsafe { fit.as_ref() }.map_or(0, |f| c_int::from(f.inner.converged))
}

/// Number of EM updates performed.
///
/// # Safety
/// `fit` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit_iterations(fit: *const GmmilFit) -> usize {
    unsafe { fit.as_ref() }.map_or(0, |f| f.inner.iterations)
}

/// Final objective value, or NaN when no trace exists.
///
/// # Safety
/// `fit` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit_final_loglik(fit: *const GmmilFit) -> c_double {
    unsafe { fit.as_ref() }
        .and_then(|f| f.inner.loglik_trace.last().copied())
        .unwrap_or(f64::NAN)
}

/// Writes the fitted parameters as the CLI-compatible CSV.
///
/// # Safety
/// `fit` live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit_write_params_csv(
    fit: *const GmmilFit,
    path: *const c_char,
) -> GmmilStatus {
    let Some(fit) = (unsafe { fit.as_ref() }) else {
        return null_arg("fit");
    };
    let path = match unsafe { cstr(path, "path") } {
        Ok(s) => s,
        Err(code) => return code,
    };
    match gmmil::io::write_params(&fit.inner.params, Path::new(path)) {
        Ok(()) => GmmilStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Releases a fit handle. NULL is ignored.
///
/// # Safety
/// `fit` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit_free(fit: *mut GmmilFit) {
    if !fit.is_null() {
        drop(unsafe { Box::from_raw(fit) });
    }
}

/// Posterior positive probability of one feature vector.
///
/// # Safety
/// `fit` live handle; `x` must point to `p` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gmmil_posterior(
    fit: *const GmmilFit,
    x: *const c_double,
    p: usize,
    out: *mut c_double,
) -> GmmilStatus {
    let Some(fit) = (unsafe { fit.as_ref() }) else {
        return null_arg("fit");
    };
    if x.is_null() {
        return null_arg("x");
    }
    if out.is_null() {
        return null_arg("out");
    }
    if p != fit.inner.params.p() {
        set_error(&format!("x has length {p}, model expects {}", fit.inner.params.p()));
        return GmmilStatus::InvalidArgument;
    }
    let xs = unsafe { std::slice::from_raw_parts(x, p) };
    unsafe { *out = fit.scorer.score_slice(xs) };
    GmmilStatus::Ok
}

/// Scores every instance and bag of a dataset. `instance_probs` gets one
/// posterior per instance in bag order; `bag_probs` one positive
/// probability per bag. Either output may be NULL to skip it.
///
/// # Safety
/// Handles must be live; non-NULL buffers must hold `n_instances` and
/// `n_bags` doubles respectively.
#[no_mangle]
pub unsafe extern "C" fn gmmil_predict_dataset(
    fit: *const GmmilFit,
    ds: *const GmmilDataset,
    instance_probs: *mut c_double,
    bag_probs: *mut c_double,
) -> GmmilStatus {
    let Some(fit) = (unsafe { fit.as_ref() }) else {
        return null_arg("fit");
    };
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    if ds.inner.p != fit.inner.params.p() {
        set_error(&format!(
            "dataset dimension {} does not match model dimension {}",
            ds.inner.p,
            fit.inner.params.p()
        ));
        return GmmilStatus::InvalidArgument;
    }
    let mut inst_offset = 0usize;
    for (bi, bag) in ds.inner.bags.iter().enumerate() {
        let posteriors: Vec<f64> = bag.instances.iter().map(|i| fit.scorer.score(&i.x)).collect();
        if !instance_probs.is_null() {
            unsafe {
                std::ptr::copy_nonoverlapping(
                    posteriors.as_ptr(),
                    instance_probs.add(inst_offset),
                    posteriors.len(),
                )
            };
        }
        if !bag_probs.is_null() {
            unsafe { *bag_probs.add(bi) = bag_positive_prob(&posteriors) };
        }
        inst_offset += posteriors.len();
    }
    GmmilStatus::Ok
}

/// Bag positive probability from instance posteriors (log-domain
/// complement product).
///
/// # Safety
/// `posteriors` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gmmil_bag_positive_prob(
    posteriors: *const c_double,
    len: usize,
) -> c_double {
    if posteriors.is_null() {
        return f64::NAN;
    }
    let slice = unsafe { std::slice::from_raw_parts(posteriors, len) };
    bag_positive_prob(slice)
}

/// Estimator kind recorded on a fit handle.
///
/// # Safety
/// `fit` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gmmil_fit_estimator(fit: *const GmmilFit) -> GmmilEstimator {
    match unsafe { fit.as_ref() }.map(|f| f.inner.estimator_kind) {
        Some(EstimatorKind::Imle) | None => GmmilEstimator::Imle,
        Some(EstimatorKind::Bmle) => GmmilEstimator::Bmle,
        Some(EstimatorKind::Smle) => GmmilEstimator::Smle,
    }
}
