//! C interface to `proctopic`.
//!
//! Every fallible function returns a [`ProctopicStatus`]. On failure the
//! message is available from [`proctopic_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.
//! Event ids are 1-based at this boundary, as in corpus files.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use proctopic::fit::{fit, FitConfig, FitReport};
use proctopic::ingest::{load_corpus, save_corpus, Codebook};
use proctopic::simulate::{simulate_corpus, StopRule};
use proctopic::{params_io, Error, EventSequence, ModelParams, Timing};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProctopicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    InvalidParams = 4,
    InvalidData = 5,
    Io = 6,
    Numeric = 7,
    FitFailed = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A list of event sequences.
pub struct ProctopicCorpus {
    seqs: Vec<EventSequence>,
}

/// Model parameters.
pub struct ProctopicParams {
    inner: ModelParams,
}

/// Result of a fit.
pub struct ProctopicFit {
    report: FitReport,
}

/// Fit settings. Obtain defaults from [`proctopic_fit_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ProctopicFitOptions {
    pub k: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// 0 means all cores.
    pub threads: usize,
    /// Non-zero drops gap times from the model.
    pub ignore_time: i32,
}

/// Stop rule for simulation; zero fields are unset.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ProctopicStopRule {
    /// 1-based terminal event id, 0 for none.
    pub terminal_event: usize,
    pub max_events: usize,
    /// Values <= 0 mean no time limit.
    pub max_time: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> ProctopicStatus {
    use ProctopicStatus as S;
    match err {
        Error::DimensionMismatch { .. }
        | Error::NotStochastic { .. }
        | Error::NonPositiveHyperparam(_)
        | Error::InvalidBlock(_)
        | Error::ShapeMismatch(_) => S::InvalidParams,
        Error::NonFinite(_) | Error::Underflow { .. } | Error::BootstrapUnstable { .. } => S::Numeric,
        Error::AllRestartsFailed(_) => S::FitFailed,
        Error::InvalidConfig(_) | Error::RunawaySequence(_) => S::InvalidConfig,
        Error::MissingFile(_) | Error::Io { .. } => S::Io,
        _ => S::InvalidData,
    }
}

fn guard<F: FnOnce() -> Result<(), ProctopicStatus>>(f: F) -> ProctopicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ProctopicStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            ProctopicStatus::Panic
        }
    }
}

fn lib<T>(r: proctopic::Result<T>) -> Result<T, ProctopicStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn fail<T>(status: ProctopicStatus, msg: &str) -> Result<T, ProctopicStatus> {
    set_error(msg.to_string());
    Err(status)
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, ProctopicStatus> {
    match p.as_ref() {
        Some(r) => Ok(r),
        None => fail(ProctopicStatus::NullPointer, &format!("{what} is null")),
    }
}

unsafe fn c_path(p: *const c_char) -> Result<PathBuf, ProctopicStatus> {
    if p.is_null() {
        return fail(ProctopicStatus::NullPointer, "path is null");
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(ProctopicStatus::InvalidArgument, "path is not UTF-8"),
    }
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), ProctopicStatus> {
    if out.is_null() {
        return fail(ProctopicStatus::NullPointer, "output pointer is null");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), ProctopicStatus> {
    if out.is_null() {
        return fail(ProctopicStatus::NullPointer, "output buffer is null");
    }
    if len < src.len() {
        return fail(
            ProctopicStatus::BufferTooSmall,
            &format!("buffer holds {len} values, {} needed", src.len()),
        );
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn proctopic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn proctopic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Empty corpus.
#[no_mangle]
pub extern "C" fn proctopic_corpus_new() -> *mut ProctopicCorpus {
    Box::into_raw(Box::new(ProctopicCorpus { seqs: Vec::new() }))
}

/// Appends one sequence of `n` events with 1-based ids and strictly
/// increasing positive times.
///
/// # Safety
/// `corpus` must be a live handle, `id` a nul-terminated string, and
/// `events`/`times` must point to `n` readable values.
#[no_mangle]
pub unsafe extern "C" fn proctopic_corpus_push(
    corpus: *mut ProctopicCorpus,
    id: *const c_char,
    events: *const u32,
    times: *const f64,
    n: usize,
) -> ProctopicStatus {
    guard(|| {
        let Some(corpus) = corpus.as_mut() else {
            return fail(ProctopicStatus::NullPointer, "corpus is null");
        };
        if id.is_null() || events.is_null() || times.is_null() {
            return fail(ProctopicStatus::NullPointer, "id, events or times is null");
        }
        let Ok(id) = CStr::from_ptr(id).to_str() else {
            return fail(ProctopicStatus::InvalidArgument, "id is not UTF-8");
        };
        let events = std::slice::from_raw_parts(events, n);
        if events.contains(&0) {
            return fail(ProctopicStatus::InvalidData, "event ids are 1-based");
        }
        let events = events.iter().map(|&e| e as usize - 1).collect();
        let times = std::slice::from_raw_parts(times, n).to_vec();
        corpus.seqs.push(lib(EventSequence::new(id, events, times))?);
        Ok(())
    })
}

/// Reads a corpus file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn proctopic_corpus_load(path: *const c_char, out: *mut *mut ProctopicCorpus) -> ProctopicStatus {
    guard(|| {
        let path = c_path(path)?;
        let (_, seqs) = lib(load_corpus(&path))?;
        put(out, ProctopicCorpus { seqs })
    })
}

/// Writes a corpus file with numeric labels.
///
/// # Safety
/// `corpus` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn proctopic_corpus_save(corpus: *const ProctopicCorpus, path: *const c_char) -> ProctopicStatus {
    guard(|| {
        let corpus = deref(corpus, "corpus")?;
        let path = c_path(path)?;
        let v = proctopic::fit::vocabulary_size(&corpus.seqs);
        let cb = lib(Codebook::from_labels((1..=v).map(|i| i.to_string())))?;
        lib(save_corpus(&path, &corpus.seqs, &cb))
    })
}

/// Number of sequences; 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn proctopic_corpus_len(corpus: *const ProctopicCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.seqs.len())
}

/// Total number of events; 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn proctopic_corpus_total_events(corpus: *const ProctopicCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.seqs.iter().map(|s| s.len()).sum())
}

/// # Safety
/// `corpus` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn proctopic_corpus_free(corpus: *mut ProctopicCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Builds parameters from row-major arrays: `b` is K×V, `g` and `r` are
/// K×K, `p0` has K entries.
///
/// # Safety
/// Each pointer must reference the stated number of readable values and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn proctopic_params_new(
    k: usize,
    v: usize,
    b: *const f64,
    g: *const f64,
    p0: *const f64,
    r: *const f64,
    a: f64,
    d: f64,
    out: *mut *mut ProctopicParams,
) -> ProctopicStatus {
    guard(|| {
        if b.is_null() || g.is_null() || p0.is_null() || r.is_null() {
            return fail(ProctopicStatus::NullPointer, "parameter array is null");
        }
        if k == 0 || v == 0 {
            return fail(ProctopicStatus::InvalidArgument, "K and V must be positive");
        }
        let mat = |p: *const f64, rows: usize, cols: usize| {
            ndarray::Array2::from_shape_vec((rows, cols), std::slice::from_raw_parts(p, rows * cols).to_vec())
                .expect("length matches shape")
        };
        let inner = lib(ModelParams::new(
            mat(b, k, v),
            mat(g, k, k),
            ndarray::Array1::from(std::slice::from_raw_parts(p0, k).to_vec()),
            mat(r, k, k),
            a,
            d,
        ))?;
        put(out, ProctopicParams { inner })
    })
}

/// Reads a parameter file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn proctopic_params_load(path: *const c_char, out: *mut *mut ProctopicParams) -> ProctopicStatus {
    guard(|| {
        let path = c_path(path)?;
        let inner = lib(params_io::load(&path))?;
        put(out, ProctopicParams { inner })
    })
}

/// Writes a parameter file.
///
/// # Safety
/// `params` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn proctopic_params_save(params: *const ProctopicParams, path: *const c_char) -> ProctopicStatus {
    guard(|| {
        let params = deref(params, "params")?;
        let path = c_path(path)?;
        lib(params_io::save(&params.inner, &path))
    })
}

/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn proctopic_params_k(params: *const ProctopicParams) -> usize {
    params.as_ref().map_or(0, |p| p.inner.k())
}

/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn proctopic_params_v(params: *const ProctopicParams) -> usize {
    params.as_ref().map_or(0, |p| p.inner.v())
}

/// Which parameter block to copy.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProctopicField {
    /// K×V emission matrix.
    B = 0,
    /// K×K log intensities.
    G = 1,
    /// Initial distribution, K values.
    P0 = 2,
    /// K×K Dirichlet hyperparameters.
    R = 3,
    /// R with rows normalized.
    NormR = 4,
    /// Frailty shape and rate, 2 values.
    Frailty = 5,
}

/// Copies a parameter block, row-major, into `out` of capacity `len`.
///
/// # Safety
/// `params` must be a live handle and `out` must have room for `len`
/// values.
#[no_mangle]
pub unsafe extern "C" fn proctopic_params_get(
    params: *const ProctopicParams,
    field: ProctopicField,
    out: *mut f64,
    len: usize,
) -> ProctopicStatus {
    guard(|| {
        let p = &deref(params, "params")?.inner;
        let values: Vec<f64> = match field {
            ProctopicField::B => p.b.iter().copied().collect(),
            ProctopicField::G => p.g.iter().copied().collect(),
            ProctopicField::P0 => p.p0.to_vec(),
            ProctopicField::R => p.r.iter().copied().collect(),
            ProctopicField::NormR => p.norm_r().iter().copied().collect(),
            ProctopicField::Frailty => vec![p.a, p.d],
        };
        copy_out(&values, out, len)
    })
}

/// # Safety
/// `params` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn proctopic_params_free(params: *mut ProctopicParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Simulates `m` examinees. Deterministic in `seed`.
///
/// # Safety
/// `params` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn proctopic_simulate(
    params: *const ProctopicParams,
    stop: ProctopicStopRule,
    m: usize,
    seed: u64,
    out: *mut *mut ProctopicCorpus,
) -> ProctopicStatus {
    guard(|| {
        let params = &deref(params, "params")?.inner;
        let rule = StopRule {
            terminal_event: (stop.terminal_event > 0).then(|| stop.terminal_event - 1),
            max_events: (stop.max_events > 0).then_some(stop.max_events),
            max_time: (stop.max_time > 0.0).then_some(stop.max_time),
        };
        if m == 0 {
            return fail(ProctopicStatus::InvalidConfig, "m must be at least 1");
        }
        let draws = lib(simulate_corpus(params, &rule, m, seed))?;
        put(
            out,
            ProctopicCorpus {
                seqs: draws.into_iter().map(|(s, _)| s).collect(),
            },
        )
    })
}

/// Default fit options for `k` topics.
#[no_mangle]
pub extern "C" fn proctopic_fit_options_default(k: usize) -> ProctopicFitOptions {
    let c = FitConfig::new(k);
    ProctopicFitOptions {
        k,
        max_iters: c.max_iters,
        rel_tol: c.rel_tol,
        restarts: c.restarts,
        seed: c.seed,
        threads: 0,
        ignore_time: 0,
    }
}

/// Fits the model. `init` may be null; otherwise it seeds the first
/// restart.
///
/// # Safety
/// `corpus` must be a live handle, `init` null or a live handle, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn proctopic_fit(
    corpus: *const ProctopicCorpus,
    options: ProctopicFitOptions,
    init: *const ProctopicParams,
    out: *mut *mut ProctopicFit,
) -> ProctopicStatus {
    guard(|| {
        let corpus = deref(corpus, "corpus")?;
        let mut config = FitConfig::new(options.k);
        config.max_iters = options.max_iters;
        config.rel_tol = options.rel_tol;
        config.restarts = options.restarts;
        config.seed = options.seed;
        config.threads = (options.threads > 0).then_some(options.threads);
        if options.ignore_time != 0 {
            config.timing = Timing::Ignored;
        }
        config.init = init.as_ref().map(|p| p.inner.clone());
        let report = lib(fit(&corpus.seqs, &config))?;
        put(out, ProctopicFit { report })
    })
}

/// Copies the fitted parameters into a new handle.
///
/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn proctopic_fit_params(fit: *const ProctopicFit, out: *mut *mut ProctopicParams) -> ProctopicStatus {
    guard(|| {
        let fit = deref(fit, "fit")?;
        put(
            out,
            ProctopicParams {
                inner: fit.report.params.clone(),
            },
        )
    })
}

/// Final ELBO of the best restart; NaN for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn proctopic_fit_elbo(fit: *const ProctopicFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.report.elbo)
}

/// Iterations run by the best restart.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn proctopic_fit_iterations(fit: *const ProctopicFit) -> usize {
    fit.as_ref().map_or(0, |f| f.report.iterations)
}

/// 1 if the best restart met the tolerance, else 0.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn proctopic_fit_converged(fit: *const ProctopicFit) -> i32 {
    fit.as_ref().map_or(0, |f| i32::from(f.report.converged))
}

/// Copies examinee `i`'s normalized γ (K×K, row-major) into `out`.
///
/// # Safety
/// `fit` must be a live handle and `out` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn proctopic_fit_gamma(
    fit: *const ProctopicFit,
    i: usize,
    out: *mut f64,
    len: usize,
) -> ProctopicStatus {
    guard(|| {
        let fit = deref(fit, "fit")?;
        let Some(state) = fit.report.states.get(i) else {
            return fail(ProctopicStatus::InvalidArgument, "examinee index out of range");
        };
        let g = proctopic::model::row_normalize(&state.gamma);
        copy_out(&g.iter().copied().collect::<Vec<_>>(), out, len)
    })
}

/// # Safety
/// `fit` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn proctopic_fit_free(fit: *mut ProctopicFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}
