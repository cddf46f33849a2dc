//! C ABI over the `ugpress` model, cache and decoding session.
//!
//! Every fallible function returns a [`UgStatus`]; on failure a message is available from
//! [`ug_last_error`] until the next call on the same thread. Handles are opaque and must be
//! released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ugpress::compressor::{CompressedCache, DecodeMode, Session};
use ugpress::model::Model;
use ugpress::numkernel::Element;
use ugpress::segmenter::RatioSampler;
use ugpress::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    /// Cache and model use different precisions.
    Mismatch = 5,
    Failed = 6,
    Panic = 7,
}

/// A loaded checkpoint.
pub struct UgModel {
    inner: AnyModel,
}

/// Compressed context for one model.
pub struct UgCache {
    inner: AnyCache,
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

#[derive(Clone)]
enum AnyCache {
    F32(CompressedCache<f32>),
    F64(CompressedCache<f64>),
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(UgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => UgStatus::Io,
            Error::Format(_) => UgStatus::Format,
            Error::Config(_) | Error::Contract(_) | Error::EmptyInput(_) | Error::WindowOverflow { .. } => {
                UgStatus::InvalidArgument
            }
            _ => UgStatus::Failed,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(UgStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UgStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            UgStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(UgStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn tokens_arg<'a>(p: *const u32, len: usize) -> Result<&'a [u32], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null("tokens"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null("output pointer"))
}

fn mismatch() -> Fail {
    Fail(UgStatus::Mismatch, "cache precision differs from the model's".into())
}

fn compress<T: Element>(m: &Model<T>, c: &mut CompressedCache<T>, tokens: &[u32], ratio: u32) -> Result<(), Fail> {
    if tokens.is_empty() {
        return Err(Fail(UgStatus::InvalidArgument, "no tokens to compress".into()));
    }
    let kind = m.config().mask;
    for chunk in tokens.chunks(m.config().window) {
        c.compress_append(m, chunk, ratio, kind)?;
    }
    Ok(())
}

fn session<'m, T: Element>(m: &'m Model<T>, c: &CompressedCache<T>, ratio: u32) -> Result<Session<'m, T>, Fail> {
    if ratio == 0 {
        return Err(Fail(UgStatus::InvalidArgument, "ratio must be at least 1".into()));
    }
    Ok(Session::new(m, c.clone(), RatioSampler::monotonous(ratio), m.config().mask)?)
}

fn score<T: Element>(m: &Model<T>, c: &CompressedCache<T>, tokens: &[u32], ratio: u32) -> Result<f64, Fail> {
    let nll = session(m, c, ratio)?.score_nll(tokens)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

fn generate<T: Element>(
    m: &Model<T>,
    c: &CompressedCache<T>,
    prompt: &[u32],
    max_new: usize,
    ratio: u32,
) -> Result<Vec<u32>, Fail> {
    Ok(session(m, c, ratio)?.generate(prompt, max_new, DecodeMode::Greedy)?)
}

/// Message for the last failed call on this thread, or null. The pointer stays valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ug_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint in the precision recorded in its header.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ug_model_load(path: *const c_char, out: *mut *mut UgModel) -> UgStatus {
    guard(|| {
        let out = out_arg(out)?;
        let path = path_arg(path)?;
        let probe = ugpress::model::TensorFile::load(&path, ugpress::model::CHECKPOINT_MAGIC)?;
        let inner = match probe.header_value("model.dtype") {
            Some("f64") => AnyModel::F64(Model::from_checkpoint(&probe)?),
            _ => AnyModel::F32(Model::from_checkpoint(&probe)?),
        };
        *out = Box::into_raw(Box::new(UgModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ug_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ug_model_free(model: *mut UgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window size (tokens per compressed segment), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn ug_model_window(model: *const UgModel) -> usize {
    match model.as_ref().map(|m| &m.inner) {
        Some(AnyModel::F32(m)) => m.config().window,
        Some(AnyModel::F64(m)) => m.config().window,
        None => 0,
    }
}

/// Creates an empty cache matching `model`.
///
/// # Safety
/// `model` must be a live model handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ug_cache_new(model: *const UgModel, out: *mut *mut UgCache) -> UgStatus {
    guard(|| {
        let out = out_arg(out)?;
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let inner = match &m.inner {
            AnyModel::F32(m) => AnyCache::F32(CompressedCache::empty(m)),
            AnyModel::F64(m) => AnyCache::F64(CompressedCache::empty(m)),
        };
        *out = Box::into_raw(Box::new(UgCache { inner }));
        Ok(())
    })
}

/// Loads a cache file, converting it to the model's precision.
///
/// # Safety
/// `model` must be a live model handle, `path` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ug_cache_load(model: *const UgModel, path: *const c_char, out: *mut *mut UgCache) -> UgStatus {
    guard(|| {
        let out = out_arg(out)?;
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        let inner = match &m.inner {
            AnyModel::F32(_) => AnyCache::F32(CompressedCache::load(&path)?),
            AnyModel::F64(_) => AnyCache::F64(CompressedCache::load(&path)?),
        };
        *out = Box::into_raw(Box::new(UgCache { inner }));
        Ok(())
    })
}

/// # Safety
/// `cache` must be a live cache handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ug_cache_save(cache: *const UgCache, path: *const c_char) -> UgStatus {
    guard(|| {
        let c = cache.as_ref().ok_or_else(|| null("cache"))?;
        let path = path_arg(path)?;
        match &c.inner {
            AnyCache::F32(c) => c.save(&path)?,
            AnyCache::F64(c) => c.save(&path)?,
        }
        Ok(())
    })
}

/// # Safety
/// `cache` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ug_cache_free(cache: *mut UgCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Number of cached compression-token entries, or 0 for a null handle.
///
/// # Safety
/// `cache` must be null or a live cache handle.
#[no_mangle]
pub unsafe extern "C" fn ug_cache_len(cache: *const UgCache) -> usize {
    match cache.as_ref().map(|c| &c.inner) {
        Some(AnyCache::F32(c)) => c.len(),
        Some(AnyCache::F64(c)) => c.len(),
        None => 0,
    }
}

/// Number of source tokens compressed so far, or 0 for a null handle.
///
/// # Safety
/// `cache` must be null or a live cache handle.
#[no_mangle]
pub unsafe extern "C" fn ug_cache_source_tokens(cache: *const UgCache) -> usize {
    match cache.as_ref().map(|c| &c.inner) {
        Some(AnyCache::F32(c)) => c.total_source_tokens(),
        Some(AnyCache::F64(c)) => c.total_source_tokens(),
        None => 0,
    }
}

/// Compresses `tokens` window by window at `ratio` and appends the result to `cache`.
/// On failure the windows compressed before the error stay in the cache.
///
/// # Safety
/// Handles must be live; `tokens` must point to `len` readable values.
#[no_mangle]
pub unsafe extern "C" fn ug_compress(
    model: *const UgModel,
    cache: *mut UgCache,
    tokens: *const u32,
    len: usize,
    ratio: u32,
) -> UgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = cache.as_mut().ok_or_else(|| null("cache"))?;
        let tokens = tokens_arg(tokens, len)?;
        match (&m.inner, &mut c.inner) {
            (AnyModel::F32(m), AnyCache::F32(c)) => compress(m, c, tokens, ratio),
            (AnyModel::F64(m), AnyCache::F64(c)) => compress(m, c, tokens, ratio),
            _ => Err(mismatch()),
        }
    })
}

/// Mean negative log-likelihood (nats) of `tokens` as a continuation of the cached context.
/// Windows filled while scoring are compressed at `ratio`; `cache` itself is not modified.
///
/// # Safety
/// Handles must be live; `tokens` must point to `len` readable values; `mean_nll` writable.
#[no_mangle]
pub unsafe extern "C" fn ug_score(
    model: *const UgModel,
    cache: *const UgCache,
    tokens: *const u32,
    len: usize,
    ratio: u32,
    mean_nll: *mut f64,
) -> UgStatus {
    guard(|| {
        let out = out_arg(mean_nll)?;
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = cache.as_ref().ok_or_else(|| null("cache"))?;
        let tokens = tokens_arg(tokens, len)?;
        *out = match (&m.inner, &c.inner) {
            (AnyModel::F32(m), AnyCache::F32(c)) => score(m, c, tokens, ratio)?,
            (AnyModel::F64(m), AnyCache::F64(c)) => score(m, c, tokens, ratio)?,
            _ => return Err(mismatch()),
        };
        Ok(())
    })
}

/// Greedy continuation of `prompt` after the cached context. Writes `max_new` tokens to
/// `out`, which must have room for that many.
///
/// # Safety
/// Handles must be live; `prompt` must point to `prompt_len` values and `out` to `max_new`
/// writable values.
#[no_mangle]
pub unsafe extern "C" fn ug_generate(
    model: *const UgModel,
    cache: *const UgCache,
    prompt: *const u32,
    prompt_len: usize,
    max_new: usize,
    ratio: u32,
    out: *mut u32,
) -> UgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = cache.as_ref().ok_or_else(|| null("cache"))?;
        let prompt = tokens_arg(prompt, prompt_len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let toks = match (&m.inner, &c.inner) {
            (AnyModel::F32(m), AnyCache::F32(c)) => generate(m, c, prompt, max_new, ratio)?,
            (AnyModel::F64(m), AnyCache::F64(c)) => generate(m, c, prompt, max_new, ratio)?,
            _ => return Err(mismatch()),
        };
        ptr::copy_nonoverlapping(toks.as_ptr(), out, toks.len());
        Ok(())
    })
}

/// Precision tag of a model handle: 32, 64, or 0 for null.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn ug_model_precision(model: *const UgModel) -> u32 {
    match model.as_ref().map(|m| &m.inner) {
        Some(AnyModel::F32(_)) => 32,
        Some(AnyModel::F64(_)) => 64,
        None => 0,
    }
}
