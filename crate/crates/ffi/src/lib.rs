//! C ABI over the `vocmerge` engine.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a [`VmStatus`];
//! on failure [`vm_last_error`] describes the problem. Errors are kept per
//! thread. No function unwinds across the boundary: a panic surfaces as
//! [`VmStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use vocmerge::format::read_vocabulary;
use vocmerge::index::read_index;
use vocmerge::retrieval::score_query;
use vocmerge::{Error, ImageRecord, IndexBundle, MergeConfig, Method, RankedResult, ScoringMethod};

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    InvalidIndex = 5,
    InvalidConfig = 6,
    DimMismatch = 7,
    OutOfRange = 8,
    Panic = 9,
}

/// Scoring method selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmMethod {
    /// Single vocabulary; pick it with `b0_vocab`.
    B0 = 0,
    B1 = 1,
    B2 = 2,
    Bayes = 3,
    RankAggregation = 4,
}

/// Filter candidates by Hamming distance (needs an index with signatures).
pub const VM_FLAG_HAMMING: u32 = 1;
/// Burstiness weighting of difference-set votes (B1 and Bayes).
pub const VM_FLAG_BURSTINESS: u32 = 2;

/// A loaded index with its vocabularies.
pub struct VmIndex(IndexBundle);

/// Merge configuration.
pub struct VmConfig(MergeConfig);

/// A ranking, best first.
pub struct VmResults(RankedResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VmStatus {
    match e {
        Error::Io { .. } => VmStatus::Io,
        Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::TruncatedHeader { .. }
        | Error::NonFinite { .. }
        | Error::Parse { .. } => VmStatus::Format,
        Error::DimMismatch { .. } => VmStatus::DimMismatch,
        Error::InvalidIndex(_) | Error::UnsortedPostings { .. } | Error::WidthMismatch(..) => VmStatus::InvalidIndex,
        Error::InvalidConfig(_) => VmStatus::InvalidConfig,
        Error::InvalidCorpus(_) | Error::InvalidVocabulary(_) | Error::Invalid(_) => VmStatus::InvalidArgument,
    }
}

/// Runs `f`, recording its error and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (VmStatus, String)>) -> VmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            VmStatus::Panic
        }
    }
}

fn core(e: Error) -> (VmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (VmStatus, String) {
    (VmStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path<'a>(p: *const c_char, what: &str) -> Result<&'a str, (VmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (VmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (VmStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads an index and the `n_vocab` vocabularies it was built with.
///
/// # Safety
/// `index_path` and every `vocab_paths[i]` must be valid nul-terminated
/// strings; `vocab_paths` must point to `n_vocab` of them.
#[no_mangle]
pub unsafe extern "C" fn vm_index_load(
    index_path: *const c_char,
    vocab_paths: *const *const c_char,
    n_vocab: usize,
    out: *mut *mut VmIndex,
) -> VmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let index_path = path(index_path, "index_path")?;
        if vocab_paths.is_null() {
            return Err(null("vocab_paths"));
        }
        if n_vocab == 0 {
            return Err((VmStatus::InvalidArgument, "at least one vocabulary required".into()));
        }
        let vocabs = std::slice::from_raw_parts(vocab_paths, n_vocab)
            .iter()
            .map(|&p| read_vocabulary(path(p, "vocabulary path")?).map_err(core))
            .collect::<Result<Vec<_>, _>>()?;
        let index = read_index(index_path, vocabs).map_err(core)?;
        *out = Box::into_raw(Box::new(VmIndex(index)));
        Ok(())
    })
}

/// # Safety
/// `index` must come from [`vm_index_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vm_index_free(index: *mut VmIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Database size, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vm_index_num_images(index: *const VmIndex) -> u32 {
    index.as_ref().map_or(0, |i| i.0.n_images)
}

/// Number of vocabularies `K`, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vm_index_num_vocabularies(index: *const VmIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.num_vocabularies())
}

/// Descriptor dimension, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vm_index_dim(index: *const VmIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.dim())
}

/// The shipped configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_config_default(out: *mut *mut VmConfig) -> VmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(VmConfig(MergeConfig::default())));
        Ok(())
    })
}

/// Reads a `key=value` configuration file.
///
/// # Safety
/// `config_path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_config_load(config_path: *const c_char, out: *mut *mut VmConfig) -> VmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cfg = MergeConfig::load(path(config_path, "config_path")?).map_err(core)?;
        *out = Box::into_raw(Box::new(VmConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `config` must come from a `vm_config_*` constructor and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn vm_config_free(config: *mut VmConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Applies `edit` to a copy and keeps it only if it validates.
unsafe fn edit_config(config: *mut VmConfig, edit: impl FnOnce(&mut MergeConfig)) -> VmStatus {
    guard(|| {
        let cfg = out_ptr(config, "config")?;
        let mut next = cfg.0.clone();
        edit(&mut next);
        next.validate().map_err(core)?;
        cfg.0 = next;
        Ok(())
    })
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vm_config_set_c(config: *mut VmConfig, c: f64) -> VmStatus {
    edit_config(config, |cfg| cfg.c = c)
}

/// Sets the term-2 line `a * r + b`.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vm_config_set_term2(config: *mut VmConfig, a: f64, b: f64) -> VmStatus {
    edit_config(config, |cfg| {
        cfg.term2_slope = a;
        cfg.term2_intercept = b;
    })
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vm_config_set_he_threshold(config: *mut VmConfig, threshold: u32) -> VmStatus {
    edit_config(config, |cfg| cfg.he_threshold = threshold)
}

/// Nonzero pins every Bayes weight to 1.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vm_config_set_force_unit_weight(config: *mut VmConfig, on: bool) -> VmStatus {
    edit_config(config, |cfg| cfg.force_unit_weight = on)
}

/// Weight of an intersection-set feature with the given cardinalities in a
/// database of `n_images`.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_bayes_weight(
    inter_card: usize,
    union_card: usize,
    n_images: u64,
    config: *const VmConfig,
    out: *mut f64,
) -> VmStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        let out = out_ptr(out, "out")?;
        *out = vocmerge::bayes_weight(inter_card, union_card, n_images, &cfg.0).map_err(core)?;
        Ok(())
    })
}

/// Scores one query image given as `n_features` row-major descriptors of
/// `dim` floats. `method` is a `VmMethod` value; `flags` combines
/// `VM_FLAG_*` values.
///
/// # Safety
/// `index` and `config` must be live handles, `descriptors` must point to
/// `n_features * dim` floats and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vm_query(
    index: *const VmIndex,
    config: *const VmConfig,
    method: u32,
    b0_vocab: usize,
    flags: u32,
    descriptors: *const f32,
    n_features: usize,
    dim: usize,
    out: *mut *mut VmResults,
) -> VmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let index = index.as_ref().ok_or_else(|| null("index"))?;
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if descriptors.is_null() {
            return Err(null("descriptors"));
        }
        if flags & !(VM_FLAG_HAMMING | VM_FLAG_BURSTINESS) != 0 {
            return Err((VmStatus::InvalidArgument, format!("unknown flag bits {flags:#x}")));
        }
        if dim != index.0.dim() {
            return Err(core(Error::DimMismatch {
                expected: index.0.dim(),
                got: dim,
            }));
        }
        let len = n_features
            .checked_mul(dim)
            .ok_or_else(|| (VmStatus::InvalidArgument, "descriptor count overflows".into()))?;
        let data = std::slice::from_raw_parts(descriptors, len).to_vec();
        let query = ImageRecord::new(0, dim, data).map_err(core)?;
        let method = match method {
            m if m == VmMethod::B0 as u32 => Method::B0(b0_vocab),
            m if m == VmMethod::B1 as u32 => Method::B1,
            m if m == VmMethod::B2 as u32 => Method::B2,
            m if m == VmMethod::Bayes as u32 => Method::Bayes,
            m if m == VmMethod::RankAggregation as u32 => Method::RankAggregation,
            m => return Err((VmStatus::InvalidArgument, format!("unknown method {m}"))),
        };
        let scoring = ScoringMethod::new(method)
            .with_hamming(flags & VM_FLAG_HAMMING != 0)
            .with_burstiness(flags & VM_FLAG_BURSTINESS != 0);
        let ranked = score_query(&query, &index.0, &scoring, &cfg.0).map_err(core)?;
        *out = Box::into_raw(Box::new(VmResults(ranked)));
        Ok(())
    })
}

/// Number of ranked images, or 0 for a null handle.
///
/// # Safety
/// `results` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vm_results_len(results: *const VmResults) -> usize {
    results.as_ref().map_or(0, |r| r.0.len())
}

/// Entry `rank` (0 = best).
///
/// # Safety
/// `results` must be a live handle; `image_id` and `score` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn vm_results_get(
    results: *const VmResults,
    rank: usize,
    image_id: *mut u32,
    score: *mut f64,
) -> VmStatus {
    guard(|| {
        let r = results.as_ref().ok_or_else(|| null("results"))?;
        let id = out_ptr(image_id, "image_id")?;
        let s = out_ptr(score, "score")?;
        let &(i, v) = r.0.entries.get(rank).ok_or_else(|| {
            (
                VmStatus::OutOfRange,
                format!("rank {rank} beyond {} results", r.0.len()),
            )
        })?;
        *id = i;
        *s = v;
        Ok(())
    })
}

/// # Safety
/// `results` must come from [`vm_query`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vm_results_free(results: *mut VmResults) {
    if !results.is_null() {
        drop(Box::from_raw(results));
    }
}
