// SPDX-License-Identifier: Apache-2.0

//! C ABI over `napmon`.
//!
//! Stores and monitors are exposed as opaque heap handles created by
//! `*_load`/`*_build` and released by the matching `*_free`. Every fallible
//! call returns a [`NapmonStatus`]; on failure a message is kept per thread
//! and can be read with [`napmon_last_error_message`]. Results are written
//! through caller-provided out pointers only on success.
//!
//! Patterns cross the boundary as packed little-endian `u64` words: bit `j`
//! lives in word `j / 64` at position `j % 64`, and bits past `bit_len` in
//! the last word must be zero.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use napmon::pattern::words_for;
use napmon::{BinaryPattern, LayerActivations, Monitor, NapError, NearestSearch, PatternStore};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NapmonStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    LengthMismatch = 3,
    Io = 4,
    Format = 5,
    NotFound = 6,
    Panic = 7,
}

/// A loaded pattern store.
pub struct NapmonStore {
    inner: PatternStore,
}

/// A loaded monitor bundle.
pub struct NapmonMonitor {
    inner: Monitor,
    names: Vec<CString>,
}

/// Outcome of [`napmon_monitor_judge`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NapmonVerdict {
    pub is_ood: bool,
    /// False under majority voting, which has no score.
    pub has_score: bool,
    pub score: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(NapmonStatus, String);

impl From<NapError> for Failure {
    fn from(e: NapError) -> Self {
        let status = match &e {
            NapError::LengthMismatch { .. } | NapError::QueryLength { .. } | NapError::ShapeMismatch { .. } => {
                NapmonStatus::LengthMismatch
            }
            NapError::Io(_) | NapError::DanglingStore(_) => NapmonStatus::Io,
            NapError::BadMagic
            | NapError::Truncated(_)
            | NapError::Corrupt(_)
            | NapError::UnsupportedVersion { .. }
            | NapError::Json(_)
            | NapError::DumpSizeMismatch { .. }
            | NapError::DumpTruncated { .. } => NapmonStatus::Format,
            NapError::LayerMissing(_) => NapmonStatus::NotFound,
            _ => NapmonStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: NapmonStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, translating errors and panics into a status and last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NapmonStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NapmonStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NapmonStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(NapmonStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(NapmonStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(NapmonStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(NapmonStatus::NullPointer, "output pointer is null"))
}

unsafe fn words_arg(words: *const u64, count: usize) -> Result<Vec<u64>, Failure> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if words.is_null() {
        return Err(fail(NapmonStatus::NullPointer, "pattern words are null"));
    }
    Ok(std::slice::from_raw_parts(words, count).to_vec())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn napmon_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn napmon_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a NAPS store file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn napmon_store_load(path: *const c_char, out: *mut *mut NapmonStore) -> NapmonStatus {
    guard(|| {
        let out = out_arg(out)?;
        let inner = napmon::load_store(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(NapmonStore { inner }));
        Ok(())
    })
}

/// Builds a store from `count` packed patterns of `bit_len` bits laid out
/// back to back, each `ceil(bit_len / 64)` words long.
///
/// # Safety
/// `words` must point to `count * ceil(bit_len / 64)` readable words; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn napmon_store_build(
    words: *const u64,
    count: usize,
    bit_len: usize,
    out: *mut *mut NapmonStore,
) -> NapmonStatus {
    guard(|| {
        let out = out_arg(out)?;
        let stride = words_for(bit_len);
        let total = count
            .checked_mul(stride)
            .ok_or_else(|| fail(NapmonStatus::InvalidArgument, "pattern buffer size overflows"))?;
        let all = words_arg(words, total)?;
        let patterns = (0..count)
            .map(|i| BinaryPattern::from_words(all[i * stride..(i + 1) * stride].to_vec(), bit_len))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fail(NapmonStatus::InvalidArgument, e.to_string()))?;
        let inner = PatternStore::build(&patterns, "")?;
        *out = Box::into_raw(Box::new(NapmonStore { inner }));
        Ok(())
    })
}

/// Writes the store as a NAPS file.
///
/// # Safety
/// `store` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn napmon_store_save(store: *const NapmonStore, path: *const c_char) -> NapmonStatus {
    guard(|| {
        let store = deref(store, "store")?;
        napmon::save_store(path_arg(path)?, &store.inner)?;
        Ok(())
    })
}

/// Releases a store handle. NULL is ignored.
///
/// # Safety
/// `store` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn napmon_store_free(store: *mut NapmonStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of distinct patterns.
///
/// # Safety
/// `store` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn napmon_store_len(store: *const NapmonStore, out: *mut usize) -> NapmonStatus {
    guard(|| {
        let store = deref(store, "store")?;
        *out_arg(out)? = store.inner.len();
        Ok(())
    })
}

/// Pattern length in bits.
///
/// # Safety
/// `store` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn napmon_store_bit_len(store: *const NapmonStore, out: *mut usize) -> NapmonStatus {
    guard(|| {
        let store = deref(store, "store")?;
        *out_arg(out)? = store.inner.bit_len();
        Ok(())
    })
}

/// Minimum Hamming distance from a packed query to the store, with the
/// lowest index attaining it.
///
/// # Safety
/// `store` must be a live handle; `words` must point to `word_count`
/// readable words; `out_distance` and `out_index` writable.
#[no_mangle]
pub unsafe extern "C" fn napmon_store_nearest(
    store: *const NapmonStore,
    words: *const u64,
    word_count: usize,
    out_distance: *mut u32,
    out_index: *mut usize,
) -> NapmonStatus {
    guard(|| {
        let store = deref(store, "store")?;
        let bit_len = store.inner.bit_len();
        if word_count != words_for(bit_len) {
            return Err(fail(
                NapmonStatus::LengthMismatch,
                format!("{word_count} query words for a {bit_len}-bit store"),
            ));
        }
        let q = BinaryPattern::from_words(words_arg(words, word_count)?, bit_len)
            .map_err(|e| fail(NapmonStatus::InvalidArgument, e.to_string()))?;
        let (d, i) = (out_arg(out_distance)?, out_arg(out_index)?);
        let hit = store.inner.nearest(&q)?;
        *d = hit.distance;
        *i = hit.index;
        Ok(())
    })
}

/// Hamming distance between two packed patterns of `word_count` words.
///
/// # Safety
/// `a` and `b` must each point to `word_count` readable words; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn napmon_hamming(
    a: *const u64,
    b: *const u64,
    word_count: usize,
    out: *mut u32,
) -> NapmonStatus {
    guard(|| {
        let (a, b) = (words_arg(a, word_count)?, words_arg(b, word_count)?);
        *out_arg(out)? = napmon::pattern::hamming_words(&a, &b);
        Ok(())
    })
}

/// Loads a monitor bundle directory into a new handle.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn napmon_monitor_load(dir: *const c_char, out: *mut *mut NapmonMonitor) -> NapmonStatus {
    guard(|| {
        let out = out_arg(out)?;
        let inner = napmon::load_monitor(path_arg(dir)?)?.monitor;
        let names = inner
            .config()
            .layers()
            .iter()
            .map(|l| CString::new(l.layer_name()))
            .collect::<Result<_, _>>()
            .map_err(|_| fail(NapmonStatus::Format, "layer name contains NUL"))?;
        *out = Box::into_raw(Box::new(NapmonMonitor { inner, names }));
        Ok(())
    })
}

/// Releases a monitor handle. NULL is ignored.
///
/// # Safety
/// `monitor` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn napmon_monitor_free(monitor: *mut NapmonMonitor) {
    if !monitor.is_null() {
        drop(Box::from_raw(monitor));
    }
}

/// Number of monitored layers (`k`).
///
/// # Safety
/// `monitor` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn napmon_monitor_layer_count(monitor: *const NapmonMonitor, out: *mut usize) -> NapmonStatus {
    guard(|| {
        let m = deref(monitor, "monitor")?;
        *out_arg(out)? = m.names.len();
        Ok(())
    })
}

/// Name and expected value count of monitored layer `index`. The name
/// pointer lives as long as the handle.
///
/// # Safety
/// `monitor` must be a live handle; `out_name` and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn napmon_monitor_layer(
    monitor: *const NapmonMonitor,
    index: usize,
    out_name: *mut *const c_char,
    out_len: *mut usize,
) -> NapmonStatus {
    guard(|| {
        let m = deref(monitor, "monitor")?;
        let (name, len) = (out_arg(out_name)?, out_arg(out_len)?);
        let cal = m.inner.config().layers().get(index).ok_or_else(|| {
            fail(
                NapmonStatus::InvalidArgument,
                format!("layer index {index} out of range for {} layers", m.names.len()),
            )
        })?;
        *name = m.names[index].as_ptr();
        *len = cal.spec.element_count();
        Ok(())
    })
}

struct Rows<'a> {
    names: &'a [CString],
    rows: Vec<&'a [f32]>,
}

impl LayerActivations for Rows<'_> {
    fn layer(&self, name: &str) -> Option<&[f32]> {
        let i = self.names.iter().position(|n| n.as_bytes() == name.as_bytes())?;
        Some(self.rows[i])
    }
}

/// Judges one sample. `values[i]` holds `lens[i]` activations of monitored
/// layer `i`, in the order reported by [`napmon_monitor_layer`].
/// `out_distances` may be NULL; otherwise it receives `layer_count`
/// per-layer nearest distances.
///
/// # Safety
/// `values` and `lens` must point to `layer_count` entries, each
/// `values[i]` to `lens[i]` readable floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn napmon_monitor_judge(
    monitor: *const NapmonMonitor,
    values: *const *const f32,
    lens: *const usize,
    layer_count: usize,
    out: *mut NapmonVerdict,
    out_distances: *mut u32,
) -> NapmonStatus {
    guard(|| {
        let m = deref(monitor, "monitor")?;
        let out = out_arg(out)?;
        if layer_count != m.names.len() {
            return Err(fail(
                NapmonStatus::LengthMismatch,
                format!("{layer_count} layers supplied to a {}-layer monitor", m.names.len()),
            ));
        }
        if values.is_null() || lens.is_null() {
            return Err(fail(NapmonStatus::NullPointer, "layer arrays are null"));
        }
        let ptrs = std::slice::from_raw_parts(values, layer_count);
        let lens = std::slice::from_raw_parts(lens, layer_count);
        let mut rows = Vec::with_capacity(layer_count);
        for (i, (&p, &n)) in ptrs.iter().zip(lens).enumerate() {
            if p.is_null() && n > 0 {
                return Err(fail(NapmonStatus::NullPointer, format!("values of layer {i} are null")));
            }
            rows.push(if n == 0 {
                &[][..]
            } else {
                std::slice::from_raw_parts(p, n)
            });
        }
        let sample = Rows { names: &m.names, rows };
        let distances = m.inner.distances(&sample)?;
        let v = m.inner.decide(&distances)?;
        *out = NapmonVerdict {
            is_ood: v.is_ood,
            has_score: v.score.is_some(),
            score: v.score.unwrap_or(0.0),
        };
        if !out_distances.is_null() {
            std::slice::from_raw_parts_mut(out_distances, layer_count).copy_from_slice(&distances);
        }
        Ok(())
    })
}
