//! C ABI for embedding voxel vectors and searching a cosine index from other
//! languages. Objects cross the boundary as opaque handles created and
//! destroyed here; every fallible call returns a status code and leaves a
//! human-readable message in thread-local storage for
//! [`specvox_last_error_message`]. The header in `include/specvox.h` is
//! regenerated from this file by `build.rs`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;

use specvox::backbone::{BackboneConfig, BackboneError, DftBackbone};
use specvox::projector::{KnnIndex, ProjectorError};
use specvox::training::{load_checkpoint, TrainError};

/// Result of every fallible call. Anything but OK also records a message
/// retrievable with `specvox_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecvoxStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument failed validation: wrong length, bad UTF-8, k = 0.
    InvalidArgument = 2,
    /// A model configuration could not be parsed or validated.
    BadConfig = 3,
    /// Files were missing, unreadable, or malformed.
    DataError = 4,
}

/// A loaded embedding model. Create with `specvox_model_load` or
/// `specvox_model_from_config_json`, destroy with `specvox_model_free`.
pub struct SpecvoxModel {
    inner: DftBackbone<f32>,
}

/// An exact cosine-similarity index over named rows. Create with
/// `specvox_index_open`, destroy with `specvox_index_free`.
pub struct SpecvoxIndex {
    inner: KnnIndex<f32>,
    /// Item ids re-encoded once so `specvox_index_id` can hand out borrowed
    /// C strings that live as long as the handle.
    ids: Vec<CString>,
    by_id: HashMap<String, usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: SpecvoxStatus, msg: impl std::fmt::Display) -> SpecvoxStatus {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).expect("interior NULs were stripped");
    });
    status
}

fn train_status(e: &TrainError) -> SpecvoxStatus {
    match e {
        TrainError::Backbone(BackboneError::BadConfig(_)) => SpecvoxStatus::BadConfig,
        _ => SpecvoxStatus::DataError,
    }
}

fn backbone_status(e: &BackboneError) -> SpecvoxStatus {
    match e {
        BackboneError::BadConfig(_) => SpecvoxStatus::BadConfig,
        BackboneError::InputLength { .. } => SpecvoxStatus::InvalidArgument,
        _ => SpecvoxStatus::DataError,
    }
}

fn index_status(e: &ProjectorError) -> SpecvoxStatus {
    match e {
        ProjectorError::BadK | ProjectorError::DimMismatch { .. } => {
            SpecvoxStatus::InvalidArgument
        }
        _ => SpecvoxStatus::DataError,
    }
}

/// Reads a required C-string argument, recording the failure on null or
/// invalid UTF-8.
///
/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn require_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, SpecvoxStatus> {
    if ptr.is_null() {
        return Err(fail(SpecvoxStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        fail(
            SpecvoxStatus::InvalidArgument,
            format!("{name} is not valid UTF-8"),
        )
    })
}

/// Crate version as a static NUL-terminated string; never freed.
#[no_mangle]
pub extern "C" fn specvox_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Message from the most recent failing call on this thread, or an empty
/// string if nothing failed yet. The pointer stays valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn specvox_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Model handle
// ---------------------------------------------------------------------------

/// Loads a trained model from a checkpoint directory and writes the new
/// handle to `out`.
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` a valid pointer; the handle
/// written to `out` must eventually go to `specvox_model_free`.
#[no_mangle]
pub unsafe extern "C" fn specvox_model_load(
    dir: *const c_char,
    out: *mut *mut SpecvoxModel,
) -> SpecvoxStatus {
    if out.is_null() {
        return fail(SpecvoxStatus::NullArgument, "out is null");
    }
    let dir = match require_str(dir, "dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match load_checkpoint::<f32>(Path::new(dir)) {
        Ok((inner, _)) => {
            *out = Box::into_raw(Box::new(SpecvoxModel { inner }));
            SpecvoxStatus::Ok
        }
        Err(e) => fail(train_status(&e), e),
    }
}

/// Builds a freshly initialized (untrained) model from a JSON configuration
/// string and writes the new handle to `out`.
///
/// # Safety
/// Same contract as `specvox_model_load`.
#[no_mangle]
pub unsafe extern "C" fn specvox_model_from_config_json(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut SpecvoxModel,
) -> SpecvoxStatus {
    if out.is_null() {
        return fail(SpecvoxStatus::NullArgument, "out is null");
    }
    let text = match require_str(config_json, "config_json") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let config: BackboneConfig = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => return fail(SpecvoxStatus::BadConfig, e),
    };
    match DftBackbone::<f32>::init(config, seed) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(SpecvoxModel { inner }));
            SpecvoxStatus::Ok
        }
        Err(e) => fail(backbone_status(&e), e),
    }
}

/// Frees a model handle; null is a no-op.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn specvox_model_free(model: *mut SpecvoxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Voxel vector length the model expects; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn specvox_model_input_len(model: *const SpecvoxModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.voxel_len)
}

/// Flattened embedding length the model produces; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn specvox_model_output_len(model: *const SpecvoxModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.inner.config.out_tokens * m.inner.config.embed_dim)
}

/// Number of learnable parameters; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn specvox_model_param_count(model: *const SpecvoxModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_count())
}

/// Embeds one voxel vector. `voxels` must hold `specvox_model_input_len`
/// floats and `out` must have room for `specvox_model_output_len`.
///
/// # Safety
/// `model` must be a live handle; `voxels` and `out` must point to arrays of
/// at least `voxel_len` and `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn specvox_model_embed(
    model: *const SpecvoxModel,
    voxels: *const f32,
    voxel_len: usize,
    out: *mut f32,
    out_len: usize,
) -> SpecvoxStatus {
    let Some(m) = model.as_ref() else {
        return fail(SpecvoxStatus::NullArgument, "model is null");
    };
    if voxels.is_null() || out.is_null() {
        return fail(SpecvoxStatus::NullArgument, "voxels or out is null");
    }
    let want_out = m.inner.config.out_tokens * m.inner.config.embed_dim;
    if out_len != want_out {
        return fail(
            SpecvoxStatus::InvalidArgument,
            format!("out_len {out_len} != embedding length {want_out}"),
        );
    }
    let x = std::slice::from_raw_parts(voxels, voxel_len);
    match m.inner.embed_voxels(x) {
        Ok(v) => {
            std::ptr::copy_nonoverlapping(v.as_ptr(), out, want_out);
            SpecvoxStatus::Ok
        }
        Err(e) => fail(backbone_status(&e), e),
    }
}

// ---------------------------------------------------------------------------
// Index handle
// ---------------------------------------------------------------------------

/// Opens an index snapshot directory and writes the new handle to `out`.
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` a valid pointer; the handle
/// written to `out` must eventually go to `specvox_index_free`.
#[no_mangle]
pub unsafe extern "C" fn specvox_index_open(
    dir: *const c_char,
    out: *mut *mut SpecvoxIndex,
) -> SpecvoxStatus {
    if out.is_null() {
        return fail(SpecvoxStatus::NullArgument, "out is null");
    }
    let dir = match require_str(dir, "dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let inner = match KnnIndex::<f32>::load(Path::new(dir)) {
        Ok(idx) => idx,
        Err(e) => return fail(index_status(&e), e),
    };
    let mut ids = Vec::with_capacity(inner.len());
    let mut by_id = HashMap::with_capacity(inner.len());
    for (pos, id) in inner.ids().iter().enumerate() {
        let Ok(c) = CString::new(id.clone()) else {
            return fail(
                SpecvoxStatus::DataError,
                format!("id at position {pos} contains a NUL byte"),
            );
        };
        ids.push(c);
        by_id.insert(id.clone(), pos);
    }
    *out = Box::into_raw(Box::new(SpecvoxIndex { inner, ids, by_id }));
    SpecvoxStatus::Ok
}

/// Frees an index handle; null is a no-op.
///
/// # Safety
/// `index` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn specvox_index_free(index: *mut SpecvoxIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of indexed items; 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn specvox_index_len(index: *const SpecvoxIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.len())
}

/// Row width of the index; 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn specvox_index_dim(index: *const SpecvoxIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.dim())
}

/// Id of the item at `position`, or null when out of range. The string is
/// borrowed from the handle and stays valid until `specvox_index_free`.
///
/// # Safety
/// `index` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn specvox_index_id(
    index: *const SpecvoxIndex,
    position: usize,
) -> *const c_char {
    index
        .as_ref()
        .and_then(|i| i.ids.get(position))
        .map_or(std::ptr::null(), |c| c.as_ptr())
}

/// Exact top-k cosine search. Writes up to `k` item positions and scores,
/// best first, and stores the number written in `out_count` (less than `k`
/// only when the index holds fewer items).
///
/// # Safety
/// `index` must be a live handle; `query` must point to `query_len` floats;
/// `out_positions` and `out_scores` must have room for `k` entries each;
/// `out_count` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specvox_index_search(
    index: *const SpecvoxIndex,
    query: *const f32,
    query_len: usize,
    k: usize,
    out_positions: *mut usize,
    out_scores: *mut f64,
    out_count: *mut usize,
) -> SpecvoxStatus {
    let Some(idx) = index.as_ref() else {
        return fail(SpecvoxStatus::NullArgument, "index is null");
    };
    if query.is_null() || out_positions.is_null() || out_scores.is_null() || out_count.is_null() {
        return fail(SpecvoxStatus::NullArgument, "an output pointer is null");
    }
    let q = std::slice::from_raw_parts(query, query_len);
    let hits = match idx.inner.search(q, k) {
        Ok(h) => h,
        Err(e) => return fail(index_status(&e), e),
    };
    for (i, hit) in hits.iter().enumerate() {
        *out_positions.add(i) = idx.by_id[&hit.id];
        *out_scores.add(i) = hit.score;
    }
    *out_count = hits.len();
    SpecvoxStatus::Ok
}
