//! C ABI over the proposal pipeline: load a weights file (network or
//! template bank), score 96x96 patches, compute dense objectness grids, and
//! extract ranked proposals from full images.
//!
//! Every function returns a status code and reports detail through a
//! per-thread message fetched with [`spn_last_error`]. Handles returned by
//! [`spn_model_load`] are opaque and must be released with
//! [`spn_model_free`]. Image pixels are row-major single-channel f32,
//! normally in `[0, 1]`. Panics never cross the boundary; they surface as
//! `SPN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sonar_proposals::model::{LayerSpec, Network};
use sonar_proposals::proposals::{
    objectness_map_fcn, objectness_map_sliding, ranked_proposals, ObjectnessMap, RankingOrder,
};
use sonar_proposals::template::{tm_objectness, tm_objectness_map, TemplateBank};
use sonar_proposals::tensor::Tensor;
use sonar_proposals::weights::{load_weights, WeightsFile};
use sonar_proposals::Error;

const PATCH: usize = 96;

/// Result of every call in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// One proposal: a pixel-aligned box plus its objectness score.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpnProposal {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub score: f32,
}

enum ModelImpl {
    Network { patch: Network, full: Network },
    Templates(TemplateBank),
}

/// Opaque handle to a loaded scorer.
pub struct SpnModel {
    inner: ModelImpl,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> SpnStatus {
    match e {
        Error::InvalidInput { .. } | Error::SamplingExhausted { .. } => SpnStatus::InvalidArgument,
        Error::NonFinite { .. } | Error::Diverged { .. } => SpnStatus::Numeric,
        Error::Parse { .. } => SpnStatus::Parse,
        Error::Io { .. } => SpnStatus::Io,
    }
}

fn fail(e: Error) -> SpnStatus {
    let status = status_of(&e);
    set_error(e.to_string());
    status
}

/// Runs `f` with panics converted to a status instead of unwinding into C.
fn guarded(f: impl FnOnce() -> SpnStatus) -> SpnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            SpnStatus::Panic
        }
    }
}

fn null_arg(name: &str) -> SpnStatus {
    set_error(format!("{name} is null"));
    SpnStatus::NullArgument
}

fn image_tensor(pixels: *const f32, width: usize, height: usize) -> Result<Tensor, SpnStatus> {
    if width == 0 || height == 0 {
        set_error(format!("image extent {width}x{height} is empty"));
        return Err(SpnStatus::InvalidArgument);
    }
    let data = unsafe { std::slice::from_raw_parts(pixels, width * height) };
    Tensor::from_vec(&[1, height, width], data.to_vec()).map_err(|e| fail(e))
}

fn build_map(
    model: &SpnModel,
    image: &Tensor,
    stride: usize,
) -> Result<ObjectnessMap, SpnStatus> {
    let map = match &model.inner {
        // The converted network computes the whole stride-4 grid in one
        // pass; other strides fall back to window-by-window scoring.
        ModelImpl::Network { patch, full } => {
            if stride == 4 {
                objectness_map_fcn(full, image)
            } else {
                objectness_map_sliding(patch, image, stride)
            }
        }
        ModelImpl::Templates(bank) => tm_objectness_map(bank, image, stride),
    };
    map.map_err(fail)
}

/// Copies the most recent error message on this thread into `buf`
/// (NUL-terminated, truncated to `capacity`). Returns the full message
/// length in bytes, excluding the terminator; 0 means no error recorded.
/// Passing a null `buf` or zero `capacity` only queries the length.
#[no_mangle]
pub extern "C" fn spn_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Loads a weights file and returns a scorer handle in `out_model`. The
/// file may hold either a trained network or a template bank; both kinds
/// serve every scoring call in this interface.
#[no_mangle]
pub extern "C" fn spn_model_load(path: *const c_char, out_model: *mut *mut SpnModel) -> SpnStatus {
    if path.is_null() {
        return null_arg("path");
    }
    if out_model.is_null() {
        return null_arg("out_model");
    }
    guarded(|| {
        let raw = unsafe { CStr::from_ptr(path) };
        let path = match raw.to_str() {
            Ok(s) => Path::new(s),
            Err(_) => {
                set_error("path is not valid UTF-8");
                return SpnStatus::InvalidArgument;
            }
        };
        let inner = match load_weights(path) {
            Ok(WeightsFile::Network(patch)) => {
                let has_dense = patch
                    .spec
                    .layers
                    .iter()
                    .any(|l| matches!(l, LayerSpec::Dense { .. }));
                let full = if has_dense {
                    match patch.fc_to_conv() {
                        Ok(n) => n,
                        Err(e) => return fail(e),
                    }
                } else {
                    patch.clone()
                };
                ModelImpl::Network { patch, full }
            }
            Ok(WeightsFile::Templates(bank)) => ModelImpl::Templates(bank),
            Err(e) => return fail(e),
        };
        let handle = Box::new(SpnModel { inner });
        unsafe { *out_model = Box::into_raw(handle) };
        SpnStatus::Ok
    })
}

/// Releases a handle returned by [`spn_model_load`]. Null is a no-op.
#[no_mangle]
pub extern "C" fn spn_model_free(model: *mut SpnModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Writes 1 to `out_flag` if the handle wraps a template bank, 0 if it
/// wraps a network.
#[no_mangle]
pub extern "C" fn spn_model_is_template_bank(
    model: *const SpnModel,
    out_flag: *mut u8,
) -> SpnStatus {
    if model.is_null() {
        return null_arg("model");
    }
    if out_flag.is_null() {
        return null_arg("out_flag");
    }
    let model = unsafe { &*model };
    let flag = matches!(model.inner, ModelImpl::Templates(_));
    unsafe { *out_flag = flag as u8 };
    SpnStatus::Ok
}

/// Scores one 96x96 patch. `pixels` must hold exactly 96 * 96 row-major
/// values; the objectness lands in `out_score`.
#[no_mangle]
pub extern "C" fn spn_score_patch(
    model: *const SpnModel,
    pixels: *const f32,
    len: usize,
    out_score: *mut f32,
) -> SpnStatus {
    if model.is_null() {
        return null_arg("model");
    }
    if pixels.is_null() {
        return null_arg("pixels");
    }
    if out_score.is_null() {
        return null_arg("out_score");
    }
    guarded(|| {
        if len != PATCH * PATCH {
            set_error(format!(
                "patch length {len} does not match a {PATCH}x{PATCH} window"
            ));
            return SpnStatus::InvalidArgument;
        }
        let data = unsafe { std::slice::from_raw_parts(pixels, len) };
        let patch = match Tensor::from_vec(&[1, PATCH, PATCH], data.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        let model = unsafe { &*model };
        let score = match &model.inner {
            ModelImpl::Network { patch: net, .. } => net.forward_patch(&patch),
            ModelImpl::Templates(bank) => tm_objectness(bank, &patch).map(|v| v as f32),
        };
        match score {
            Ok(s) => {
                unsafe { *out_score = s };
                SpnStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Computes the dense objectness grid over all stride-aligned 96x96
/// windows of a `width` x `height` image. Grid dimensions land in
/// `out_rows` / `out_cols`; row-major values are copied into `out_values`
/// when it is non-null. Returns `SPN_STATUS_BUFFER_TOO_SMALL` when
/// `capacity` cannot hold the full grid (dimensions are still written, so
/// a null-values call sizes the buffer).
#[no_mangle]
pub extern "C" fn spn_objectness_grid(
    model: *const SpnModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    stride: usize,
    out_values: *mut f32,
    capacity: usize,
    out_rows: *mut usize,
    out_cols: *mut usize,
) -> SpnStatus {
    if model.is_null() {
        return null_arg("model");
    }
    if pixels.is_null() {
        return null_arg("pixels");
    }
    if out_rows.is_null() {
        return null_arg("out_rows");
    }
    if out_cols.is_null() {
        return null_arg("out_cols");
    }
    guarded(|| {
        let image = match image_tensor(pixels, width, height) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let model = unsafe { &*model };
        let map = match build_map(model, &image, stride) {
            Ok(m) => m,
            Err(status) => return status,
        };
        let (rows, cols) = map.grid_dims();
        unsafe {
            *out_rows = rows;
            *out_cols = cols;
        }
        if out_values.is_null() {
            return SpnStatus::Ok;
        }
        if capacity < rows * cols {
            set_error(format!(
                "grid needs {} values but the buffer holds {capacity}",
                rows * cols
            ));
            return SpnStatus::BufferTooSmall;
        }
        unsafe {
            std::ptr::copy_nonoverlapping(map.grid.data().as_ptr(), out_values, rows * cols);
        }
        SpnStatus::Ok
    })
}

/// Extracts the `top_k` highest-scoring windows and suppresses overlaps
/// above `overlap_threshold`. Survivors are copied into `out` in rank
/// order; the survivor count lands in `out_count`. A null `out` only
/// queries the count; `SPN_STATUS_BUFFER_TOO_SMALL` still sets `out_count`
/// so the caller can retry with a larger buffer.
#[no_mangle]
pub extern "C" fn spn_proposals(
    model: *const SpnModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    stride: usize,
    top_k: usize,
    overlap_threshold: f64,
    out: *mut SpnProposal,
    capacity: usize,
    out_count: *mut usize,
) -> SpnStatus {
    if model.is_null() {
        return null_arg("model");
    }
    if pixels.is_null() {
        return null_arg("pixels");
    }
    if out_count.is_null() {
        return null_arg("out_count");
    }
    guarded(|| {
        let image = match image_tensor(pixels, width, height) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let model = unsafe { &*model };
        let map = match build_map(model, &image, stride) {
            Ok(m) => m,
            Err(status) => return status,
        };
        let kept = match ranked_proposals(&map, top_k, overlap_threshold, RankingOrder::TruncateThenNms)
        {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        unsafe { *out_count = kept.len() };
        if out.is_null() {
            return SpnStatus::Ok;
        }
        if capacity < kept.len() {
            set_error(format!(
                "{} proposals survive but the buffer holds {capacity}",
                kept.len()
            ));
            return SpnStatus::BufferTooSmall;
        }
        for (i, p) in kept.iter().enumerate() {
            unsafe {
                *out.add(i) = SpnProposal {
                    x: p.window.x,
                    y: p.window.y,
                    w: p.window.w,
                    h: p.window.h,
                    score: p.score,
                };
            }
        }
        SpnStatus::Ok
    })
}
