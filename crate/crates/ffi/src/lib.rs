//! C ABI over `vltp-core`: the cost model, top-k pruning masks, patch
//! labels and inference with a trained checkpoint.
//!
//! # Safety
//!
//! Every function checks its pointers for null and returns
//! [`VltpStatus::NullPointer`] instead of dereferencing them. Non-null
//! pointers must be valid for the stated number of elements for the duration
//! of the call. Handles are created by a `*_new`/`*_load` function and must be
//! released exactly once with the matching `*_free`. A failed call leaves a
//! message retrievable with [`vltp_last_error`] on the same thread.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use vltp_core::costmodel::{self, CostConfig};
use vltp_core::objectives::derive_gt_patch_labels;
use vltp_core::params::ParamStore;
use vltp_core::pipeline::{self, CheckpointMeta};
use vltp_core::prune::{self, PruneSchedule};
use vltp_core::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VltpStatus {
    Ok = 0,
    NullPointer = 1,
    /// A rate, size, schedule or task was rejected.
    InvalidArgument = 2,
    /// A file could not be read or parsed.
    Io = 3,
    /// A caller-provided output buffer is too small.
    BufferTooSmall = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Opaque cost model.
pub struct VltpCostModel {
    cfg: CostConfig,
}

/// Opaque trained model: parameters plus their configuration.
pub struct VltpModel {
    params: ParamStore,
    meta: CheckpointMeta,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VltpStatus {
    match e {
        Error::Io { .. } | Error::Json { .. } | Error::Format(_) | Error::MissingParam(_) | Error::ParamShape { .. } => VltpStatus::Io,
        _ => VltpStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (VltpStatus, String)>) -> VltpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VltpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            VltpStatus::Internal
        }
    }
}

fn core_err(e: Error) -> (VltpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (VltpStatus, String) {
    (VltpStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (VltpStatus, String) {
    (VltpStatus::InvalidArgument, msg.into())
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (VltpStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (VltpStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn schedule(boundaries: *const usize, rates: *const f32, len: usize) -> Result<PruneSchedule, (VltpStatus, String)> {
    let b = input(boundaries, len, "boundaries")?;
    let r = input(rates, len, "rates")?;
    Ok(PruneSchedule::new(b.to_vec(), r.to_vec()))
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn vltp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vltp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Cost model with every layer costing `baseline_gflops / layers`.
#[no_mangle]
pub unsafe extern "C" fn vltp_cost_model_calibrated(layers: usize, baseline_gflops: f64, out: *mut *mut VltpCostModel) -> VltpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = CostConfig::calibrated(layers, baseline_gflops).map_err(core_err)?;
        *out = Box::into_raw(Box::new(VltpCostModel { cfg }));
        Ok(())
    })
}

/// Cost model counting per-layer FLOPs analytically at the retained token
/// count.
#[no_mangle]
pub unsafe extern "C" fn vltp_cost_model_analytic(
    layers: usize,
    n_tokens: usize,
    embed_dim: usize,
    heads: usize,
    ffn_mult: usize,
    out: *mut *mut VltpCostModel,
) -> VltpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if layers == 0 || n_tokens == 0 || embed_dim == 0 || heads == 0 {
            return Err(invalid("layers, n_tokens, embed_dim and heads must be positive"));
        }
        let cfg = CostConfig::analytic(layers, n_tokens, embed_dim, heads, ffn_mult);
        *out = Box::into_raw(Box::new(VltpCostModel { cfg }));
        Ok(())
    })
}

/// Adds `cost` once per pruning stage. A negative `cost` turns the
/// overhead off.
#[no_mangle]
pub unsafe extern "C" fn vltp_cost_model_set_decoder_overhead(model: *mut VltpCostModel, cost: f64) -> VltpStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if cost.is_nan() {
            return Err(invalid("decoder cost is NaN"));
        }
        if cost < 0.0 {
            m.cfg.include_decoder_overhead = false;
        } else {
            m.cfg = m.cfg.clone().with_decoder_overhead(cost);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn vltp_cost_model_free(model: *mut VltpCostModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Estimated cost of the schedule given by `len` boundaries and rates in
/// `[0, 1)`. An empty schedule (`len == 0`) gives the unpruned cost.
#[no_mangle]
pub unsafe extern "C" fn vltp_flops_estimate(
    model: *const VltpCostModel,
    boundaries: *const usize,
    rates: *const f32,
    len: usize,
    out: *mut f64,
) -> VltpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = schedule(boundaries, rates, len)?;
        *out = costmodel::flops_estimate(&s, &m.cfg).map_err(core_err)?;
        Ok(())
    })
}

/// Number of tokens kept out of `n` at pruning rate `rate`.
#[no_mangle]
pub unsafe extern "C" fn vltp_retained_count(n: usize, rate: f32, out: *mut usize) -> VltpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = prune::retained_count(n, rate).map_err(core_err)?;
        Ok(())
    })
}

/// Writes 1 for each of the `n` tokens kept at rate `rate` and 0 for the
/// frozen ones. Ties go to the lower index.
#[no_mangle]
pub unsafe extern "C" fn vltp_topk_prune_mask(scores: *const f32, n: usize, rate: f32, out_mask: *mut u8) -> VltpStatus {
    guard(|| {
        let s = input(scores, n, "scores")?;
        let out = output(out_mask, n, "out_mask")?;
        if n == 0 {
            return Err(invalid("no scores"));
        }
        let mask = prune::topk_prune_mask(s, rate).map_err(core_err)?;
        for (o, m) in out.iter_mut().zip(mask) {
            *o = m as u8;
        }
        Ok(())
    })
}

/// Patch labels of a row-major `height × width` mask: `out_labels` receives
/// `(height / patch) × (width / patch)` values, 1 where the patch overlaps
/// the mask.
#[no_mangle]
pub unsafe extern "C" fn vltp_patch_labels(
    mask: *const f32,
    height: usize,
    width: usize,
    patch: usize,
    out_labels: *mut f32,
    out_len: usize,
) -> VltpStatus {
    guard(|| {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(invalid(format!("{height}×{width} is not divisible into {patch}×{patch} patches")));
        }
        let need = (height / patch) * (width / patch);
        if out_len < need {
            return Err((VltpStatus::BufferTooSmall, format!("out_labels holds {out_len}, need {need}")));
        }
        let m = input(mask, height * width, "mask")?;
        let out = output(out_labels, need, "out_labels")?;
        let t = Tensor::new(vec![height, width], m.to_vec()).map_err(core_err)?;
        out.copy_from_slice(derive_gt_patch_labels(&t, patch).map_err(core_err)?.data());
        Ok(())
    })
}

/// Loads a checkpoint and its `.json` sidecar.
#[no_mangle]
pub unsafe extern "C" fn vltp_model_load(path: *const c_char, out: *mut *mut VltpModel) -> VltpStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let (params, meta) = pipeline::load_checkpoint(Path::new(path)).map_err(core_err)?;
        *out = Box::into_raw(Box::new(VltpModel { params, meta }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn vltp_model_free(model: *mut VltpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input image height and width expected by the model.
#[no_mangle]
pub unsafe extern "C" fn vltp_model_image_size(model: *const VltpModel, out_height: *mut usize, out_width: *mut usize) -> VltpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_height.is_null() || out_width.is_null() {
            return Err(null("out_height or out_width"));
        }
        *out_height = m.meta.model.vit.image_height;
        *out_width = m.meta.model.vit.image_width;
        Ok(())
    })
}

/// Segments a channel-major `3 × H × W` image for `task` under hard top-k
/// pruning with the given schedule. Writes `H × W` mask logits; positive
/// means foreground.
#[no_mangle]
pub unsafe extern "C" fn vltp_model_segment(
    model: *const VltpModel,
    image: *const f32,
    image_len: usize,
    task: usize,
    boundaries: *const usize,
    rates: *const f32,
    schedule_len: usize,
    out_logits: *mut f32,
    out_len: usize,
) -> VltpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let vit = &m.meta.model.vit;
        let (h, w) = (vit.image_height, vit.image_width);
        if image_len != 3 * h * w {
            return Err(invalid(format!("image has {image_len} values, model expects 3×{h}×{w}")));
        }
        if out_len < h * w {
            return Err((VltpStatus::BufferTooSmall, format!("out_logits holds {out_len}, need {}", h * w)));
        }
        let img = input(image, image_len, "image")?;
        let out = output(out_logits, h * w, "out_logits")?;
        let mut s = schedule(boundaries, rates, schedule_len)?;
        s.alpha = m.meta.schedule.alpha;
        let t = Tensor::new(vec![3, h, w], img.to_vec()).map_err(core_err)?;
        let pred = pipeline::predict(&m.params, &m.meta.model, &t, task, &s).map_err(core_err)?;
        out.copy_from_slice(pred.logits.data());
        Ok(())
    })
}
