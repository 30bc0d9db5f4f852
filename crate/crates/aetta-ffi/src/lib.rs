//! C ABI for the adaptation engine: opaque handles, status codes, and a
//! generated header (see `include/aetta.h`, regenerated by the build script).
//!
//! Ownership rules: every `*_new`/`*_load` hands the caller an owned handle
//! that must go back through the matching `*_free`; strings returned through
//! `char**` out-params are freed with `aetta_string_free`. All functions are
//! safe to call from multiple threads as long as each handle stays on one
//! thread at a time; the per-thread last-error message backs
//! `aetta_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use aetta::config::{harness_config, RawConfig};
use aetta::data::LabeledSample;
use aetta::engine::TtaEngine;
use aetta::error::Error;
use aetta::image::Image;
use aetta::vit::VitModel;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AettaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Filesystem problem; details via `aetta_last_error_message`.
    Io = 3,
    /// Malformed config, checkpoint, or policy text.
    Parse = 4,
    /// A configuration constraint was violated.
    InvalidConfig = 5,
    /// An input buffer had the wrong length.
    ShapeMismatch = 6,
    /// Attention collapsed onto special tokens or the episode failed.
    Degenerate = 7,
    /// Anything else; details via `aetta_last_error_message`.
    Internal = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let cstring = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error").expect("static string"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

fn status_of(err: &Error) -> AettaStatus {
    match err {
        Error::Io { .. } => AettaStatus::Io,
        Error::Format { .. } | Error::ConfigParse { .. } | Error::Json(_) => AettaStatus::Parse,
        Error::InvalidConfig { .. } | Error::UnknownConfigKey { .. } => AettaStatus::InvalidConfig,
        Error::ShapeMismatch { .. } => AettaStatus::ShapeMismatch,
        Error::DegenerateAttention { .. } => AettaStatus::Degenerate,
        _ => AettaStatus::Internal,
    }
}

fn fail(err: &Error) -> AettaStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Opaque: a loaded model plus its pristine snapshot.
pub struct AettaModel {
    model: VitModel,
}

/// Opaque: an adaptation stream (model replica, policy, optimizer state,
/// and the last episode record).
pub struct AettaEngine {
    engine: TtaEngine,
    sample_counter: u64,
    last_record_json: Option<CString>,
}

unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, AettaStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(AettaStatus::NullArgument);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        AettaStatus::InvalidUtf8
    })
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn aetta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a model checkpoint from `path` into a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aetta_model_load(
    path: *const c_char,
    out: *mut *mut AettaModel,
) -> AettaStatus {
    if out.is_null() {
        set_error("null out pointer");
        return AettaStatus::NullArgument;
    }
    let path = match unsafe { utf8_arg(path) } {
        Ok(p) => p,
        Err(status) => return status,
    };
    match VitModel::load_checkpoint(PathBuf::from(path)) {
        Ok(model) => {
            unsafe { *out = Box::into_raw(Box::new(AettaModel { model })) };
            AettaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Initialize a fresh model from flat `key = value` config text (the same
/// `model.*` keys the CLI accepts; missing keys use the toy defaults).
///
/// # Safety
/// `config_text` must be a valid NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn aetta_model_from_config(
    config_text: *const c_char,
    out: *mut *mut AettaModel,
) -> AettaStatus {
    if out.is_null() {
        set_error("null out pointer");
        return AettaStatus::NullArgument;
    }
    let text = match unsafe { utf8_arg(config_text) } {
        Ok(t) => t,
        Err(status) => return status,
    };
    let model = RawConfig::parse(text)
        .and_then(|raw| harness_config(&raw))
        .and_then(|cfg| VitModel::new(cfg.model));
    match model {
        Ok(model) => {
            unsafe { *out = Box::into_raw(Box::new(AettaModel { model })) };
            AettaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Save the model to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle from this library; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn aetta_model_save(
    model: *const AettaModel,
    path: *const c_char,
) -> AettaStatus {
    if model.is_null() {
        set_error("null model handle");
        return AettaStatus::NullArgument;
    }
    let path = match unsafe { utf8_arg(path) } {
        Ok(p) => p,
        Err(status) => return status,
    };
    match unsafe { &*model }.model.save_checkpoint(PathBuf::from(path)) {
        Ok(()) => AettaStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// # Safety
/// `model` must be a handle from this library, not yet freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn aetta_model_free(model: *mut AettaModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Pixel count one image buffer must carry (channels × height × width).
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aetta_model_image_len(
    model: *const AettaModel,
    out: *mut usize,
) -> AettaStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return AettaStatus::NullArgument;
    }
    let cfg = unsafe { &*model }.model.config();
    unsafe { *out = cfg.channels * cfg.image_size * cfg.image_size };
    AettaStatus::Ok
}

/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aetta_model_num_classes(
    model: *const AettaModel,
    out: *mut usize,
) -> AettaStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return AettaStatus::NullArgument;
    }
    unsafe { *out = (*model).model.config().num_classes };
    AettaStatus::Ok
}

fn image_from(model: &VitModel, pixels: &[f64]) -> Result<Image, Error> {
    let cfg = model.config();
    let expected = cfg.channels * cfg.image_size * cfg.image_size;
    if pixels.len() != expected {
        return Err(Error::ShapeMismatch {
            op: "image buffer",
            lhs: vec![pixels.len()],
            rhs: vec![expected],
        });
    }
    Ok(Image {
        channels: cfg.channels,
        height: cfg.image_size,
        width: cfg.image_size,
        data: pixels.to_vec(),
    })
}

/// Classify one image without adaptation. `logits_out` may be null; when
/// non-null it must hold `num_classes` doubles.
///
/// # Safety
/// `model` must be a live handle; `pixels` must point to `pixels_len`
/// doubles; `out_class` must be valid; `logits_out` null or `logits_len` long.
#[no_mangle]
pub unsafe extern "C" fn aetta_model_predict(
    model: *const AettaModel,
    pixels: *const f64,
    pixels_len: usize,
    out_class: *mut usize,
    logits_out: *mut f64,
    logits_len: usize,
) -> AettaStatus {
    if model.is_null() || pixels.is_null() || out_class.is_null() {
        set_error("null argument");
        return AettaStatus::NullArgument;
    }
    let model = unsafe { &(*model).model };
    let pixels = unsafe { std::slice::from_raw_parts(pixels, pixels_len) };
    let image = match image_from(model, pixels) {
        Ok(img) => img,
        Err(e) => return fail(&e),
    };
    match model.forward(&image, model.config().final_layer()) {
        Ok((prediction, _)) => {
            unsafe { *out_class = prediction.predicted_class };
            if !logits_out.is_null() {
                if logits_len != prediction.logits.len() {
                    set_error("logits buffer has the wrong length");
                    return AettaStatus::ShapeMismatch;
                }
                let out = unsafe { std::slice::from_raw_parts_mut(logits_out, logits_len) };
                out.copy_from_slice(&prediction.logits);
            }
            AettaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Create an adaptation engine bound to a replica of `model`.
/// `policy_text` uses the CLI's flat `policy.*` keys; pass null or an empty
/// string for the defaults (Adam lr 1e-4, moments carried over).
///
/// # Safety
/// `model` must be a live handle; `out` valid; `policy_text` null or valid.
#[no_mangle]
pub unsafe extern "C" fn aetta_engine_new(
    model: *const AettaModel,
    policy_text: *const c_char,
    out: *mut *mut AettaEngine,
) -> AettaStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return AettaStatus::NullArgument;
    }
    let policy = if policy_text.is_null() {
        Ok(aetta::AdaptationPolicy::default())
    } else {
        match unsafe { utf8_arg(policy_text) } {
            Ok(text) => RawConfig::parse(text)
                .and_then(|raw| harness_config(&raw))
                .map(|cfg| cfg.policy),
            Err(status) => return status,
        }
    };
    let policy = match policy {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    match TtaEngine::new(unsafe { &*model }.model.clone(), policy) {
        Ok(engine) => {
            unsafe {
                *out = Box::into_raw(Box::new(AettaEngine {
                    engine,
                    sample_counter: 0,
                    last_record_json: None,
                }))
            };
            AettaStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Run one adaptation episode on an unlabeled image and return the adapted
/// prediction. The full episode record is available afterwards through
/// `aetta_engine_last_episode_json`.
///
/// # Safety
/// `engine` must be a live handle; `pixels` must point to `pixels_len`
/// doubles; `out_class` must be valid.
#[no_mangle]
pub unsafe extern "C" fn aetta_engine_adapt_predict(
    engine: *mut AettaEngine,
    pixels: *const f64,
    pixels_len: usize,
    out_class: *mut usize,
) -> AettaStatus {
    if engine.is_null() || pixels.is_null() || out_class.is_null() {
        set_error("null argument");
        return AettaStatus::NullArgument;
    }
    let state = unsafe { &mut *engine };
    let pixels = unsafe { std::slice::from_raw_parts(pixels, pixels_len) };
    let image = match image_from(state.engine.model(), pixels) {
        Ok(img) => img,
        Err(e) => return fail(&e),
    };
    let sample = LabeledSample {
        id: state.sample_counter,
        label: 0, // unlabeled at the FFI boundary; accuracy fields are unused
        image,
    };
    state.sample_counter += 1;
    match state.engine.adapt_and_predict(&sample) {
        Ok(record) => {
            unsafe { *out_class = record.predicted_class };
            let failed = record.failed;
            state.last_record_json = serde_json::to_string(&record)
                .ok()
                .and_then(|s| CString::new(s).ok());
            if failed {
                set_error("episode failed (non-finite loss or degenerate attention)");
                AettaStatus::Degenerate
            } else {
                AettaStatus::Ok
            }
        }
        Err(e) => fail(&e),
    }
}

/// JSON of the most recent episode record, or an error if none exists yet.
/// The returned string is owned by the caller; free with `aetta_string_free`.
///
/// # Safety
/// `engine` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aetta_engine_last_episode_json(
    engine: *const AettaEngine,
    out: *mut *mut c_char,
) -> AettaStatus {
    if engine.is_null() || out.is_null() {
        set_error("null argument");
        return AettaStatus::NullArgument;
    }
    match unsafe { &*engine }.last_record_json.as_ref() {
        Some(json) => {
            unsafe { *out = json.clone().into_raw() };
            AettaStatus::Ok
        }
        None => {
            set_error("no episode has run on this engine");
            AettaStatus::Internal
        }
    }
}

/// Reset the engine: weights back to the snapshot, optimizer state dropped.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn aetta_engine_reset(engine: *mut AettaEngine) -> AettaStatus {
    if engine.is_null() {
        set_error("null engine handle");
        return AettaStatus::NullArgument;
    }
    match unsafe { &mut *engine }.engine.reset_all() {
        Ok(()) => AettaStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// # Safety
/// `engine` must be a handle from this library, not yet freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn aetta_engine_free(engine: *mut AettaEngine) {
    if !engine.is_null() {
        drop(unsafe { Box::from_raw(engine) });
    }
}

/// Message for the most recent error on this thread, or null when none.
/// The returned string is owned by the caller; free with `aetta_string_free`.
#[no_mangle]
pub extern "C" fn aetta_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// # Safety
/// `s` must have been returned by this library and not yet freed; null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn aetta_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
