//! C ABI over `ear-core`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns an [`EarStatus`]
//! and, on failure, records a message readable through
//! [`ear_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ear_core::ecgvf::{ConceptClassifier, MotifClassifier};
use ear_core::erasure::partition_windows;
use ear_core::image::{decode_image, PixelGrid};
use ear_core::model::{checkpoint, generate, ModelParams, Sampling, Vocab};
use ear_core::world::SyntheticWorld;
use ear_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// A synthetic concept world.
pub struct EarWorld {
    world: SyntheticWorld,
}

/// Trained weights bound to the world they were trained on.
pub struct EarModel {
    params: ModelParams,
    vocab: Vocab,
    world: SyntheticWorld,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: EarStatus, msg: impl Into<String>) -> EarStatus {
    set_error(msg);
    status
}

fn from_core(e: Error) -> EarStatus {
    let status = match &e {
        Error::Io { .. } => EarStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) | Error::Csv(_) | Error::Schema { .. } => {
            EarStatus::Format
        }
        _ => EarStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(body: impl FnOnce() -> Result<(), EarStatus>) -> EarStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => EarStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(EarStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, EarStatus> {
    if ptr.is_null() {
        return Err(fail(EarStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(EarStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn non_null<T>(ptr: *const T, what: &str) -> Result<(), EarStatus> {
    if ptr.is_null() {
        Err(fail(EarStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ear_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ear_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn ear_world_new(seed: u64, out: *mut *mut EarWorld) -> EarStatus {
    guard(|| {
        non_null(out, "out")?;
        let world = Box::new(EarWorld {
            world: SyntheticWorld::new(seed),
        });
        *out = Box::into_raw(world);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ear_world_load(path: *const c_char, out: *mut *mut EarWorld) -> EarStatus {
    guard(|| {
        let path = text(path, "path")?;
        non_null(out, "out")?;
        let world = SyntheticWorld::load(Path::new(path)).map_err(from_core)?;
        *out = Box::into_raw(Box::new(EarWorld { world }));
        Ok(())
    })
}

/// # Safety
/// `world` must come from `ear_world_new` or `ear_world_load`, or be null.
#[no_mangle]
pub unsafe extern "C" fn ear_world_free(world: *mut EarWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Index of a concept by name.
///
/// # Safety
/// Pointers must be valid; `name` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ear_world_concept_index(
    world: *const EarWorld,
    name: *const c_char,
    out_index: *mut usize,
) -> EarStatus {
    guard(|| {
        non_null(world, "world")?;
        let name = text(name, "name")?;
        non_null(out_index, "out_index")?;
        let idx = (*world)
            .world
            .concept_index(name)
            .ok_or_else(|| fail(EarStatus::InvalidArgument, format!("unknown concept `{name}`")))?;
        *out_index = idx;
        Ok(())
    })
}

/// Loads a checkpoint, rejecting one trained on a different world.
///
/// # Safety
/// `world` must be a live handle, `path` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ear_model_load(
    world: *const EarWorld,
    path: *const c_char,
    out: *mut *mut EarModel,
) -> EarStatus {
    guard(|| {
        non_null(world, "world")?;
        let path = text(path, "path")?;
        non_null(out, "out")?;
        let world = &(*world).world;
        let (params, meta) = checkpoint::load(Path::new(path)).map_err(from_core)?;
        if meta.world_hash != world.hash() {
            return Err(fail(
                EarStatus::InvalidArgument,
                format!("checkpoint belongs to world {}, not {}", meta.world_hash, world.hash()),
            ));
        }
        *out = Box::into_raw(Box::new(EarModel {
            params,
            vocab: Vocab::from_world(world),
            world: world.clone(),
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `ear_model_load`, or be null.
#[no_mangle]
pub unsafe extern "C" fn ear_model_free(model: *mut EarModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of image tokens the model generates per prompt, or 0 for null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ear_model_image_tokens(model: *const EarModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).params.config().image_tokens
    }
}

unsafe fn tokens_for<'a>(
    model: *const EarModel,
    prompt: *const c_char,
    temperature: f64,
    seed: u64,
) -> Result<(&'a EarModel, Vec<u32>), EarStatus> {
    non_null(model, "model")?;
    let m: &'a EarModel = &*model;
    let prompt = text(prompt, "prompt")?;
    let sampling = if temperature > 0.0 {
        Sampling::Temperature {
            tau: temperature,
            seed,
        }
    } else {
        Sampling::Greedy
    };
    let ids = m.vocab.tokenize(prompt).map_err(from_core)?;
    let tokens = generate(&m.params, &ids, m.params.config().image_tokens, sampling).map_err(from_core)?;
    Ok((m, tokens))
}

/// Generates image tokens for `prompt`. `temperature <= 0` decodes greedily.
/// Writes the token count to `out_len` even when `capacity` is too small.
///
/// # Safety
/// `out_tokens` must be writable for `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn ear_generate(
    model: *const EarModel,
    prompt: *const c_char,
    temperature: f64,
    seed: u64,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> EarStatus {
    guard(|| {
        non_null(out_len, "out_len")?;
        let (_, tokens) = tokens_for(model, prompt, temperature, seed)?;
        *out_len = tokens.len();
        if capacity < tokens.len() {
            return Err(fail(EarStatus::BufferTooSmall, format!("need {} tokens", tokens.len())));
        }
        non_null(out_tokens, "out_tokens")?;
        std::ptr::copy_nonoverlapping(tokens.as_ptr(), out_tokens, tokens.len());
        Ok(())
    })
}

/// Generates and decodes to RGB bytes, row-major, `side * side * 3` long.
///
/// # Safety
/// `out_rgb` must be writable for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn ear_render(
    model: *const EarModel,
    prompt: *const c_char,
    temperature: f64,
    seed: u64,
    out_rgb: *mut u8,
    capacity: usize,
    out_len: *mut usize,
    out_side: *mut usize,
) -> EarStatus {
    guard(|| {
        non_null(out_len, "out_len")?;
        non_null(out_side, "out_side")?;
        let (m, tokens) = tokens_for(model, prompt, temperature, seed)?;
        let image = decode_image(&tokens, &m.world.codebook).map_err(from_core)?;
        *out_len = image.data().len();
        *out_side = image.side();
        if capacity < image.data().len() {
            return Err(fail(EarStatus::BufferTooSmall, format!("need {} bytes", image.data().len())));
        }
        non_null(out_rgb, "out_rgb")?;
        std::ptr::copy_nonoverlapping(image.data().as_ptr(), out_rgb, image.data().len());
        Ok(())
    })
}

/// Runs the world's motif classifier on an RGB image.
///
/// # Safety
/// `rgb` must be readable for `len` bytes; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ear_classify(
    world: *const EarWorld,
    rgb: *const u8,
    len: usize,
    side: usize,
    concept: usize,
    out_present: *mut bool,
    out_score: *mut f64,
) -> EarStatus {
    guard(|| {
        non_null(world, "world")?;
        non_null(rgb, "rgb")?;
        non_null(out_present, "out_present")?;
        non_null(out_score, "out_score")?;
        let w = &(*world).world;
        if concept >= w.concepts.len() {
            return Err(fail(EarStatus::InvalidArgument, format!("concept index {concept} out of range")));
        }
        let data = std::slice::from_raw_parts(rgb, len).to_vec();
        let image = PixelGrid::new(side, data).map_err(from_core)?;
        let verdict = MotifClassifier::new(w).classify(&image, concept);
        *out_present = verdict.present;
        *out_score = verdict.score;
        Ok(())
    })
}

/// Splits `0..t` into windows of length `w`; writes `[start, end)` pairs to
/// `out_bounds` as `2 * count` values.
///
/// # Safety
/// `out_bounds` must be writable for `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn ear_partition_windows(
    t: usize,
    w: usize,
    out_bounds: *mut usize,
    capacity: usize,
    out_count: *mut usize,
) -> EarStatus {
    guard(|| {
        non_null(out_count, "out_count")?;
        let spec = partition_windows(t, w).map_err(from_core)?;
        *out_count = spec.len();
        if capacity < 2 * spec.len() {
            return Err(fail(EarStatus::BufferTooSmall, format!("need {} values", 2 * spec.len())));
        }
        non_null(out_bounds, "out_bounds")?;
        for (i, r) in spec.ranges().iter().enumerate() {
            *out_bounds.add(2 * i) = r.start;
            *out_bounds.add(2 * i + 1) = r.end;
        }
        Ok(())
    })
}
