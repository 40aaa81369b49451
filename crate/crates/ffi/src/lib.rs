//! C interface to the motility3d engine.
//!
//! Every function returns an [`M3dStatus`]. On failure the message is kept per thread and can be
//! read with [`m3d_last_error`] until the next failing call on that thread. Handles are opaque and
//! must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use motility3d::data::{load_clip, FrameSpec};
use motility3d::models::{ArchId, ArchSpec, ModelParams, NUM_CLASSES};
use motility3d::optim::{class_weights, one_cycle_lr, OneCycleConfig};
use motility3d::train::{load_checkpoint, save_checkpoint, CheckpointInfo, Seeds};
use motility3d::{Error, ErrorKind, Tensor};

/// Result code of every `m3d_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum M3dStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// Bad argument, unknown architecture, wrong shape.
    InvalidArgument = 2,
    /// Unreadable or malformed input files.
    Data = 3,
    /// Checkpoint could not be read or does not match its architecture.
    Checkpoint = 4,
    /// A computation produced NaN or infinity.
    Numeric = 5,
    /// Internal panic; the handle involved should be freed.
    Internal = 6,
}

/// Trained or freshly initialized network.
pub struct M3dModel {
    model: ModelParams<f32>,
    info: Option<CheckpointInfo>,
    seed: u64,
}

/// Grayscale clip of shape (1, T, H, W) with values in [0, 1].
pub struct M3dClip {
    data: Tensor<f32>,
}

/// Output of [`m3d_model_predict`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct M3dPrediction {
    /// 0 progressive, 1 non-progressive, 2 immotile.
    pub class_index: u32,
    pub probabilities: [f64; 3],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> M3dStatus {
    match e {
        Error::CheckpointFormat(_) | Error::CheckpointIntegrity(_) | Error::CheckpointVersion { .. } => {
            M3dStatus::Checkpoint
        }
        _ => match e.kind() {
            ErrorKind::Usage => M3dStatus::InvalidArgument,
            ErrorKind::Data => M3dStatus::Data,
            ErrorKind::Numeric => M3dStatus::Numeric,
        },
    }
}

enum Fail {
    Null(&'static str),
    Invalid(String),
    Engine(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> M3dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => M3dStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            M3dStatus::NullPointer
        }
        Ok(Err(Fail::Invalid(msg))) => {
            set_error(msg);
            M3dStatus::InvalidArgument
        }
        Ok(Err(Fail::Engine(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            M3dStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn model_ref<'a>(p: *const M3dModel) -> Result<&'a M3dModel, Fail> {
    p.as_ref().ok_or(Fail::Null("model"))
}

/// Message of the last failed call on this thread, or NULL. Owned by the library.
#[no_mangle]
pub extern "C" fn m3d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn m3d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Randomly initialized model. `arch` is one of `resnet18_3d`, `resnet18_3d_tab`, `resnet34_3d_tab`.
///
/// # Safety
/// `arch` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_build(
    arch: *const c_char,
    seed: u64,
    out: *mut *mut M3dModel,
) -> M3dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let arch: ArchId = str_arg(arch, "arch")?.parse()?;
        let model = ModelParams::build(ArchSpec::new(arch), seed)?;
        *out = Box::into_raw(Box::new(M3dModel {
            model,
            info: None,
            seed,
        }));
        Ok(())
    })
}

/// Model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_load(path: *const c_char, out: *mut *mut M3dModel) -> M3dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let (model, info) = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(M3dModel {
            model,
            seed: info.seeds.init,
            info: Some(info),
        }));
        Ok(())
    })
}

/// Writes the model as a checkpoint. Models that were built rather than loaded are saved with
/// epoch 0, uniform class weights, no validation score and the default frame settings.
///
/// # Safety
/// `model` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_save(model: *const M3dModel, path: *const c_char) -> M3dStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let info = m.info.clone().unwrap_or_else(|| CheckpointInfo {
            arch: m.model.spec().arch,
            seeds: Seeds {
                init: m.seed,
                ..Seeds::default()
            },
            epoch: 0,
            tabular_stats: None,
            class_weights: vec![1.0; NUM_CLASSES],
            split_sizes: motility3d::data::SPLIT_SIZES,
            frames: FrameSpec::default(),
            best_val_loss: f64::MAX,
            best_val_acc: 0.0,
        });
        save_checkpoint(&path, &m.model, &info)?;
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_free(model: *mut M3dModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_param_count(model: *const M3dModel, out: *mut u64) -> M3dStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_arg(out, "out")? = m.model.param_count() as u64;
        Ok(())
    })
}

/// 1 when predictions need a row of 19 standardized tabular features, else 0.
///
/// # Safety
/// `model` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_uses_tabular(model: *const M3dModel, out: *mut i32) -> M3dStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_arg(out, "out")? = i32::from(m.model.spec().uses_tabular);
        Ok(())
    })
}

/// Architecture name of the model as a static string, or NULL for a NULL model.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_arch(model: *const M3dModel) -> *const c_char {
    match model.as_ref().map(|m| m.model.spec().arch) {
        Some(ArchId::Resnet18) => c"resnet18_3d".as_ptr(),
        Some(ArchId::Resnet18Tab) => c"resnet18_3d_tab".as_ptr(),
        Some(ArchId::Resnet34Tab) => c"resnet34_3d_tab".as_ptr(),
        None => std::ptr::null(),
    }
}

/// Reads `frame_count` frames from a directory of binary PGM/PPM files. With `height` and
/// `width` both 0 the native frame size is kept; otherwise frames must match it exactly.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn m3d_clip_load(
    dir: *const c_char,
    frame_count: usize,
    height: usize,
    width: usize,
    out: *mut *mut M3dClip,
) -> M3dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let size = match (height, width) {
            (0, 0) => None,
            (0, _) | (_, 0) => return Err(Fail::Invalid("height and width must both be 0 or both positive".into())),
            (h, w) => Some([h, w]),
        };
        let spec = FrameSpec {
            count: frame_count,
            size,
            ..FrameSpec::default()
        };
        let data = load_clip(&dir, &spec)?;
        *out = Box::into_raw(Box::new(M3dClip { data }));
        Ok(())
    })
}

/// Clip from `t * h * w` caller-owned values, copied.
///
/// # Safety
/// `values` must point to `t * h * w` floats and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn m3d_clip_from_values(
    values: *const f32,
    t: usize,
    h: usize,
    w: usize,
    out: *mut *mut M3dClip,
) -> M3dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        if values.is_null() {
            return Err(Fail::Null("values"));
        }
        let n = t
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| Fail::Invalid("clip size overflows".into()))?;
        let data = std::slice::from_raw_parts(values, n).to_vec();
        let data = Tensor::new(vec![1, t, h, w], data)?;
        *out = Box::into_raw(Box::new(M3dClip { data }));
        Ok(())
    })
}

/// Writes `[1, T, H, W]` into `shape`.
///
/// # Safety
/// `clip` must come from this library and `shape` point to 4 writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn m3d_clip_shape(clip: *const M3dClip, shape: *mut usize) -> M3dStatus {
    guard(|| {
        let c = clip.as_ref().ok_or(Fail::Null("clip"))?;
        if shape.is_null() {
            return Err(Fail::Null("shape"));
        }
        std::slice::from_raw_parts_mut(shape, 4).copy_from_slice(c.data.shape());
        Ok(())
    })
}

/// Pointer to the clip values in (T, H, W) row-major order, valid while the clip lives.
///
/// # Safety
/// `clip` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn m3d_clip_data(clip: *const M3dClip) -> *const f32 {
    clip.as_ref().map_or(std::ptr::null(), |c| c.data.data().as_ptr())
}

/// Releases a clip. NULL is ignored.
///
/// # Safety
/// `clip` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn m3d_clip_free(clip: *mut M3dClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

/// Class probabilities for one clip. `tabular` holds `tabular_len` standardized features
/// and must be NULL with length 0 for models without tabular input.
///
/// # Safety
/// `model` and `clip` must come from this library, `tabular` must point to `tabular_len`
/// floats when non-NULL, and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn m3d_model_predict(
    model: *const M3dModel,
    clip: *const M3dClip,
    tabular: *const f32,
    tabular_len: usize,
    out: *mut M3dPrediction,
) -> M3dStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = clip.as_ref().ok_or(Fail::Null("clip"))?;
        let out = out_arg(out, "out")?;
        let spec = m.model.spec();
        let tab = match (spec.uses_tabular, tabular.is_null()) {
            (true, true) => return Err(Fail::Invalid(format!("{} needs tabular features", spec.arch))),
            (false, false) => return Err(Fail::Invalid(format!("{} takes no tabular features", spec.arch))),
            (false, true) => None,
            (true, false) => {
                let row = std::slice::from_raw_parts(tabular, tabular_len).to_vec();
                Some(Tensor::new(vec![1, tabular_len], row)?)
            }
        };
        let [_, t, h, w] = <[usize; 4]>::try_from(c.data.shape()).expect("4-d clip");
        let clip = c.data.clone().reshape(vec![1, 1, t, h, w])?;
        let p = m
            .model
            .predict(&clip, tab.as_ref())?
            .pop()
            .expect("one prediction per clip");
        *out = M3dPrediction {
            class_index: p.class as u32,
            probabilities: p.probabilities,
        };
        Ok(())
    })
}

/// One-cycle learning rate at `step` (0-based) of a `total_steps` schedule.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn m3d_one_cycle_lr(
    max_lr: f64,
    total_steps: usize,
    step: usize,
    out: *mut f64,
) -> M3dStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = OneCycleConfig::new(max_lr, total_steps)?;
        *out = one_cycle_lr(step, &cfg)?;
        Ok(())
    })
}

/// Inverse-frequency class weights `N / (K * n_i)` for `k` class counts.
///
/// # Safety
/// `counts` must point to `k` values and `out` to `k` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn m3d_class_weights(counts: *const usize, k: usize, out: *mut f64) -> M3dStatus {
    guard(|| {
        if counts.is_null() {
            return Err(Fail::Null("counts"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let w = class_weights(std::slice::from_raw_parts(counts, k))?;
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(&w);
        Ok(())
    })
}
