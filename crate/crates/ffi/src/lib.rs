//! C ABI for the `rwn` library.
//!
//! Models and transition matrices cross the boundary as opaque handles that
//! the caller releases with the matching `*_free` function. Every fallible
//! call returns an [`RwnStatus`] code; on failure the message for the calling
//! thread is available through [`rwn_last_error_message`]. Panics are caught
//! at the boundary and reported as [`RwnStatus::Panic`].
//!
//! Buffers are caller-owned and row-major: images are `height * width * 3`
//! RGB values in `[0, 1]`, label maps are `height * width` class indices and
//! potentials are `height * width * m` scores.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use rwn::cli::{infer_image, InferOptions, StepSpec};
use rwn::graph::{build_sparsity, transition, TransitionMatrix};
use rwn::image::{ImageTensor, LabelMap};
use rwn::solver::{converge, diffuse_steps, SolverConfig};
use rwn::synth::oracle_affinity;
use rwn::train::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use rwn::walk::UnaryPotentials;
use rwn::Error;

/// Result code of every fallible call.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RwnStatus {
    Ok = 0,
    InvalidInput = 1,
    Format = 2,
    UnsupportedVersion = 3,
    MissingFile = 4,
    Io = 5,
    Convergence = 6,
    Divergence = 7,
    UndefinedRecall = 8,
    NullPointer = 9,
    Panic = 10,
}

impl From<&Error> for RwnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => RwnStatus::InvalidInput,
            Error::Format(_) => RwnStatus::Format,
            Error::UnsupportedVersion { .. } => RwnStatus::UnsupportedVersion,
            Error::MissingFile(_) => RwnStatus::MissingFile,
            Error::Io { .. } => RwnStatus::Io,
            Error::Convergence { .. } => RwnStatus::Convergence,
            Error::Divergence { .. } => RwnStatus::Divergence,
            Error::UndefinedRecall => RwnStatus::UndefinedRecall,
        }
    }
}

/// Trained model: filter bank, affinity head and unary branch.
pub struct RwnModel {
    inner: ModelCheckpoint,
}

/// Row-stochastic transition matrix over the pixels of one image.
pub struct RwnTransition {
    inner: TransitionMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Runs `body`, records any failure message and converts it to a status.
fn guard(body: impl FnOnce() -> Outcome) -> RwnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error(String::new());
            RwnStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            let status = RwnStatus::from(&e);
            set_last_error(e.to_string());
            status
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            RwnStatus::NullPointer
        }
        Err(_) => {
            set_last_error("panic inside rwn".into());
            RwnStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> std::result::Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

fn pixels(height: usize, width: usize) -> std::result::Result<usize, Failure> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Lib(Error::InvalidInput(format!("bad image size {height}x{width}"))))
}

fn checked_len(n: usize, m: usize) -> std::result::Result<usize, Failure> {
    n.checked_mul(m)
        .ok_or_else(|| Failure::Lib(Error::InvalidInput("buffer size overflows".into())))
}

/// # Safety
/// `path` must be null or a NUL-terminated string.
unsafe fn path_arg(path: *const c_char) -> std::result::Result<PathBuf, Failure> {
    let p = non_null(path, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidInput("path is not UTF-8".into())))?;
    Ok(PathBuf::from(s))
}

fn steps_arg(steps: i64) -> StepSpec {
    if steps < 0 {
        StepSpec::Converge
    } else {
        StepSpec::Count(steps as usize)
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rwn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the calling thread's last error message, without the
/// terminating NUL. Zero after a successful call.
#[no_mangle]
pub extern "C" fn rwn_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` as a NUL-terminated string,
/// truncating to `len - 1` bytes. Returns the number of bytes written
/// before the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn rwn_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len().min(len - 1);
        ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Reads a checkpoint file into a new model handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn rwn_model_load(path: *const c_char, out: *mut *mut RwnModel) -> RwnStatus {
    guard(|| {
        let out = non_null(out, "out")?.cast_mut();
        *out = ptr::null_mut();
        let model = load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(RwnModel { inner: model }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from [`rwn_model_load`] and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rwn_model_save(model: *const RwnModel, path: *const c_char) -> RwnStatus {
    guard(|| {
        let model = &*non_null(model, "model")?;
        save_checkpoint(&path_arg(path)?, &model.inner)?;
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or come from [`rwn_model_load`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rwn_model_free(model: *mut RwnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes `m` the model predicts; zero for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rwn_model_num_classes(model: *const RwnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.m())
}

/// Number of feature channels `k`, which equals the number of affinity
/// parameters; zero for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rwn_model_num_channels(model: *const RwnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.k())
}

/// Labels one RGB image. `steps` is the number of damped walk steps, or any
/// negative value to iterate to convergence; zero returns the unary
/// prediction. `labels_out` receives `height * width` class indices and
/// `scores_out`, when not null, the `height * width * m` diffused scores.
///
/// # Safety
/// `rgb` must hold `height * width * 3` values, `labels_out` have room for
/// `height * width` values and `scores_out` be null or have room for
/// `height * width * m` values.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn rwn_model_infer(
    model: *const RwnModel,
    height: usize,
    width: usize,
    rgb: *const f64,
    steps: i64,
    radius: usize,
    alpha: f64,
    labels_out: *mut u32,
    scores_out: *mut f64,
) -> RwnStatus {
    guard(|| {
        let model = &*non_null(model, "model")?;
        let rgb = non_null(rgb, "rgb")?;
        let labels_out = non_null(labels_out, "labels_out")?.cast_mut();
        let n = pixels(height, width)?;
        let data = slice::from_raw_parts(rgb, checked_len(n, 3)?).to_vec();
        let image = ImageTensor::new(height, width, 3, data)?;
        let opts = InferOptions {
            steps: steps_arg(steps),
            radius,
            solver: SolverConfig {
                alpha,
                ..SolverConfig::default()
            },
        };
        opts.solver.validate()?;
        let (labels, y) = infer_image(&model.inner, &image, &opts)?;
        slice::from_raw_parts_mut(labels_out, n).copy_from_slice(labels.data());
        if !scores_out.is_null() {
            slice::from_raw_parts_mut(scores_out, y.values().len()).copy_from_slice(y.values());
        }
        Ok(())
    })
}

/// Builds the oracle transition matrix of a label map: neighbors within
/// `radius` sharing a label get affinity one, all others zero.
///
/// # Safety
/// `labels` must hold `height * width` values and `out` be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn rwn_transition_oracle(
    labels: *const u32,
    height: usize,
    width: usize,
    radius: usize,
    out: *mut *mut RwnTransition,
) -> RwnStatus {
    guard(|| {
        let out = non_null(out, "out")?.cast_mut();
        *out = ptr::null_mut();
        let labels = non_null(labels, "labels")?;
        let n = pixels(height, width)?;
        let labels = LabelMap::new(height, width, slice::from_raw_parts(labels, n).to_vec())?;
        let pattern = build_sparsity(height, width, radius)?;
        let a = transition(&oracle_affinity(&labels, &pattern)?);
        *out = Box::into_raw(Box::new(RwnTransition { inner: a }));
        Ok(())
    })
}

/// Number of pixels the transition matrix covers; zero for a null handle.
///
/// # Safety
/// `a` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rwn_transition_num_pixels(a: *const RwnTransition) -> usize {
    a.as_ref().map_or(0, |a| a.inner.num_pixels())
}

/// Releases a transition handle. Null is ignored.
///
/// # Safety
/// `a` must be null or come from [`rwn_transition_oracle`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rwn_transition_free(a: *mut RwnTransition) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Diffuses `m`-class potentials with `a`. `steps` counts damped walk steps;
/// a negative value iterates to convergence.
///
/// # Safety
/// `potentials` and `out` must each hold `num_pixels * m` values.
#[no_mangle]
pub unsafe extern "C" fn rwn_diffuse(
    a: *const RwnTransition,
    potentials: *const f64,
    m: usize,
    alpha: f64,
    steps: i64,
    out: *mut f64,
) -> RwnStatus {
    guard(|| {
        let a = &(*non_null(a, "transition")?).inner;
        let potentials = non_null(potentials, "potentials")?;
        let out = non_null(out, "out")?.cast_mut();
        let len = checked_len(a.num_pixels(), m)?;
        let f = UnaryPotentials::new(a.num_pixels(), m, slice::from_raw_parts(potentials, len).to_vec())?;
        let solver = SolverConfig {
            alpha,
            ..SolverConfig::default()
        };
        solver.validate()?;
        let y = match steps_arg(steps) {
            StepSpec::Count(t) => diffuse_steps(a, &f, alpha, t)?,
            StepSpec::Converge => converge(a, &f, &solver)?,
        };
        slice::from_raw_parts_mut(out, len).copy_from_slice(y.values());
        Ok(())
    })
}
