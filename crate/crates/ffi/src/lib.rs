//! C interface to checkpoint loading, inference, CTC loss and CER.
//!
//! Every function returns a [`MoleStatus`]. On failure a description is
//! available from [`mole_last_error_message`] on the same thread. Models are
//! opaque handles created by [`mole_model_load`] and released with
//! [`mole_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use mole::checkpoint::Checkpoint;
use mole::corpus::Vocabulary;
use mole::losses::{cer, ctc_loss, greedy_ctc_decode, CtcInput};
use mole::model::{Inference, Model};
use mole::tensor::Tensor;
use mole::MoleError;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoleStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Numeric = 6,
    Contract = 7,
    Config = 8,
    /// Output buffer too small; the required size was still written.
    BufferTooSmall = 9,
    Internal = 10,
}

/// Opaque model handle.
pub struct MoleModel {
    model: Model,
    vocabulary: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn status_of(e: &MoleError) -> MoleStatus {
    match e {
        MoleError::Dimension { .. } => MoleStatus::Dimension,
        MoleError::Numeric(_) | MoleError::Diverged { .. } => MoleStatus::Numeric,
        MoleError::Degenerate(_) | MoleError::Contract(_) | MoleError::TooShort { .. } => {
            MoleStatus::Contract
        }
        MoleError::Config(_) => MoleStatus::Config,
        MoleError::Graph(_) => MoleStatus::Internal,
        MoleError::Format { .. } => MoleStatus::Format,
        MoleError::Io { .. } => MoleStatus::Io,
    }
}

struct Failure(MoleStatus, String);

impl From<MoleError> for Failure {
    fn from(e: MoleError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MoleStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MoleStatus::Ok
        }
        Ok(Err(Failure(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            MoleStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MoleStatus::NullPointer, format!("{what} is null"))
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn model_ref<'a>(m: *const MoleModel) -> Result<&'a MoleModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn run_model(
    m: &MoleModel,
    features: *const f64,
    frames: usize,
    dim: usize,
) -> Result<Inference, Failure> {
    if frames == 0 || dim == 0 {
        return Err(Failure(
            MoleStatus::InvalidArgument,
            "frames and dim must be positive".into(),
        ));
    }
    let data = input(features, frames * dim, "features")?.to_vec();
    let t = Tensor::new(vec![frames, dim], data)?;
    Ok(m.model.infer(&t)?)
}

/// Message for the most recent failure on this thread; empty after success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn mole_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mole_model_load(
    path: *const c_char,
    out: *mut *mut MoleModel,
) -> MoleStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(MoleStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let vocabulary = Vocabulary::new(ckpt.vocabulary.chars().collect())?;
        let model = ckpt.to_model()?;
        *out = Box::into_raw(Box::new(MoleModel { model, vocabulary }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`mole_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mole_model_free(model: *mut MoleModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes feature dimension, output classes (blank included) and number of
/// MoLE layers. Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mole_model_info(
    model: *const MoleModel,
    feature_dim: *mut usize,
    num_classes: *mut usize,
    num_mole_layers: *mut usize,
) -> MoleStatus {
    guard(|| {
        let m = model_ref(model)?;
        if let Some(p) = feature_dim.as_mut() {
            *p = m.model.config.feature_dim;
        }
        if let Some(p) = num_classes.as_mut() {
            *p = m.model.config.vocab_size;
        }
        if let Some(p) = num_mole_layers.as_mut() {
            *p = m.model.num_mole_layers();
        }
        Ok(())
    })
}

/// Frame log-posteriors, row-major `frames × num_classes`, for a row-major
/// `frames × dim` feature matrix.
///
/// # Safety
/// `features` must hold `frames * dim` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn mole_model_log_probs(
    model: *const MoleModel,
    features: *const f64,
    frames: usize,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> MoleStatus {
    guard(|| {
        let m = model_ref(model)?;
        let inf = run_model(m, features, frames, dim)?;
        let data = inf.log_probs.data();
        if out_len < data.len() {
            return Err(Failure(
                MoleStatus::BufferTooSmall,
                format!("need {} values, buffer holds {out_len}", data.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        Ok(())
    })
}

/// Greedy transcription as UTF-8. `*needed` receives the byte length
/// including the terminating NUL; if it exceeds `capacity` nothing is
/// written to `text` and `BufferTooSmall` is returned.
///
/// # Safety
/// `features` must hold `frames * dim` values, `text` `capacity` bytes, and
/// `needed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mole_model_transcribe(
    model: *const MoleModel,
    features: *const f64,
    frames: usize,
    dim: usize,
    text: *mut c_char,
    capacity: usize,
    needed: *mut usize,
) -> MoleStatus {
    guard(|| {
        let m = model_ref(model)?;
        if needed.is_null() {
            return Err(null("needed"));
        }
        let inf = run_model(m, features, frames, dim)?;
        let tokens = greedy_ctc_decode(&inf.log_probs, frames);
        let s = m.vocabulary.decode(&tokens);
        let bytes = s.as_bytes();
        *needed = bytes.len() + 1;
        if capacity < bytes.len() + 1 {
            return Err(Failure(
                MoleStatus::BufferTooSmall,
                format!("need {} bytes, buffer holds {capacity}", bytes.len() + 1),
            ));
        }
        if text.is_null() {
            return Err(null("text"));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), text.cast::<u8>(), bytes.len());
        *text.add(bytes.len()) = 0;
        Ok(())
    })
}

/// Routing of MoLE layer `layer` (0-based, bottom first): selected expert
/// and its posterior.
///
/// # Safety
/// `features` must hold `frames * dim` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mole_model_route(
    model: *const MoleModel,
    features: *const f64,
    frames: usize,
    dim: usize,
    layer: usize,
    selected: *mut usize,
    gamma: *mut f64,
) -> MoleStatus {
    guard(|| {
        let m = model_ref(model)?;
        if selected.is_null() || gamma.is_null() {
            return Err(null("output"));
        }
        let inf = run_model(m, features, frames, dim)?;
        let r = inf.routes.get(layer).ok_or_else(|| {
            Failure(
                MoleStatus::InvalidArgument,
                format!(
                    "layer {layer} out of range; model has {} MoLE layers",
                    inf.routes.len()
                ),
            )
        })?;
        *selected = r.selected;
        *gamma = r.gamma;
        Ok(())
    })
}

/// CTC loss of `target` (1-based labels, 0 is blank) under row-major
/// `frames × classes` log-probabilities. An infeasible target gives
/// `+inf` with status `Ok`.
///
/// # Safety
/// `log_probs` must hold `frames * classes` values, `target` `target_len`
/// values, and `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mole_ctc_loss(
    log_probs: *const f64,
    frames: usize,
    classes: usize,
    target: *const usize,
    target_len: usize,
    loss: *mut f64,
) -> MoleStatus {
    guard(|| {
        if loss.is_null() {
            return Err(null("loss"));
        }
        let lp = input(log_probs, frames * classes, "log_probs")?.to_vec();
        let tgt = input(target, target_len, "target")?.to_vec();
        let t = Tensor::new(vec![frames, classes], lp)?;
        let c = CtcInput::new(t, tgt, frames)?;
        *loss = ctc_loss(&c).loss;
        Ok(())
    })
}

/// Character error rate of `hyp` against a non-empty `reference`.
///
/// # Safety
/// Arrays must hold the given number of values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mole_cer(
    hyp: *const u32,
    hyp_len: usize,
    reference: *const u32,
    reference_len: usize,
    out: *mut f64,
) -> MoleStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let h = input(hyp, hyp_len, "hyp")?;
        let r = input(reference, reference_len, "reference")?;
        *out = cer(h, r)?.value();
        Ok(())
    })
}
