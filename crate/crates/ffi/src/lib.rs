//! C ABI over `metagrad`: closed-form 1D oracle and model handles.
//!
//! Conventions:
//! * every fallible function returns an [`MgStatus`]; results go through
//!   out-pointers, which are written only on success unless noted;
//! * the message of the most recent failure on the calling thread is
//!   available through [`mg_last_error`];
//! * models are opaque [`MgModel`] handles owned by the caller and
//!   released with [`mg_model_free`];
//! * panics never cross the boundary, they surface as `MG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use metagrad::models::{build_model, Checkpoint, Model, ModelSpec};
use metagrad::oracle::{self, DeepPoint, PointKind};
use metagrad::{Error, Tensor};

/// Result codes shared by all entry points.
#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Numerical = 5,
    Io = 6,
    Serialization = 7,
    Unsupported = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Kind of a stationary point of the deep 1D objective.
#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MgPointKind {
    LocalMax = 0,
    LocalMin = 1,
    Saddle = 2,
}

/// Stationary point `(a, b)` with its row-major Hessian.
#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct MgStationaryPoint {
    pub a: f64,
    pub b: f64,
    pub kind: MgPointKind,
    pub hessian: [f64; 4],
}

/// Opaque model handle.
pub struct MgModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(MgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => MgStatus::Shape,
            Error::Config(_) => MgStatus::Config,
            Error::Contract(_) => MgStatus::InvalidArgument,
            Error::Unsupported(_) => MgStatus::Unsupported,
            Error::Numerical { .. } | Error::Divergence { .. } => MgStatus::Numerical,
            Error::Io(_) => MgStatus::Io,
            Error::Serde(_) => MgStatus::Serialization,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: MgStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, records any failure message and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MgStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MgStatus::Panic
        }
    }
}

fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller guarantees `p` is null or valid for writes.
    unsafe { p.as_mut() }.map_or_else(|| fail(MgStatus::NullPointer, format!("`{name}` is null")), Ok)
}

fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(MgStatus::NullPointer, format!("`{name}` is null"));
    }
    // SAFETY: the caller guarantees a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(MgStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

fn handle<'a>(m: *const MgModel) -> Result<&'a MgModel, Failure> {
    // SAFETY: the caller passes null or a live handle from this library.
    unsafe { m.as_ref() }.map_or_else(|| fail(MgStatus::NullPointer, "`model` is null"), Ok)
}

fn positive_alpha(alpha: f64) -> Result<(), Failure> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        fail(
            MgStatus::InvalidArgument,
            format!("alpha must be positive and finite, got {alpha}"),
        )
    }
}

fn emit(m: Model, out_model: *mut *mut MgModel) -> Result<(), Failure> {
    *out(out_model, "out_model")? = Box::into_raw(Box::new(MgModel { model: m }));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null after a success.
/// The pointer stays valid until the next call into the library on the
/// same thread.
#[no_mangle]
pub extern "C" fn mg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Closed-form shallow objective `2(1−α)²c²` of the model `ŷ = c·x`.
#[no_mangle]
pub extern "C" fn mg_shallow_maml_loss(c: f64, alpha: f64, out_loss: *mut f64) -> MgStatus {
    guard(|| {
        *out(out_loss, "out_loss")? = oracle::shallow_maml_loss(c, alpha);
        Ok(())
    })
}

/// Expected post-adaptation loss of the deep model `ŷ = b·a·x` after one
/// simultaneous inner step of both factors.
#[no_mangle]
pub extern "C" fn mg_deep_maml_loss(a: f64, b: f64, alpha: f64, out_loss: *mut f64) -> MgStatus {
    guard(|| {
        *out(out_loss, "out_loss")? = oracle::deep_maml_loss(DeepPoint::new(a, b), alpha);
        Ok(())
    })
}

/// Gradient of the deep MAML objective (twice the loss minus the noise
/// floor) with respect to `(a, b)`.
#[no_mangle]
pub extern "C" fn mg_deep_maml_grad(a: f64, b: f64, alpha: f64, out_da: *mut f64, out_db: *mut f64) -> MgStatus {
    guard(|| {
        let (da, db) = oracle::deep_maml_grad(DeepPoint::new(a, b), alpha);
        let (oa, ob) = (out(out_da, "out_da")?, out(out_db, "out_db")?);
        *oa = da;
        *ob = db;
        Ok(())
    })
}

/// One inner step of the deep model on task `theta`; with `freeze_a`
/// only `b` moves.
#[no_mangle]
pub extern "C" fn mg_deep_one_step_adapt(
    a: f64,
    b: f64,
    theta: f64,
    alpha: f64,
    freeze_a: bool,
    out_a: *mut f64,
    out_b: *mut f64,
) -> MgStatus {
    guard(|| {
        let q = oracle::deep_one_step_adapt(DeepPoint::new(a, b), theta, alpha, freeze_a);
        let (oa, ob) = (out(out_a, "out_a")?, out(out_b, "out_b")?);
        *oa = q.a;
        *ob = q.b;
        Ok(())
    })
}

/// Writes up to `capacity` stationary points of the deep objective and
/// stores the total in `out_count`. Pass a null buffer to query the count;
/// a short buffer yields `MG_STATUS_BUFFER_TOO_SMALL` with the count set.
///
/// # Safety
/// `buffer` is null or valid for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn mg_stationary_points(
    alpha: f64,
    buffer: *mut MgStationaryPoint,
    capacity: usize,
    out_count: *mut usize,
) -> MgStatus {
    guard(|| {
        positive_alpha(alpha)?;
        let count = out(out_count, "out_count")?;
        let pts = oracle::stationary_points(alpha)?;
        *count = pts.len();
        if buffer.is_null() {
            return Ok(());
        }
        if capacity < pts.len() {
            return fail(
                MgStatus::BufferTooSmall,
                format!("need {} entries, got {capacity}", pts.len()),
            );
        }
        // SAFETY: the caller guarantees `buffer` holds `capacity` entries.
        let dst = unsafe { std::slice::from_raw_parts_mut(buffer, capacity) };
        for (d, p) in dst.iter_mut().zip(&pts) {
            let h = p.hessian;
            *d = MgStationaryPoint {
                a: p.coords.a,
                b: p.coords.b,
                kind: match p.kind {
                    PointKind::LocalMax => MgPointKind::LocalMax,
                    PointKind::LocalMin => MgPointKind::LocalMin,
                    PointKind::Saddle => MgPointKind::Saddle,
                },
                hessian: [h[0][0], h[0][1], h[1][0], h[1][1]],
            };
        }
        Ok(())
    })
}

/// Builds a freshly initialised model from a JSON spec such as
/// `{"kind": "linnet", "input_dim": 2, "hidden": [2, 2], "output_dim": 1}`.
#[no_mangle]
pub extern "C" fn mg_model_build(spec_json: *const c_char, seed: u64, out_model: *mut *mut MgModel) -> MgStatus {
    guard(|| {
        let spec: ModelSpec = serde_json::from_str(text(spec_json, "spec_json")?).map_err(Error::from)?;
        emit(build_model(&spec, seed)?, out_model)
    })
}

/// Loads the model stored in a checkpoint file.
#[no_mangle]
pub extern "C" fn mg_model_load(path: *const c_char, out_model: *mut *mut MgModel) -> MgStatus {
    guard(|| {
        let ck = Checkpoint::load(Path::new(text(path, "path")?))?;
        emit(ck.model, out_model)
    })
}

/// Writes the model as a checkpoint file without meta-optimizer state.
#[no_mangle]
pub extern "C" fn mg_model_save(model: *const MgModel, path: *const c_char) -> MgStatus {
    guard(|| {
        let m = handle(model)?;
        Checkpoint::new(m.model.clone(), None).save(Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// Input and output widths of the model.
#[no_mangle]
pub extern "C" fn mg_model_dims(model: *const MgModel, out_input: *mut usize, out_output: *mut usize) -> MgStatus {
    guard(|| {
        let s = &handle(model)?.model.spec;
        let (i, o) = (out(out_input, "out_input")?, out(out_output, "out_output")?);
        *i = s.input_dim;
        *o = s.output_dim;
        Ok(())
    })
}

/// Total number of scalar parameters.
#[no_mangle]
pub extern "C" fn mg_model_param_count(model: *const MgModel, out_count: *mut usize) -> MgStatus {
    guard(|| {
        *out(out_count, "out_count")? = handle(model)?.model.param_count();
        Ok(())
    })
}

/// Raw outputs for `rows` inputs stored row-major in `x`
/// (`rows × input_dim`). `y` receives `rows × output_dim` values and
/// `y_len` is its capacity.
///
/// # Safety
/// `x` holds `rows × input_dim` values and `y` holds `y_len` values.
#[no_mangle]
pub unsafe extern "C" fn mg_model_forward(
    model: *const MgModel,
    x: *const f64,
    rows: usize,
    y: *mut f64,
    y_len: usize,
) -> MgStatus {
    guard(|| {
        let m = &handle(model)?.model;
        if x.is_null() || y.is_null() {
            return fail(MgStatus::NullPointer, "`x` or `y` is null");
        }
        if rows == 0 {
            return fail(MgStatus::InvalidArgument, "`rows` must be positive");
        }
        let (din, dout) = (m.spec.input_dim, m.spec.output_dim);
        if y_len < rows * dout {
            return fail(
                MgStatus::BufferTooSmall,
                format!("need {} outputs, got {y_len}", rows * dout),
            );
        }
        // SAFETY: the caller guarantees `x` holds `rows × input_dim` values.
        let xs = unsafe { std::slice::from_raw_parts(x, rows * din) };
        let pred = m.predict(&Tensor::matrix(rows, din, xs.to_vec())?)?;
        // SAFETY: capacity checked above, caller guarantees `y_len` entries.
        let ys = unsafe { std::slice::from_raw_parts_mut(y, y_len) };
        ys[..pred.numel()].copy_from_slice(pred.data());
        Ok(())
    })
}

/// Collapses a linear model into its single-layer equivalent, returning a
/// new handle. Nonlinear models yield `MG_STATUS_CONFIG`.
#[no_mangle]
pub extern "C" fn mg_model_collapse(model: *const MgModel, out_model: *mut *mut MgModel) -> MgStatus {
    guard(|| {
        let m = &handle(model)?.model;
        if !m.is_linear() {
            return fail(
                MgStatus::Config,
                format!("cannot collapse nonlinear `{}` model", m.spec.kind.name()),
            );
        }
        emit(m.collapse_linear()?, out_model)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` is null or a live handle from this library, freed only once.
#[no_mangle]
pub unsafe extern "C" fn mg_model_free(model: *mut MgModel) {
    if !model.is_null() {
        // SAFETY: the handle came from `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}
