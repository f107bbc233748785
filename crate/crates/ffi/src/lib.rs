//! C ABI for `superpr`.
//!
//! Every fallible function returns a [`SuperprStatus`]. On failure a message
//! is kept per thread and can be read with [`superpr_last_error`]. Shapes are
//! passed as four `size_t` values in `[batch, channels, height, width]`
//! order and tensors as contiguous row-major `float` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use superpr::analysis;
use superpr::blocks::{checkpoint, Model, ModelSpec};
use superpr::harness::config::parse_json;
use superpr::tensor::io;
use superpr::{wavelet, Error, Shape, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuperprStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Runtime = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque model handle; create with [`superpr_model_new`] or
/// [`superpr_model_load`], release with [`superpr_model_free`].
pub struct SuperprModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SuperprStatus {
    match e {
        Error::Shape { .. } | Error::OddExtent { .. } | Error::Indivisible { .. } => SuperprStatus::Shape,
        Error::InvalidArgument(_) => SuperprStatus::InvalidArgument,
        Error::Config { .. } => SuperprStatus::Config,
        Error::Io(_) => SuperprStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => SuperprStatus::Format,
        _ => SuperprStatus::Runtime,
    }
}

enum Fail {
    Status(SuperprStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(SuperprStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SuperprStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SuperprStatus::Ok,
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SuperprStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(SuperprStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn read_shape(p: *const usize) -> Result<Shape, Fail> {
    if p.is_null() {
        return Err(null("shape"));
    }
    let s = std::slice::from_raw_parts(p, 4);
    Ok(Shape::new(s[0], s[1], s[2], s[3]))
}

unsafe fn read_tensor(data: *const f32, shape: *const usize) -> Result<Tensor<f32>, Fail> {
    let shape = read_shape(shape)?;
    if data.is_null() {
        return Err(null("data"));
    }
    let v = std::slice::from_raw_parts(data, shape.numel()).to_vec();
    Ok(Tensor::from_vec(shape, v)?)
}

unsafe fn write_out(t: &Tensor<f32>, out: *mut f32, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    if out_len < t.numel() {
        return Err(Fail::Status(
            SuperprStatus::BufferTooSmall,
            format!("output needs {} floats, buffer holds {out_len}", t.numel()),
        ));
    }
    std::slice::from_raw_parts_mut(out, t.numel()).copy_from_slice(t.data());
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn superpr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn superpr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model from a JSON model spec and an initialization seed.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn superpr_model_new(spec_json: *const c_char, seed: u64, out: *mut *mut SuperprModel) -> SuperprStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: ModelSpec = parse_json(read_str(spec_json, "spec_json")?)?;
        let inner = Model::build(spec, seed)?;
        *out = Box::into_raw(Box::new(SuperprModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint directory written by `superpr train` or
/// [`superpr_model_save`].
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn superpr_model_load(dir: *const c_char, out: *mut *mut SuperprModel) -> SuperprStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = checkpoint::load::<f32>(PathBuf::from(read_str(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(SuperprModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn superpr_model_save(model: *const SuperprModel, dir: *const c_char) -> SuperprStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        checkpoint::save(&m.inner, PathBuf::from(read_str(dir, "dir")?))?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn superpr_model_free(model: *mut SuperprModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn superpr_model_param_count(model: *const SuperprModel, out: *mut u64) -> SuperprStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.param_count() as u64;
        Ok(())
    })
}

/// Runs the model on `input` and writes the `[B, 1, H, W]` output (logits
/// or the restored image, depending on the head).
///
/// # Safety
/// `input` must hold the product of `shape` floats; `out` must hold
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn superpr_model_forward(
    model: *const SuperprModel,
    input: *const f32,
    shape: *const usize,
    out: *mut f32,
    out_len: usize,
) -> SuperprStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = read_tensor(input, shape)?;
        let y = m.inner.predict(&x)?;
        write_out(&y, out, out_len)
    })
}

/// One-level orthonormal Haar analysis. The output has shape
/// `[B, 4C, H/2, W/2]` with bands LL, LH, HL, HH stacked in that order, and
/// the same element count as the input.
///
/// # Safety
/// `input` must hold the product of `shape` floats; `out` must hold
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn superpr_dwt(input: *const f32, shape: *const usize, out: *mut f32, out_len: usize) -> SuperprStatus {
    guard(|| {
        let x = read_tensor(input, shape)?;
        write_out(&wavelet::analysis_stacked(&x)?, out, out_len)
    })
}

/// Inverse of [`superpr_dwt`]; `shape` is the stacked `[B, 4C, H, W]` shape.
///
/// # Safety
/// As for [`superpr_dwt`].
#[no_mangle]
pub unsafe extern "C" fn superpr_idwt(input: *const f32, shape: *const usize, out: *mut f32, out_len: usize) -> SuperprStatus {
    guard(|| {
        let x = read_tensor(input, shape)?;
        write_out(&wavelet::synthesis_stacked(&x)?, out, out_len)
    })
}

/// Max-abs residual of `idwt(dwt(x))` against `x`.
///
/// # Safety
/// `input` must hold the product of `shape` floats; `residual` must be valid.
#[no_mangle]
pub unsafe extern "C" fn superpr_verify_pr(input: *const f32, shape: *const usize, residual: *mut f64) -> SuperprStatus {
    guard(|| {
        let x = read_tensor(input, shape)?;
        if residual.is_null() {
            return Err(null("residual"));
        }
        *residual = analysis::verify_pr(&x, 0.0)?.max_abs_residual;
        Ok(())
    })
}

/// Per-layer MAC table for a JSON model spec at the given input shape, as a
/// newly allocated CSV string to be released with [`superpr_string_free`].
///
/// # Safety
/// `spec_json` must be NUL-terminated; `shape` must point to four values;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn superpr_macs_csv(spec_json: *const c_char, shape: *const usize, out: *mut *mut c_char) -> SuperprStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: ModelSpec = parse_json(read_str(spec_json, "spec_json")?)?;
        let report = analysis::count_macs(&spec, read_shape(shape)?)?;
        let csv = CString::new(report.to_csv_string()?).expect("csv has no NUL");
        *out = csv.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn superpr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Reads a tensor file. `shape_out` always receives the stored shape; the
/// data is converted to `float` and written to `out` when it is non-null.
/// Call once with a null `out` to size the buffer.
///
/// # Safety
/// `path` must be NUL-terminated; `shape_out` must hold four values; `out`
/// must be null or hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn superpr_tensor_read(
    path: *const c_char,
    shape_out: *mut usize,
    out: *mut f32,
    out_len: usize,
) -> SuperprStatus {
    guard(|| {
        if shape_out.is_null() {
            return Err(null("shape_out"));
        }
        let t = io::load(PathBuf::from(read_str(path, "path")?))?.into_tensor::<f32>();
        std::slice::from_raw_parts_mut(shape_out, 4).copy_from_slice(&t.shape().0);
        if out.is_null() {
            return Ok(());
        }
        write_out(&t, out, out_len)
    })
}

/// Writes a `float` tensor file.
///
/// # Safety
/// `path` must be NUL-terminated; `data` must hold the product of `shape`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn superpr_tensor_write(path: *const c_char, data: *const f32, shape: *const usize) -> SuperprStatus {
    guard(|| {
        let t = read_tensor(data, shape)?;
        io::save(PathBuf::from(read_str(path, "path")?), &t)?;
        Ok(())
    })
}
