//! C interface to lumacurve.
//!
//! Every function returns an [`LcStatus`]; on failure a description is
//! available from [`lc_last_error`] on the same thread. Images and models are
//! opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lumacurve::classic::{self, ClassicConfig, Minkowski};
use lumacurve::model::{self, ModelWeights};
use lumacurve::{pfm, tone_curve, CurveParams, Error, Illuminant, LinearImage};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    Degenerate = 6,
    Internal = 7,
    Panic = 8,
}

/// An RGB image in linear light.
pub struct LcImage {
    inner: LinearImage,
}

/// A trained illuminant estimator.
pub struct LcModel {
    inner: ModelWeights,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> LcStatus {
    match e {
        Error::Io { .. } => LcStatus::Io,
        Error::Format { .. } | Error::InvalidImage(_) => LcStatus::Format,
        Error::ShapeMismatch { .. } => LcStatus::ShapeMismatch,
        Error::ZeroVector | Error::DegenerateIlluminant { .. } | Error::BlackImage => LcStatus::Degenerate,
        Error::Domain(_) | Error::Config(_) | Error::EmptyInput | Error::NormViolation { .. } => {
            LcStatus::InvalidArgument
        }
        _ => LcStatus::Internal,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LcStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("{name} is null"));
            LcStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            LcStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            LcStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::Invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn rgb_arg(p: *const f64, name: &'static str) -> Result<[f64; 3], Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    let s = std::slice::from_raw_parts(p, 3);
    Ok([s[0], s[1], s[2]])
}

unsafe fn write_rgb(out: *mut f64, e: &Illuminant) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out_rgb"));
    }
    ptr::copy_nonoverlapping(e.rgb().as_ptr(), out, 3);
    Ok(())
}

/// Message of the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Copies `height * width * 3` interleaved RGB floats into a new image.
///
/// # Safety
/// `data` must point to `height * width * 3` readable floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_image_new(height: usize, width: usize, data: *const f32, out: *mut *mut LcImage) -> LcStatus {
    guard(|| {
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| Failure::Invalid("image dimensions overflow".into()))?;
        let pixels = std::slice::from_raw_parts(data, n).to_vec();
        let inner = LinearImage::new(height, width, pixels)?;
        write_out(out, LcImage { inner })
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_image_load_pfm(path: *const c_char, out: *mut *mut LcImage) -> LcStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let inner = pfm::read_pfm(path)?;
        write_out(out, LcImage { inner })
    })
}

/// # Safety
/// `image` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lc_image_save_pfm(image: *const LcImage, path: *const c_char) -> LcStatus {
    guard(|| {
        let image = nonnull(image, "image")?;
        let path = path_arg(path, "path")?;
        pfm::write_pfm(path, &image.inner)?;
        Ok(())
    })
}

/// Width in pixels, or 0 for a null handle.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_image_width(image: *const LcImage) -> usize {
    image.as_ref().map_or(0, |i| i.inner.width())
}

/// Height in pixels, or 0 for a null handle.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_image_height(image: *const LcImage) -> usize {
    image.as_ref().map_or(0, |i| i.inner.height())
}

/// Interleaved RGB pixels, row-major; valid while the handle lives.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_image_data(image: *const LcImage) -> *const f32 {
    image.as_ref().map_or(ptr::null(), |i| i.inner.data().as_ptr())
}

/// # Safety
/// `image` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_image_free(image: *mut LcImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Angle in degrees between two RGB vectors.
///
/// # Safety
/// `a` and `b` must point to 3 doubles; `out_degrees` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_angular_error(a: *const f64, b: *const f64, out_degrees: *mut f64) -> LcStatus {
    guard(|| {
        let a = Illuminant::from_estimate(rgb_arg(a, "a")?)?;
        let b = Illuminant::from_estimate(rgb_arg(b, "b")?)?;
        if out_degrees.is_null() {
            return Err(Failure::Null("out_degrees"));
        }
        *out_degrees = lumacurve::angular_error(&a, &b);
        Ok(())
    })
}

/// Classical estimate with derivative order `order` (0 or 1), Minkowski norm
/// `p` (infinite or `<= 0` selects the maximum) and blur `sigma`.
///
/// # Safety
/// `image` must be a live handle; `out_rgb` must point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_estimate_classic(
    image: *const LcImage,
    order: u32,
    p: f64,
    sigma: f64,
    out_rgb: *mut f64,
) -> LcStatus {
    guard(|| {
        let image = nonnull(image, "image")?;
        let p = if p.is_infinite() || p <= 0.0 {
            Minkowski::Infinity
        } else {
            Minkowski::Finite(p)
        };
        let cfg = ClassicConfig::new(order, p, sigma)?;
        let e = classic::estimate_unified(&image.inner, &cfg)?;
        write_rgb(out_rgb, &e)
    })
}

/// Applies the brightness curve with weights `theta[0..len]` to a new image.
///
/// # Safety
/// `image` must be a live handle; `theta` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_curve_apply(
    image: *const LcImage,
    theta: *const f64,
    len: usize,
    out: *mut *mut LcImage,
) -> LcStatus {
    guard(|| {
        let image = nonnull(image, "image")?;
        if theta.is_null() {
            return Err(Failure::Null("theta"));
        }
        let params = CurveParams::new(std::slice::from_raw_parts(theta, len).to_vec())?;
        let inner = tone_curve::apply_curve(&image.inner, &params);
        write_out(out, LcImage { inner })
    })
}

/// Loads a checkpoint manifest (the `.json` file written by training).
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_model_load(path: *const c_char, out: *mut *mut LcModel) -> LcStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let (inner, _) = model::load_checkpoint(path)?;
        write_out(out, LcModel { inner })
    })
}

/// Illuminant estimate; the image is area-resized to the model input if needed.
///
/// # Safety
/// `model` and `image` must be live handles; `out_rgb` must point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_model_predict(model: *const LcModel, image: *const LcImage, out_rgb: *mut f64) -> LcStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let image = nonnull(image, "image")?;
        let input = model::prepare_input(&image.inner, m.inner.architecture())?;
        let e = model::predict(&input, &m.inner)?;
        write_rgb(out_rgb, &e)
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_model_free(model: *mut LcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// One adversarial brightness step against `model`. `label` may be null, in
/// which case the gray-world estimate is used. The curve has `theta_len`
/// segments and its weights are written to `out_theta`.
///
/// # Safety
/// Handles must be live; `label` null or 3 doubles; `out_theta` must hold
/// `theta_len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_augment_image(
    model: *const LcModel,
    image: *const LcImage,
    label: *const f64,
    seed: u64,
    out: *mut *mut LcImage,
    out_theta: *mut f64,
    theta_len: usize,
) -> LcStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let image = nonnull(image, "image")?;
        if out_theta.is_null() {
            return Err(Failure::Null("out_theta"));
        }
        if theta_len == 0 {
            return Err(Failure::Invalid("theta_len must be >= 1".into()));
        }
        let label = if label.is_null() {
            classic::gray_world(&image.inner)?
        } else {
            lumacurve::normalize_illuminant(rgb_arg(label, "label")?)?
        };
        let (adv, theta) = lumacurve::augment::augment_image(&image.inner, &label, &m.inner, theta_len, seed)?;
        ptr::copy_nonoverlapping(theta.theta().as_ptr(), out_theta, theta_len);
        write_out(out, LcImage { inner: adv })
    })
}
