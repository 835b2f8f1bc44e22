//! C ABI over the layerlab core: opaque handles for images, mattes, and
//! stored samples; status codes for every fallible call; and a thread-local
//! last-error message.
//!
//! Conventions:
//! - Pixel buffers are row-major `double` in `[0, 1]`; RGB interleaves
//!   channels, mattes carry one value per pixel, shadow residuals are
//!   signed interleaved RGB in `[-1, 1]`.
//! - Constructors write an owned handle through an out-pointer and return
//!   `LlabStatus`; every handle has a matching `_free` that accepts null.
//! - On any non-`Ok` status, `llab_last_error()` describes the failure
//!   until the next failing call on the same thread.

use layerlab_core::compose::{
    alpha_over, composite, composite_on_white, recompose, shadow_residual, ForegroundLayer,
    LayeredSample,
};
use layerlab_core::degrade::{blur_boundary, dilate_alpha, erode_alpha};
use layerlab_core::error::Error;
use layerlab_core::flow::{interpolate, interpolate_aux, Tensor};
use layerlab_core::image::{AlphaMask, Image, ShadowResidual};
use layerlab_core::metrics::{alpha_soft_iou, rgb_l1};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Internal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(error: &Error) -> LlabStatus {
    match error {
        Error::DimensionMismatch { .. } | Error::ShapeMismatch { .. } | Error::DimMismatch { .. } => {
            LlabStatus::DimensionMismatch
        }
        Error::Io { .. }
        | Error::Png { .. }
        | Error::InvalidManifest { .. }
        | Error::UnknownSchema { .. }
        | Error::InvariantViolation { .. } => LlabStatus::Io,
        Error::Json(_) | Error::Config(_) | Error::Service { .. } | Error::Provider { .. } => {
            LlabStatus::Internal
        }
        _ => LlabStatus::InvalidArgument,
    }
}

fn fail(error: Error) -> LlabStatus {
    let status = status_of(&error);
    set_error(&error.to_string());
    status
}

fn fail_null(what: &str) -> LlabStatus {
    set_error(&format!("null pointer: {what}"));
    LlabStatus::NullPointer
}

/// Message for the most recent failure on this thread; empty when no call
/// has failed yet. The pointer stays valid until the next failing call.
#[no_mangle]
pub extern "C" fn llab_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opaque RGB image handle.
pub struct LlabImage(Image);
/// Opaque alpha-matte handle.
pub struct LlabMask(AlphaMask);
/// Opaque layered-sample handle.
pub struct LlabSample(LayeredSample);

macro_rules! check_null {
    ($ptr:expr, $name:literal) => {
        if $ptr.is_null() {
            return fail_null($name);
        }
    };
}

/// Builds an image from `height * width * 3` interleaved RGB doubles.
///
/// # Safety
/// `data` must point to `height * width * 3` readable doubles and `out`
/// must be a valid destination for one pointer.
#[no_mangle]
pub unsafe extern "C" fn llab_image_new(
    height: usize,
    width: usize,
    data: *const f64,
    out: *mut *mut LlabImage,
) -> LlabStatus {
    check_null!(data, "data");
    check_null!(out, "out");
    let len = height.saturating_mul(width).saturating_mul(3);
    let slice = std::slice::from_raw_parts(data, len);
    match Image::new(height, width, slice.to_vec()) {
        Ok(image) => {
            *out = Box::into_raw(Box::new(LlabImage(image)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `image` must be null or a pointer returned by this library and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn llab_image_free(image: *mut LlabImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// # Safety
/// `image` must be a valid handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn llab_image_height(image: *const LlabImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.height())
}

/// # Safety
/// `image` must be a valid handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn llab_image_width(image: *const LlabImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.width())
}

/// Copies the interleaved RGB payload into `out` (`len` doubles, which must
/// equal `height * width * 3`).
///
/// # Safety
/// `image` must be a valid handle and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn llab_image_copy_data(
    image: *const LlabImage,
    out: *mut f64,
    len: usize,
) -> LlabStatus {
    check_null!(image, "image");
    check_null!(out, "out");
    let data = (*image).0.data();
    if data.len() != len {
        set_error(&format!("buffer length {len} != {}", data.len()));
        return LlabStatus::InvalidArgument;
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), out, len);
    LlabStatus::Ok
}

/// Builds a matte from `height * width` doubles in `[0, 1]`.
///
/// # Safety
/// `data` must point to `height * width` readable doubles; `out` must be a
/// valid destination.
#[no_mangle]
pub unsafe extern "C" fn llab_mask_new(
    height: usize,
    width: usize,
    data: *const f64,
    out: *mut *mut LlabMask,
) -> LlabStatus {
    check_null!(data, "data");
    check_null!(out, "out");
    let len = height.saturating_mul(width);
    let slice = std::slice::from_raw_parts(data, len);
    match AlphaMask::new(height, width, slice.to_vec()) {
        Ok(mask) => {
            *out = Box::into_raw(Box::new(LlabMask(mask)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `mask` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn llab_mask_free(mask: *mut LlabMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// # Safety
/// `mask` must be a valid handle and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn llab_mask_copy_data(
    mask: *const LlabMask,
    out: *mut f64,
    len: usize,
) -> LlabStatus {
    check_null!(mask, "mask");
    check_null!(out, "out");
    let data = (*mask).0.data();
    if data.len() != len {
        set_error(&format!("buffer length {len} != {}", data.len()));
        return LlabStatus::InvalidArgument;
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), out, len);
    LlabStatus::Ok
}

/// Straight-alpha blend of (rgb, alpha) over `under`.
///
/// # Safety
/// All handles must be valid; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn llab_alpha_over(
    rgb: *const LlabImage,
    alpha: *const LlabMask,
    under: *const LlabImage,
    out: *mut *mut LlabImage,
) -> LlabStatus {
    check_null!(rgb, "rgb");
    check_null!(alpha, "alpha");
    check_null!(under, "under");
    check_null!(out, "out");
    let layer = match ForegroundLayer::new((*rgb).0.clone(), (*alpha).0.clone(), 1) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    match alpha_over(&layer, &(*under).0) {
        Ok(image) => {
            *out = Box::into_raw(Box::new(LlabImage(image)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Stacks `layer_count` (rgb, alpha) pairs, ordered front-to-back, over a
/// background.
///
/// # Safety
/// `layer_rgbs` and `layer_alphas` must each point to `layer_count` valid
/// handles; `background` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn llab_composite(
    background: *const LlabImage,
    layer_rgbs: *const *const LlabImage,
    layer_alphas: *const *const LlabMask,
    layer_count: usize,
    out: *mut *mut LlabImage,
) -> LlabStatus {
    check_null!(background, "background");
    check_null!(out, "out");
    if layer_count > 0 {
        check_null!(layer_rgbs, "layer_rgbs");
        check_null!(layer_alphas, "layer_alphas");
    }
    let rgbs = if layer_count > 0 {
        std::slice::from_raw_parts(layer_rgbs, layer_count)
    } else {
        &[]
    };
    let alphas = if layer_count > 0 {
        std::slice::from_raw_parts(layer_alphas, layer_count)
    } else {
        &[]
    };
    let mut layers = Vec::with_capacity(layer_count);
    for (k, (rgb, alpha)) in rgbs.iter().zip(alphas).enumerate() {
        check_null!(*rgb, "layer rgb");
        check_null!(*alpha, "layer alpha");
        match ForegroundLayer::new((**rgb).0.clone(), (**alpha).0.clone(), k + 1) {
            Ok(layer) => layers.push(layer),
            Err(e) => return fail(e),
        }
    }
    match composite(&(*background).0, &layers) {
        Ok(image) => {
            *out = Box::into_raw(Box::new(LlabImage(image)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Renders `x` over a white canvas through `alpha`.
///
/// # Safety
/// All handles must be valid; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn llab_composite_on_white(
    alpha: *const LlabMask,
    x: *const LlabImage,
    out: *mut *mut LlabImage,
) -> LlabStatus {
    check_null!(alpha, "alpha");
    check_null!(x, "x");
    check_null!(out, "out");
    match composite_on_white(&(*alpha).0, &(*x).0) {
        Ok(image) => {
            *out = Box::into_raw(Box::new(LlabImage(image)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Writes the signed residual `source - recomposed` into `out`
/// (`height * width * 3` doubles).
///
/// # Safety
/// Handles must be valid; `out` must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn llab_shadow_residual(
    source: *const LlabImage,
    recomposed: *const LlabImage,
    out: *mut f64,
    len: usize,
) -> LlabStatus {
    check_null!(source, "source");
    check_null!(recomposed, "recomposed");
    check_null!(out, "out");
    match shadow_residual(&(*source).0, &(*recomposed).0) {
        Ok(shadow) => {
            if shadow.data().len() != len {
                set_error(&format!("buffer length {len} != {}", shadow.data().len()));
                return LlabStatus::InvalidArgument;
            }
            std::ptr::copy_nonoverlapping(shadow.data().as_ptr(), out, len);
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Adds a signed shadow residual (`height * width * 3` doubles in
/// `[-1, 1]`) back onto a recomposed image. `clamped` (optional) reports
/// whether any value left `[0, 1]`.
///
/// # Safety
/// `recomposed` must be valid; `shadow` must point to `len` readable
/// doubles matching the image payload; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn llab_recompose(
    recomposed: *const LlabImage,
    shadow: *const f64,
    len: usize,
    out: *mut *mut LlabImage,
    clamped: *mut bool,
) -> LlabStatus {
    check_null!(recomposed, "recomposed");
    check_null!(shadow, "shadow");
    check_null!(out, "out");
    let (h, w) = (*recomposed).0.dims();
    let residual =
        match ShadowResidual::new(h, w, std::slice::from_raw_parts(shadow, len).to_vec()) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
    match recompose(&(*recomposed).0, &residual) {
        Ok(result) => {
            if !clamped.is_null() {
                *clamped = result.clamped;
            }
            *out = Box::into_raw(Box::new(LlabImage(result.image)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Disk erosion of a matte.
///
/// # Safety
/// `mask` must be valid; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn llab_erode(
    mask: *const LlabMask,
    radius: usize,
    out: *mut *mut LlabMask,
) -> LlabStatus {
    check_null!(mask, "mask");
    check_null!(out, "out");
    match erode_alpha(&(*mask).0, radius) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(LlabMask(m)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Disk dilation of a matte.
///
/// # Safety
/// `mask` must be valid; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn llab_dilate(
    mask: *const LlabMask,
    radius: usize,
    out: *mut *mut LlabMask,
) -> LlabStatus {
    check_null!(mask, "mask");
    check_null!(out, "out");
    match dilate_alpha(&(*mask).0, radius) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(LlabMask(m)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Gaussian boundary blur of a matte.
///
/// # Safety
/// `mask` must be valid; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn llab_blur(
    mask: *const LlabMask,
    sigma: f64,
    out: *mut *mut LlabMask,
) -> LlabStatus {
    check_null!(mask, "mask");
    check_null!(out, "out");
    match blur_boundary(&(*mask).0, sigma) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(LlabMask(m)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Soft IoU of two mattes.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn llab_alpha_soft_iou(
    a: *const LlabMask,
    b: *const LlabMask,
    out: *mut f64,
) -> LlabStatus {
    check_null!(a, "a");
    check_null!(b, "b");
    check_null!(out, "out");
    match alpha_soft_iou(&(*a).0, &(*b).0) {
        Ok(v) => {
            *out = v;
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// White-rendered RGB L1 between two (rgb, alpha) layers.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn llab_rgb_l1(
    pred_rgb: *const LlabImage,
    pred_alpha: *const LlabMask,
    gt_rgb: *const LlabImage,
    gt_alpha: *const LlabMask,
    out: *mut f64,
) -> LlabStatus {
    check_null!(pred_rgb, "pred_rgb");
    check_null!(pred_alpha, "pred_alpha");
    check_null!(gt_rgb, "gt_rgb");
    check_null!(gt_alpha, "gt_alpha");
    check_null!(out, "out");
    let pred = match ForegroundLayer::new((*pred_rgb).0.clone(), (*pred_alpha).0.clone(), 1) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    let gt = match ForegroundLayer::new((*gt_rgb).0.clone(), (*gt_alpha).0.clone(), 1) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    match rgb_l1(&pred, &gt) {
        Ok(v) => {
            *out = v;
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Main-path interpolant `z_t = (1-t)*eps + t*x0` over flat buffers.
///
/// # Safety
/// `x0` and `eps` must each point to `len` readable doubles; `out` must be
/// writable for `len`.
#[no_mangle]
pub unsafe extern "C" fn llab_interpolate(
    x0: *const f64,
    eps: *const f64,
    len: usize,
    t: f64,
    out: *mut f64,
) -> LlabStatus {
    check_null!(x0, "x0");
    check_null!(eps, "eps");
    check_null!(out, "out");
    if len == 0 {
        set_error("len must be >= 1");
        return LlabStatus::InvalidArgument;
    }
    let mk = |p: *const f64| Tensor::new(vec![len], std::slice::from_raw_parts(p, len).to_vec());
    let (x0t, epst) = match (mk(x0), mk(eps)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return fail(e),
    };
    match interpolate(&x0t, &epst, t) {
        Ok(z) => {
            std::ptr::copy_nonoverlapping(z.data().as_ptr(), out, len);
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Auxiliary-path interpolant `z_t = (1-t)*(x_d + eps) + t*x0`.
///
/// # Safety
/// `x0`, `xd`, and `eps` must each point to `len` readable doubles; `out`
/// must be writable for `len`.
#[no_mangle]
pub unsafe extern "C" fn llab_interpolate_aux(
    x0: *const f64,
    xd: *const f64,
    eps: *const f64,
    len: usize,
    t: f64,
    out: *mut f64,
) -> LlabStatus {
    check_null!(x0, "x0");
    check_null!(xd, "xd");
    check_null!(eps, "eps");
    check_null!(out, "out");
    if len == 0 {
        set_error("len must be >= 1");
        return LlabStatus::InvalidArgument;
    }
    let mk = |p: *const f64| Tensor::new(vec![len], std::slice::from_raw_parts(p, len).to_vec());
    let (x0t, xdt, epst) = match (mk(x0), mk(xd), mk(eps)) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return fail(e),
    };
    match interpolate_aux(&x0t, &xdt, &epst, t) {
        Ok(z) => {
            std::ptr::copy_nonoverlapping(z.data().as_ptr(), out, len);
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Loads a stored sample from its `manifest.json` path.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated UTF-8 path; `out` must be a
/// valid destination.
#[no_mangle]
pub unsafe extern "C" fn llab_sample_read(
    manifest_path: *const c_char,
    out: *mut *mut LlabSample,
) -> LlabStatus {
    check_null!(manifest_path, "manifest_path");
    check_null!(out, "out");
    let path = match CStr::from_ptr(manifest_path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("manifest_path is not valid utf-8");
            return LlabStatus::InvalidArgument;
        }
    };
    match layerlab_core::dataset::read_sample(Path::new(path)) {
        Ok(sample) => {
            *out = Box::into_raw(Box::new(LlabSample(sample)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `sample` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn llab_sample_free(sample: *mut LlabSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// # Safety
/// `sample` must be a valid handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn llab_sample_layer_count(sample: *const LlabSample) -> usize {
    sample.as_ref().map_or(0, |s| s.0.layer_count())
}

/// # Safety
/// `sample` must be a valid handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn llab_sample_height(sample: *const LlabSample) -> usize {
    sample.as_ref().map_or(0, |s| s.0.dims().0)
}

/// # Safety
/// `sample` must be a valid handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn llab_sample_width(sample: *const LlabSample) -> usize {
    sample.as_ref().map_or(0, |s| s.0.dims().1)
}

/// Recomposes a sample's stack (background plus layers, without the shadow
/// residual).
///
/// # Safety
/// `sample` must be valid; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn llab_sample_composite(
    sample: *const LlabSample,
    out: *mut *mut LlabImage,
) -> LlabStatus {
    check_null!(sample, "sample");
    check_null!(out, "out");
    let s = &(*sample).0;
    match composite(s.background(), s.layers()) {
        Ok(image) => {
            *out = Box::into_raw(Box::new(LlabImage(image)));
            LlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}
