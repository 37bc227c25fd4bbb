//! C ABI over `pap-core`: load checkpoints, classify, segment, Grad-CAM and
//! confusion-matrix metrics.
//!
//! Every fallible function returns a [`PapStatus`]. On failure a message is
//! available from [`pap_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pap_core::checkpoint::Checkpoint;
use pap_core::classifier::{decide, grad_cam, probabilities, ClassifierModel};
use pap_core::dataset::BinaryLabel;
use pap_core::evaluation::{metrics_from_matrix, ConfusionMatrix2};
use pap_core::imaging::{normalize01, resize_bilinear, to_rgb, RasterImage};
use pap_core::unet::{segment, UNetConfig, UNetModel};
use pap_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Panic = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PapLabel {
    Normal = 0,
    Abnormal = 1,
}

impl From<BinaryLabel> for PapLabel {
    fn from(l: BinaryLabel) -> Self {
        match l {
            BinaryLabel::Normal => PapLabel::Normal,
            BinaryLabel::Abnormal => PapLabel::Abnormal,
        }
    }
}

/// Headline metrics of a 2×2 confusion matrix (Abnormal positive).
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PapMetrics {
    pub accuracy: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    /// Non-zero when some 0/0 ratio was taken as 0.
    pub undefined_ratio: i32,
}

/// Opaque classifier handle.
pub struct PapClassifier {
    model: ClassifierModel<f32>,
}

/// Opaque U-Net handle.
pub struct PapUNet {
    model: UNetModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> PapStatus {
    match e {
        Error::Io { .. } | Error::Decode(_) => PapStatus::Io,
        Error::Checkpoint(_) => PapStatus::Checkpoint,
        Error::ShapeMismatch { .. } => PapStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) | Error::Dataset(_) => PapStatus::InvalidArgument,
        _ => PapStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), (PapStatus, String)>) -> PapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PapStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PapStatus::Panic
        }
    }
}

fn core<T>(r: pap_core::Result<T>) -> Result<T, (PapStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (PapStatus, String) {
    (PapStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, (PapStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (PapStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

/// Copies an interleaved 8-bit image (1 or 3 channels) from caller memory.
unsafe fn image_arg(
    pixels: *const u8,
    width: usize,
    height: usize,
    channels: usize,
) -> Result<RasterImage, (PapStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or((PapStatus::InvalidArgument, "image size overflows".to_string()))?;
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    core(RasterImage::new(width, height, channels, data))
}

fn label_arg(label: i32) -> Result<BinaryLabel, (PapStatus, String)> {
    BinaryLabel::from_index(label as usize)
        .filter(|_| label >= 0)
        .ok_or((PapStatus::InvalidArgument, format!("class must be 0 or 1, got {label}")))
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn pap_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a classifier checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pap_classifier_load(path: *const c_char, out: *mut *mut PapClassifier) -> PapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let model = core(Checkpoint::load(&path).and_then(|ck| ClassifierModel::from_checkpoint(&ck)))?;
        *out = Box::into_raw(Box::new(PapClassifier { model }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`pap_classifier_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pap_classifier_free(handle: *mut PapClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Side length of the square network input (images are resized to it).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pap_classifier_input_size(handle: *const PapClassifier, out: *mut usize) -> PapStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = h.model.arch().input_size;
        Ok(())
    })
}

fn classifier_input(h: &PapClassifier, img: &RasterImage) -> Result<pap_core::Tensor<f32>, (PapStatus, String)> {
    let size = h.model.arch().input_size;
    Ok(normalize01(&core(resize_bilinear(&to_rgb(img), size, size))?))
}

/// Classifies one interleaved 8-bit image. Writes class probabilities
/// (Normal, Abnormal) to `probs_out[0..2]` and the decision to `label`.
///
/// # Safety
/// `pixels` must hold `width·height·channels` bytes; `probs_out` must
/// hold two doubles; all pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pap_classifier_predict(
    handle: *const PapClassifier,
    pixels: *const u8,
    width: usize,
    height: usize,
    channels: usize,
    probs_out: *mut f64,
    label: *mut PapLabel,
) -> PapStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if probs_out.is_null() || label.is_null() {
            return Err(null("output"));
        }
        let img = image_arg(pixels, width, height, channels)?;
        let x = classifier_input(h, &img)?;
        let p = core(probabilities(&h.model, &x))?;
        std::slice::from_raw_parts_mut(probs_out, 2).copy_from_slice(&p);
        *label = decide(p).into();
        Ok(())
    })
}

/// Grad-CAM heatmap for `target_class` (0 Normal, 1 Abnormal), written as
/// `size × size` doubles in [0, 1] where `size` is the input size.
///
/// # Safety
/// `pixels` must hold `width·height·channels` bytes and `heatmap` must hold
/// `heatmap_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pap_classifier_grad_cam(
    handle: *const PapClassifier,
    pixels: *const u8,
    width: usize,
    height: usize,
    channels: usize,
    target_class: i32,
    heatmap: *mut f64,
    heatmap_len: usize,
) -> PapStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if heatmap.is_null() {
            return Err(null("heatmap"));
        }
        let target = label_arg(target_class)?;
        let size = h.model.arch().input_size;
        if heatmap_len != size * size {
            return Err((
                PapStatus::InvalidArgument,
                format!("heatmap buffer must hold {} values, got {heatmap_len}", size * size),
            ));
        }
        let img = image_arg(pixels, width, height, channels)?;
        let cam = core(grad_cam(&h.model, &classifier_input(h, &img)?, target))?;
        std::slice::from_raw_parts_mut(heatmap, heatmap_len).copy_from_slice(&cam.heatmap);
        Ok(())
    })
}

/// Loads a U-Net checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pap_unet_load(path: *const c_char, out: *mut *mut PapUNet) -> PapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let model = core(Checkpoint::load(&path).and_then(|ck| UNetModel::from_checkpoint(&ck)))?;
        *out = Box::into_raw(Box::new(PapUNet { model }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`pap_unet_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pap_unet_free(handle: *mut PapUNet) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Segments an image whose sides are multiples of 8. Writes `width·height`
/// bytes (0 or 255) to `mask`. `refine` non-zero enables the blur and
/// open/close clean-up.
///
/// # Safety
/// `pixels` must hold `width·height·channels` bytes and `mask` must hold
/// `mask_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pap_unet_segment(
    handle: *const PapUNet,
    pixels: *const u8,
    width: usize,
    height: usize,
    channels: usize,
    threshold: f64,
    refine: i32,
    mask: *mut u8,
    mask_len: usize,
) -> PapStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if mask.is_null() {
            return Err(null("mask"));
        }
        if mask_len != width * height {
            return Err((
                PapStatus::InvalidArgument,
                format!("mask buffer must hold {} bytes, got {mask_len}", width * height),
            ));
        }
        if !(0.0..1.0).contains(&threshold) {
            return Err((
                PapStatus::InvalidArgument,
                format!("threshold {threshold} outside [0, 1)"),
            ));
        }
        let img = image_arg(pixels, width, height, channels)?;
        let cfg = UNetConfig {
            threshold,
            refine: refine != 0,
            ..UNetConfig::default()
        };
        let m = core(segment(&h.model, &img, &cfg))?;
        std::slice::from_raw_parts_mut(mask, mask_len).copy_from_slice(m.values());
        Ok(())
    })
}

/// Support-weighted metrics of a confusion matrix with Abnormal positive.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pap_metrics_from_confusion(
    tp: u64,
    fn_: u64,
    fp: u64,
    tn: u64,
    out: *mut PapMetrics,
) -> PapStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = core(metrics_from_matrix(&ConfusionMatrix2::new(tp, fn_, fp, tn)))?;
        *out = PapMetrics {
            accuracy: m.accuracy,
            precision_weighted: m.precision_weighted,
            recall_weighted: m.recall_weighted,
            f1_weighted: m.f1_weighted,
            undefined_ratio: m.undefined_ratio as i32,
        };
        Ok(())
    })
}
