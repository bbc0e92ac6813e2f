//! C ABI over salfit-core: opaque classifier and masker handles, batch
//! inference on 64×64 RGB images, and the PxAP metric.
//!
//! Fallible calls return an [`SfStatus`]. The message of the most recent
//! failure on the calling thread can be copied out with `sf_last_error`.
//! Images are passed as contiguous `n × 64 × 64 × 3` float arrays
//! (row-major, channels last, values in [0, 1]).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use salfit_core::classifier::Classifier;
use salfit_core::data::{CHANNELS, IMAGE_SIDE};
use salfit_core::masker::Masker;
use salfit_core::metrics::pxap;
use salfit_core::tensor::Tensor;
use salfit_core::trainer::load_masker_pair;
use salfit_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    Shape = 4,
    InvalidArgument = 5,
    Runtime = 6,
    Panic = 7,
}

/// Opaque classifier handle.
pub struct SfClassifier {
    net: Classifier,
}

/// Opaque masker handle; owns the classifier its activations come from.
pub struct SfMasker {
    masker: Masker,
    features: Classifier,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SfStatus {
    match e {
        Error::Io { .. } => SfStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Image(_) => SfStatus::Format,
        Error::Shape(_) | Error::MissingLayer(_) => SfStatus::Shape,
        Error::Sample { .. } => SfStatus::InvalidArgument,
        Error::InvalidConfig { .. } | Error::Limit { .. } | Error::EmptyDataset(_) => {
            SfStatus::InvalidArgument
        }
        _ => SfStatus::Runtime,
    }
}

struct Failure(SfStatus, String);

fn fail(status: SfStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status plus stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SfStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(SfStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SfStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
const IMAGE_LEN: usize = PIXELS * CHANNELS;

/// Copies `n` HWC images into a (C, N, H, W) tensor.
fn to_tensor(images: &[f32], n: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(CHANNELS, n, IMAGE_SIDE, IMAGE_SIDE);
    for s in 0..n {
        let img = &images[s * IMAGE_LEN..(s + 1) * IMAGE_LEN];
        for c in 0..CHANNELS {
            let dst = t.slice_mut(c, s);
            for p in 0..PIXELS {
                dst[p] = img[p * CHANNELS + c];
            }
        }
    }
    t
}

unsafe fn image_batch<'a>(images: *const f32, n: usize) -> Result<&'a [f32], Failure> {
    if images.is_null() {
        return Err(fail(SfStatus::NullPointer, "images is null"));
    }
    if n == 0 {
        return Err(fail(SfStatus::InvalidArgument, "batch size must be >= 1"));
    }
    Ok(std::slice::from_raw_parts(images, n * IMAGE_LEN))
}

unsafe fn output<'a, T>(
    out: *mut T,
    have: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [T], Failure> {
    if out.is_null() {
        return Err(fail(SfStatus::NullPointer, format!("{what} is null")));
    }
    if have < need {
        return Err(fail(
            SfStatus::Shape,
            format!("{what} holds {have} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(out, need))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Side length of the square images the networks accept.
#[no_mangle]
pub extern "C" fn sf_image_side() -> usize {
    IMAGE_SIDE
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// including the terminator, or 0 when no error has been recorded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Loads a classifier checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_classifier_load(
    path: *const c_char,
    out: *mut *mut SfClassifier,
) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(SfStatus::NullPointer, "out is null"));
        }
        let net = Classifier::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SfClassifier { net }));
        Ok(())
    })
}

/// Releases a classifier handle. Null is ignored.
///
/// # Safety
/// `c` must be null or a handle from `sf_classifier_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_classifier_free(c: *mut SfClassifier) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_classifier_num_classes(c: *const SfClassifier) -> usize {
    c.as_ref().map_or(0, |c| c.net.num_classes())
}

/// Class probabilities for `n` images, written row-major into `probs`
/// (`n × num_classes` values).
///
/// # Safety
/// `images` must hold `n·64·64·3` floats and `probs` `probs_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sf_classifier_predict(
    c: *const SfClassifier,
    images: *const f32,
    n: usize,
    probs: *mut f32,
    probs_len: usize,
) -> SfStatus {
    guard(|| {
        let c = c
            .as_ref()
            .ok_or_else(|| fail(SfStatus::NullPointer, "classifier is null"))?;
        let imgs = image_batch(images, n)?;
        let k = c.net.num_classes();
        let out = output(probs, probs_len, n * k, "probs")?;
        for (b, chunk) in imgs.chunks(64 * IMAGE_LEN).enumerate() {
            let m = chunk.len() / IMAGE_LEN;
            let p = c.net.predict_probs(&to_tensor(chunk, m))?;
            out[b * 64 * k..b * 64 * k + m * k].copy_from_slice(&p);
        }
        Ok(())
    })
}

/// Loads a masker checkpoint. Activations come from the feature classifier
/// saved next to it (`<stem>_features.bin`) when present, otherwise from a
/// copy of `classifier`.
///
/// # Safety
/// `path` must be a NUL-terminated string, `classifier` a live handle and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sf_masker_load(
    path: *const c_char,
    classifier: *const SfClassifier,
    out: *mut *mut SfMasker,
) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(SfStatus::NullPointer, "out is null"));
        }
        let base = classifier
            .as_ref()
            .ok_or_else(|| fail(SfStatus::NullPointer, "classifier is null"))?;
        let (masker, features) = load_masker_pair(&path_arg(path)?, &base.net)?;
        *out = Box::into_raw(Box::new(SfMasker { masker, features }));
        Ok(())
    })
}

/// Releases a masker handle. Null is ignored.
///
/// # Safety
/// `m` must be null or a handle from `sf_masker_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_masker_free(m: *mut SfMasker) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Saliency masks in [0, 1] for `n` images, written as `n × 64 × 64`
/// row-major values.
///
/// # Safety
/// `images` must hold `n·64·64·3` floats and `masks` `masks_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sf_masker_predict(
    m: *const SfMasker,
    images: *const f32,
    n: usize,
    masks: *mut f32,
    masks_len: usize,
) -> SfStatus {
    guard(|| {
        let m = m
            .as_ref()
            .ok_or_else(|| fail(SfStatus::NullPointer, "masker is null"))?;
        let imgs = image_batch(images, n)?;
        let out = output(masks, masks_len, n * PIXELS, "masks")?;
        for (b, chunk) in imgs.chunks(64 * IMAGE_LEN).enumerate() {
            let k = chunk.len() / IMAGE_LEN;
            let acts = m
                .features
                .forward_with_activations(&to_tensor(chunk, k))?
                .activations;
            let pass = m.masker.forward(&acts)?;
            out[b * 64 * PIXELS..b * 64 * PIXELS + k * PIXELS].copy_from_slice(&pass.mask.data);
        }
        Ok(())
    })
}

/// Pixel average precision (percent) of `scores` against binary `gt`
/// (0 or 1), pooled over all `len` pixels.
///
/// # Safety
/// `scores` and `gt` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_pxap(
    scores: *const f32,
    gt: *const u8,
    len: usize,
    out: *mut f64,
) -> SfStatus {
    guard(|| {
        if scores.is_null() || gt.is_null() || out.is_null() {
            return Err(fail(
                SfStatus::NullPointer,
                "scores, gt and out must be non-null",
            ));
        }
        let s = std::slice::from_raw_parts(scores, len);
        let g = std::slice::from_raw_parts(gt, len);
        *out = pxap(s, g)?;
        Ok(())
    })
}
