//! C ABI over `epsam-core`.
//!
//! Every function returns an [`EpsamStatus`]. On failure the message is kept
//! per thread and read back with [`epsam_last_error`]. Images are passed as
//! row-major `size × size × 3` doubles in `[0, 1]`; masks as `size × size`
//! bytes holding 0 or 1. Handles are opaque and must be released with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use epsam_core::cam::{cam_for_patch, Classifier};
use epsam_core::grid::{BinaryMask, Patch, PatchLabel};
use epsam_core::pepm::{entropy_map, sample_points, PointPrompt, PointPromptSet, Polarity};
use epsam_core::postproc::{morph_open, quantile_threshold, rotate_fuse};
use epsam_core::segmenter::{Decoder, Encoder};
use epsam_core::Error;
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeError = 3,
    DomainError = 4,
    IoError = 5,
    FormatError = 6,
    Degenerate = 7,
    Internal = 99,
}

/// Trained patch classifier.
pub struct EpsamClassifier {
    model: Classifier,
}

/// Frozen encoder plus trained mask decoder.
pub struct EpsamSegmenter {
    encoder: Encoder,
    decoder: Decoder,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("no interior nul"));
}

struct Failure(EpsamStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => EpsamStatus::ShapeError,
            Error::Domain(_) => EpsamStatus::DomainError,
            Error::Config(_) | Error::Prompt(_) => EpsamStatus::InvalidArgument,
            Error::Sampling(_) => EpsamStatus::Degenerate,
            Error::Io { .. } | Error::Image { .. } => EpsamStatus::IoError,
            Error::Format(_) | Error::Json(_) => EpsamStatus::FormatError,
            _ => EpsamStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: EpsamStatus, msg: &str) -> Failure {
    Failure(status, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EpsamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EpsamStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EpsamStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(EpsamStatus::NullPointer, &format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    non_null(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EpsamStatus::InvalidArgument, &format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn image_arg(pixels: *const f64, size: usize) -> Result<Patch, Failure> {
    non_null(pixels, "pixels")?;
    let data = std::slice::from_raw_parts(pixels, size * size * 3).to_vec();
    let arr = Array3::from_shape_vec((size, size, 3), data).map_err(|e| fail(EpsamStatus::ShapeError, &e.to_string()))?;
    Ok(Patch::new("ffi", "ffi", arr, PatchLabel::Positive)?)
}

unsafe fn map_arg(values: *const f64, h: usize, w: usize) -> Result<Array2<f64>, Failure> {
    non_null(values, "map")?;
    if h == 0 || w == 0 {
        return Err(fail(EpsamStatus::ShapeError, "empty map"));
    }
    let data = std::slice::from_raw_parts(values, h * w).to_vec();
    Array2::from_shape_vec((h, w), data).map_err(|e| fail(EpsamStatus::ShapeError, &e.to_string()))
}

unsafe fn mask_arg(values: *const u8, h: usize, w: usize) -> Result<BinaryMask, Failure> {
    non_null(values, "mask")?;
    if h == 0 || w == 0 {
        return Err(fail(EpsamStatus::ShapeError, "empty mask"));
    }
    let data = std::slice::from_raw_parts(values, h * w);
    Ok(BinaryMask::from_fn(h, w, |i, j| data[i * w + j] != 0))
}

unsafe fn write_mask(mask: &BinaryMask, out: *mut u8) -> Result<(), Failure> {
    non_null(out, "output mask")?;
    let (h, w) = mask.dim();
    let dst = std::slice::from_raw_parts_mut(out, h * w);
    for (d, s) in dst.iter_mut().zip(mask.view().iter()) {
        *d = *s;
    }
    Ok(())
}

unsafe fn write_map(map: &Array2<f64>, out: *mut f64) -> Result<(), Failure> {
    non_null(out, "output map")?;
    let dst = std::slice::from_raw_parts_mut(out, map.len());
    for (d, s) in dst.iter_mut().zip(map.iter()) {
        *d = *s;
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn epsam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn epsam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn epsam_classifier_load(path: *const c_char, out: *mut *mut EpsamClassifier) -> EpsamStatus {
    guard(|| {
        non_null(out, "out")?;
        let model = Classifier::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(EpsamClassifier { model }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`epsam_classifier_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn epsam_classifier_free(handle: *mut EpsamClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Probability that the patch is positive.
///
/// # Safety
/// `pixels` must hold `size * size * 3` doubles.
#[no_mangle]
pub unsafe extern "C" fn epsam_classifier_predict(
    handle: *const EpsamClassifier,
    pixels: *const f64,
    size: usize,
    out_prob: *mut f64,
) -> EpsamStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(out_prob, "out_prob")?;
        let patch = image_arg(pixels, size)?;
        *out_prob = (*handle).model.predict_prob(&patch)?;
        Ok(())
    })
}

/// Normalized CAM, optionally rotate-fused, written to `size * size` doubles.
///
/// # Safety
/// `pixels` must hold `size * size * 3` doubles and `out_cam` `size * size`.
#[no_mangle]
pub unsafe extern "C" fn epsam_classifier_cam(
    handle: *const EpsamClassifier,
    pixels: *const f64,
    size: usize,
    fused: bool,
    out_cam: *mut f64,
) -> EpsamStatus {
    guard(|| {
        non_null(handle, "handle")?;
        let model = &(*handle).model;
        let patch = image_arg(pixels, size)?;
        let cam = if fused {
            rotate_fuse(|p: &Patch| cam_for_patch(model, p), &patch)?
        } else {
            cam_for_patch(model, &patch)?
        };
        write_map(&cam.values, out_cam)
    })
}

/// # Safety
/// Both paths must be nul-terminated strings and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn epsam_segmenter_load(
    encoder_path: *const c_char,
    decoder_path: *const c_char,
    out: *mut *mut EpsamSegmenter,
) -> EpsamStatus {
    guard(|| {
        non_null(out, "out")?;
        let encoder = Encoder::load(&path_arg(encoder_path, "encoder_path")?)?;
        let decoder = Decoder::load(&path_arg(decoder_path, "decoder_path")?)?;
        *out = Box::into_raw(Box::new(EpsamSegmenter { encoder, decoder }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`epsam_segmenter_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn epsam_segmenter_free(handle: *mut EpsamSegmenter) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Binary mask for a patch given `n_points` foreground prompts stored as
/// `(row, col)` pairs.
///
/// # Safety
/// `pixels` must hold `size * size * 3` doubles, `points` `2 * n_points`
/// values and `out_mask` `size * size` bytes.
#[no_mangle]
pub unsafe extern "C" fn epsam_segmenter_predict(
    handle: *const EpsamSegmenter,
    pixels: *const f64,
    size: usize,
    points: *const u32,
    n_points: usize,
    out_mask: *mut u8,
) -> EpsamStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(points, "points")?;
        let seg = &*handle;
        let patch = image_arg(pixels, size)?;
        let raw = std::slice::from_raw_parts(points, 2 * n_points);
        let prompts = PointPromptSet {
            patch_id: patch.id.clone(),
            points: raw
                .chunks_exact(2)
                .map(|p| PointPrompt { row: p[0] as usize, col: p[1] as usize })
                .collect(),
            polarity: Polarity::Foreground,
        };
        let pred = seg.decoder.predict(&seg.encoder.encode_image(&patch)?, &prompts)?;
        write_mask(&pred.mask, out_mask)
    })
}

/// Keeps pixels strictly above the `q`-quantile of the positive values.
///
/// # Safety
/// `cam` must hold `h * w` doubles and `out_mask` `h * w` bytes.
#[no_mangle]
pub unsafe extern "C" fn epsam_quantile_threshold(
    cam: *const f64,
    h: usize,
    w: usize,
    q: f64,
    out_mask: *mut u8,
) -> EpsamStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&q) {
            return Err(fail(EpsamStatus::InvalidArgument, "q must lie in [0, 1]"));
        }
        write_mask(&quantile_threshold(&map_arg(cam, h, w)?, q), out_mask)
    })
}

/// Opening with a disk of the given radius.
///
/// # Safety
/// `mask` and `out_mask` must each hold `h * w` bytes.
#[no_mangle]
pub unsafe extern "C" fn epsam_morph_open(
    mask: *const u8,
    h: usize,
    w: usize,
    radius: usize,
    out_mask: *mut u8,
) -> EpsamStatus {
    guard(|| write_mask(&morph_open(&mask_arg(mask, h, w)?, radius), out_mask))
}

/// Normalizes a non-negative map to sum 1. An all-zero map yields zeros
/// and sets `out_degenerate`.
///
/// # Safety
/// `activation` and `out` must hold `h * w` doubles.
#[no_mangle]
pub unsafe extern "C" fn epsam_entropy_map(
    activation: *const f64,
    h: usize,
    w: usize,
    out: *mut f64,
    out_degenerate: *mut bool,
) -> EpsamStatus {
    guard(|| {
        non_null(out_degenerate, "out_degenerate")?;
        let e = entropy_map(&map_arg(activation, h, w)?)?;
        *out_degenerate = e.degenerate;
        write_map(&e.values, out)
    })
}

/// Samples up to `k` distinct points from `activation` without replacement.
/// Writes `(row, col)` pairs and the number of points drawn.
///
/// # Safety
/// `activation` must hold `h * w` doubles and `out_points` `2 * k` values.
#[no_mangle]
pub unsafe extern "C" fn epsam_sample_points(
    activation: *const f64,
    h: usize,
    w: usize,
    k: usize,
    seed: u64,
    out_points: *mut u32,
    out_count: *mut usize,
) -> EpsamStatus {
    guard(|| {
        non_null(out_points, "out_points")?;
        non_null(out_count, "out_count")?;
        let e = entropy_map(&map_arg(activation, h, w)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = sample_points(&e, k, &mut rng, "ffi")?;
        let dst = std::slice::from_raw_parts_mut(out_points, 2 * k);
        for (slot, p) in dst.chunks_exact_mut(2).zip(&set.points) {
            slot[0] = p.row as u32;
            slot[1] = p.col as u32;
        }
        *out_count = set.count();
        Ok(())
    })
}

/// `|initial ∩ predicted| / |predicted|`; an empty prediction gives 0 and
/// sets `out_degenerate`.
///
/// # Safety
/// Both masks must hold `h * w` bytes.
#[no_mangle]
pub unsafe extern "C" fn epsam_ids(
    initial: *const u8,
    predicted: *const u8,
    h: usize,
    w: usize,
    out_value: *mut f64,
    out_degenerate: *mut bool,
) -> EpsamStatus {
    guard(|| {
        non_null(out_value, "out_value")?;
        non_null(out_degenerate, "out_degenerate")?;
        let score = epsam_core::selftrain::ids(&mask_arg(initial, h, w)?, &mask_arg(predicted, h, w)?)?;
        *out_value = score.value;
        *out_degenerate = score.degenerate;
        Ok(())
    })
}
