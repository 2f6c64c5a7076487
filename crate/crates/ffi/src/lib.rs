//! C ABI for phantom generation, the loss functions, ROC-AUC and
//! checkpoint inference.
//!
//! Every function returns a [`VlStatus`]. On failure the message is kept in
//! thread-local storage and read with [`vl_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, UnwindSafe};
use std::path::Path;

use ndarray::Array3;
use voxlesion::checkpoint::Checkpoint;
use voxlesion::evaluation::roc_auc;
use voxlesion::inference::{predict_case, InferenceConfig, PredictionResult};
use voxlesion::losses::{dice_loss, entropy_loss};
use voxlesion::network::Model;
use voxlesion::phantom::{generate_phantom, Phantom, PhantomSpec};
use voxlesion::volume::{BinaryMask, Geometry, Volume3D};
use voxlesion::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Runtime = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VlStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::GridMismatch(_) => VlStatus::ShapeMismatch,
        Error::Io { .. } => VlStatus::Io,
        Error::Format { .. } | Error::Nifti(_) | Error::Json(_) | Error::Csv(_) | Error::Image(_) => {
            VlStatus::Format
        }
        Error::InvalidArgument(_) | Error::InvalidConfig(_) | Error::EmptyMask(_) | Error::Provenance(_) => {
            VlStatus::InvalidArgument
        }
        _ => VlStatus::Runtime,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Fail> + UnwindSafe>(f: F) -> VlStatus {
    match catch_unwind(f) {
        Ok(Ok(())) => VlStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            VlStatus::NullPointer
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            VlStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            VlStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_ptr<'a, T>(ptr: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or(Fail::Null(what))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &'static str) -> Result<&'a T, Fail> {
    ptr.as_ref().ok_or(Fail::Null(what))
}

fn copy_out<T: Copy>(src: &[T], dst: *mut T, len: usize) -> Result<(), Fail> {
    if dst.is_null() {
        return Err(Fail::Null("output buffer"));
    }
    if len != src.len() {
        return Err(Fail::Arg(format!("buffer holds {len} elements, need {}", src.len())));
    }
    unsafe { std::ptr::copy_nonoverlapping(src.as_ptr(), dst, len) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A generated phantom case.
pub struct VlPhantom(Phantom);

/// Generate a phantom with the default 64³ specification.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vl_phantom_generate(seed: u64, out: *mut *mut VlPhantom) -> VlStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = generate_phantom(&PhantomSpec::default(), seed)?;
        *out = Box::into_raw(Box::new(VlPhantom(p)));
        Ok(())
    })
}

/// Writes the three dimensions of the phantom grid into `shape`.
///
/// # Safety
/// `p` must come from [`vl_phantom_generate`]; `shape` must hold 3 elements.
#[no_mangle]
pub unsafe extern "C" fn vl_phantom_shape(p: *const VlPhantom, shape: *mut usize) -> VlStatus {
    guard(|| {
        let p = handle(p, "phantom")?;
        copy_out(&p.0.image.data().shape().to_vec(), shape, 3)
    })
}

/// Copies the image (C order) into `buf` of `len` floats.
///
/// # Safety
/// `p` must be a live phantom and `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn vl_phantom_image(p: *const VlPhantom, buf: *mut f32, len: usize) -> VlStatus {
    guard(|| {
        let p = handle(p, "phantom")?;
        copy_out(p.0.image.as_slice(), buf, len)
    })
}

/// Copies the prostate mask (0/1) into `buf`.
///
/// # Safety
/// `p` must be a live phantom and `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vl_phantom_prostate(p: *const VlPhantom, buf: *mut u8, len: usize) -> VlStatus {
    guard(|| {
        let p = handle(p, "phantom")?;
        let m: Vec<u8> = p.0.prostate.as_slice().iter().map(|&b| b as u8).collect();
        copy_out(&m, buf, len)
    })
}

/// Copies the lesion label (0/1) into `buf`.
///
/// # Safety
/// `p` must be a live phantom and `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vl_phantom_label(p: *const VlPhantom, buf: *mut u8, len: usize) -> VlStatus {
    guard(|| {
        let p = handle(p, "phantom")?;
        copy_out(p.0.label.as_slice(), buf, len)
    })
}

/// # Safety
/// `p` must come from [`vl_phantom_generate`] or be null.
#[no_mangle]
pub unsafe extern "C" fn vl_phantom_free(p: *mut VlPhantom) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Mean Shannon entropy of `n_voxels` class distributions stored voxel-major.
///
/// # Safety
/// `probs` must hold `n_voxels * n_classes` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vl_entropy_loss(
    probs: *const f64,
    n_voxels: usize,
    n_classes: usize,
    out: *mut f64,
) -> VlStatus {
    guard(|| {
        let p = slice(probs, n_voxels.checked_mul(n_classes).ok_or(Fail::Arg("size overflow".into()))?, "probs")?;
        *out_ptr(out, "out")? = entropy_loss(p, n_classes, None)?;
        Ok(())
    })
}

/// Soft Dice loss of lesion probabilities `p` against binary labels `y`.
///
/// # Safety
/// `p` and `y` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vl_dice_loss(p: *const f64, y: *const u8, n: usize, smooth: f64, out: *mut f64) -> VlStatus {
    guard(|| {
        let v = dice_loss(slice(p, n, "p")?, slice(y, n, "y")?, None, smooth)?;
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// ROC-AUC of `scores` against 0/1 `labels`; fails when one class is absent.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vl_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> VlStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        *out_ptr(out, "out")? = roc_auc(s, &l)?;
        Ok(())
    })
}

/// A loaded checkpoint with its decision threshold.
pub struct VlModel {
    model: Model,
    threshold: f64,
    inference: InferenceConfig,
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vl_model_load(path: *const c_char, out: *mut *mut VlModel) -> VlStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| Fail::Arg("path is not UTF-8".into()))?;
        let out = out_ptr(out, "out")?;
        let ck = Checkpoint::load(Path::new(path))?;
        let inference = InferenceConfig::default();
        let threshold = ck.meta.threshold.unwrap_or(inference.default_threshold);
        *out = Box::into_raw(Box::new(VlModel { model: ck.to_model()?, threshold, inference }));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live model; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vl_model_num_parameters(m: *const VlModel, out: *mut usize) -> VlStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(m, "model")?.model.num_parameters();
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`vl_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn vl_model_free(m: *mut VlModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Whole-volume prediction.
pub struct VlPrediction(PredictionResult);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VlCandidate {
    pub score: f64,
    pub size: usize,
    pub volume_mm3: f64,
    pub centroid: [f64; 3],
}

/// Predict a C-order volume of shape `dims` with voxel `spacing` (mm).
///
/// # Safety
/// `image` must hold `dims[0]*dims[1]*dims[2]` floats and `mask` as many
/// bytes; `dims` and `spacing` must hold 3 elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vl_predict(
    m: *const VlModel,
    image: *const f32,
    mask: *const u8,
    dims: *const usize,
    spacing: *const f64,
    out: *mut *mut VlPrediction,
) -> VlStatus {
    guard(|| {
        let m = handle(m, "model")?;
        let d = slice(dims, 3, "dims")?;
        let sp = slice(spacing, 3, "spacing")?;
        let shape = [d[0], d[1], d[2]];
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or(Fail::Arg("size overflow".into()))?;
        let geom = Geometry { spacing: [sp[0], sp[1], sp[2]], origin: [0.0; 3] };
        let img = Array3::from_shape_vec(shape, slice(image, n, "image")?.to_vec())
            .map_err(|e| Fail::Arg(e.to_string()))?;
        let msk = Array3::from_shape_vec(shape, slice(mask, n, "mask")?.iter().map(|&v| v != 0).collect())
            .map_err(|e| Fail::Arg(e.to_string()))?;
        let vol = Volume3D::new(img, geom)?;
        let prostate = BinaryMask::new(msk, geom)?;
        let out = out_ptr(out, "out")?;
        let p = predict_case(&m.model, &vol, &prostate, &m.inference, m.threshold)?;
        *out = Box::into_raw(Box::new(VlPrediction(p)));
        Ok(())
    })
}

/// # Safety
/// `p` must be a live prediction and `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn vl_prediction_probability(p: *const VlPrediction, buf: *mut f32, len: usize) -> VlStatus {
    guard(|| copy_out(handle(p, "prediction")?.0.probability.as_slice(), buf, len))
}

/// # Safety
/// `p` must be a live prediction and `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn vl_prediction_entropy(p: *const VlPrediction, buf: *mut f32, len: usize) -> VlStatus {
    guard(|| copy_out(handle(p, "prediction")?.0.entropy.as_slice(), buf, len))
}

/// # Safety
/// `p` must be a live prediction; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vl_prediction_patient_score(p: *const VlPrediction, out: *mut f64) -> VlStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(p, "prediction")?.0.patient_score;
        Ok(())
    })
}

/// # Safety
/// `p` must be a live prediction; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vl_prediction_num_candidates(p: *const VlPrediction, out: *mut usize) -> VlStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(p, "prediction")?.0.candidates.len();
        Ok(())
    })
}

/// Candidate `index`, in descending score order.
///
/// # Safety
/// `p` must be a live prediction; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vl_prediction_candidate(
    p: *const VlPrediction,
    index: usize,
    out: *mut VlCandidate,
) -> VlStatus {
    guard(|| {
        let c = handle(p, "prediction")?
            .0
            .candidates
            .get(index)
            .ok_or_else(|| Fail::Arg(format!("candidate index {index} out of range")))?;
        *out_ptr(out, "out")? = VlCandidate {
            score: c.score,
            size: c.component.size(),
            volume_mm3: c.volume_mm3,
            centroid: c.component.centroid(),
        };
        Ok(())
    })
}

/// # Safety
/// `p` must come from [`vl_predict`] or be null.
#[no_mangle]
pub unsafe extern "C" fn vl_prediction_free(p: *mut VlPrediction) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}
