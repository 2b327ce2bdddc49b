//! C ABI over the translation library.
//!
//! Every function returns an [`S2Status`]; on failure a message for the
//! calling thread is available from [`s2ldm_last_error`]. Images are
//! row-major `double` buffers in `[-1, 1]`. Models are opaque handles that
//! must be released with [`s2ldm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use s2ldm::autoencoder::AeModel;
use s2ldm::metrics::{evaluate, ImagePair};
use s2ldm::phantom::{gen_pair, normalize_pair, NormalizedImage, PhantomSpec, DEFAULT_WINDOW_LEVEL, DEFAULT_WINDOW_WIDTH};
use s2ldm::pipeline::{ae_from_checkpoint, diff_from_checkpoint, load_checkpoint, translate_all, DiffBundle};
use s2ldm::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S2Status {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    CorruptCheckpoint = 3,
    UnsupportedVersion = 4,
    Io = 5,
    Divergence = 6,
    UndefinedMetric = 7,
    Config = 8,
    Panic = 9,
}

/// Averaged image metrics.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct S2Metrics {
    pub nmae: f64,
    pub nmse: f64,
    pub psnr_db: f64,
    /// 1 when every prediction matched its target exactly.
    pub psnr_exact: i32,
    pub ssim: f64,
}

/// A loaded autoencoder and denoiser pair.
pub struct S2Model {
    ae: AeModel,
    diff: DiffBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> S2Status {
    match e {
        Error::InvalidArgument { .. } => S2Status::InvalidArgument,
        Error::Divergence(_) => S2Status::Divergence,
        Error::UndefinedMetric(_) => S2Status::UndefinedMetric,
        Error::CorruptCheckpoint { .. } | Error::Json(_) => S2Status::CorruptCheckpoint,
        Error::UnsupportedVersion(_) => S2Status::UnsupportedVersion,
        Error::Config { .. } => S2Status::Config,
        Error::Io { .. } => S2Status::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> S2Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            S2Status::Ok
        }
        Ok(Err(Fail::Null(arg))) => {
            set_error(&format!("null pointer passed as `{arg}`"));
            S2Status::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            S2Status::Panic
        }
    }
}

fn non_null<T>(p: *const T, arg: &'static str) -> Result<*const T, Fail> {
    if p.is_null() {
        Err(Fail::Null(arg))
    } else {
        Ok(p)
    }
}

fn pixel_count(height: usize, width: usize) -> Result<usize, Fail> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or(Fail::Lib(Error::InvalidArgument {
            arg: "height",
            reason: "image must be non-empty and fit in memory".into(),
        }))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn path_arg<'a>(p: *const c_char, arg: &'static str) -> Result<&'a Path, Fail> {
    let s = CStr::from_ptr(non_null(p, arg)?).to_str().map_err(|_| {
        Fail::Lib(Error::InvalidArgument {
            arg,
            reason: "path is not valid UTF-8".into(),
        })
    })?;
    Ok(Path::new(s))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn s2ldm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn s2ldm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an autoencoder checkpoint and a matching diffusion checkpoint.
///
/// # Safety
/// Paths must be valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2ldm_model_load(
    ae_path: *const c_char,
    diff_path: *const c_char,
    out: *mut *mut S2Model,
) -> S2Status {
    guard(|| {
        let out = non_null(out, "out")? as *mut *mut S2Model;
        let ae = ae_from_checkpoint(&load_checkpoint(path_arg(ae_path, "ae_path")?)?)?;
        let diff = diff_from_checkpoint(&load_checkpoint(path_arg(diff_path, "diff_path")?)?)?;
        *out = Box::into_raw(Box::new(S2Model { ae, diff }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`s2ldm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn s2ldm_model_free(model: *mut S2Model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Default reverse-process start stored in the diffusion checkpoint.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn s2ldm_model_default_t_start(model: *const S2Model, out: *mut usize) -> S2Status {
    guard(|| {
        let m = &*non_null(model, "model")?;
        *(non_null(out, "out")? as *mut usize) = m.diff.t_start_default;
        Ok(())
    })
}

/// Translates one non-contrast image. `t_start < 0` uses the checkpoint
/// default; 0 decodes the quantized latent directly.
///
/// # Safety
/// `input` and `output` must each hold `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn s2ldm_translate(
    model: *const S2Model,
    input: *const f64,
    height: usize,
    width: usize,
    t_start: i64,
    seed: u64,
    output: *mut f64,
) -> S2Status {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let n = pixel_count(height, width)?;
        let src = std::slice::from_raw_parts(non_null(input, "input")?, n);
        let dst = non_null(output, "output")? as *mut f64;
        let x = NormalizedImage::new(height, width, src.to_vec())?;
        let t0 = usize::try_from(t_start).unwrap_or(m.diff.t_start_default);
        let y = translate_all(&[&x], &m.ae, &m.diff, t0, seed)?.remove(0);
        std::slice::from_raw_parts_mut(dst, n).copy_from_slice(y.pixels());
        Ok(())
    })
}

/// NMAE, NMSE, PSNR (data range 2) and SSIM of one image pair.
///
/// # Safety
/// `pred` and `target` must each hold `height * width` doubles; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn s2ldm_metrics(
    pred: *const f64,
    target: *const f64,
    height: usize,
    width: usize,
    out: *mut S2Metrics,
) -> S2Status {
    guard(|| {
        let n = pixel_count(height, width)?;
        let p = std::slice::from_raw_parts(non_null(pred, "pred")?, n);
        let t = std::slice::from_raw_parts(non_null(target, "target")?, n);
        let out = non_null(out, "out")? as *mut S2Metrics;
        let r = evaluate(
            &[ImagePair {
                pred: p,
                target: t,
                height,
                width,
            }],
            2.0,
        )?;
        *out = S2Metrics {
            nmae: r.nmae,
            nmse: r.nmse,
            psnr_db: r.psnr_db,
            psnr_exact: i32::from(r.psnr_exact),
            ssim: r.ssim,
        };
        Ok(())
    })
}

/// Generates one windowed phantom pair of `size x size` pixels. `mask` may
/// be null; otherwise it receives 1 inside contrast regions and 0 elsewhere.
///
/// # Safety
/// `ncct` and `cect` must hold `size * size` doubles, `mask` (if non-null)
/// `size * size` bytes.
#[no_mangle]
pub unsafe extern "C" fn s2ldm_phantom_pair(
    seed: u64,
    size: usize,
    ncct: *mut f64,
    cect: *mut f64,
    mask: *mut u8,
) -> S2Status {
    guard(|| {
        let n = pixel_count(size, size)?;
        let a = non_null(ncct, "ncct")? as *mut f64;
        let b = non_null(cect, "cect")? as *mut f64;
        let s = gen_pair(seed, size, &PhantomSpec::default())?;
        let p = normalize_pair(&s, DEFAULT_WINDOW_WIDTH, DEFAULT_WINDOW_LEVEL)?;
        std::slice::from_raw_parts_mut(a, n).copy_from_slice(p.ncct.pixels());
        std::slice::from_raw_parts_mut(b, n).copy_from_slice(p.cect.pixels());
        if !mask.is_null() {
            let m = std::slice::from_raw_parts_mut(mask, n);
            for (dst, &src) in m.iter_mut().zip(&p.contrast_mask) {
                *dst = u8::from(src);
            }
        }
        Ok(())
    })
}
