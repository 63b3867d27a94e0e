//! C interface to the inference pipeline and a few one-shot utilities.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free`. Every fallible call returns an [`OdStatus`]; on failure
//! a message for the calling thread is available from [`od_last_error`].
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use omnidistill::config::RunConfig;
use omnidistill::distill::InferencePipeline;
use omnidistill::experiment::write_recording;
use omnidistill::geometry::estimate_homography;
use omnidistill::student::WeightBlob;
use omnidistill::types::{BBox, CameraId, Frame, Point};
use omnidistill::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    /// Frames out of order or timestamps that do not line up.
    Sequence = 5,
    /// Output buffer too small; the required length was still written.
    BufferTooSmall = 6,
    Internal = 7,
}

/// Detection box in pixels: center, size and score in [0, 1].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OdBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl From<BBox> for OdBox {
    fn from(b: BBox) -> Self {
        Self {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            score: b.score,
        }
    }
}

/// Streaming detector: background model, student weights and post-processing.
pub struct OdPipeline {
    inner: InferencePipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> OdStatus {
    match e {
        Error::Config { .. } => OdStatus::Config,
        Error::Io(_) => OdStatus::Io,
        Error::OutOfOrder { .. } | Error::Desync(_) => OdStatus::Sequence,
        _ => OdStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (OdStatus, String)>) -> OdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OdStatus::Internal
        }
    }
}

fn lift<T>(r: omnidistill::Result<T>) -> Result<T, (OdStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (OdStatus, String) {
    (OdStatus::NullPointer, format!("{what} is null"))
}

/// Reads an optional NUL-terminated UTF-8 string.
unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, (OdStatus, String)> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| (OdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn config_from(json: *const c_char) -> Result<RunConfig, (OdStatus, String)> {
    match opt_str(json, "config")? {
        None => Ok(RunConfig::default()),
        Some(text) => lift(RunConfig::from_json(text)),
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn od_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a pipeline from a JSON run configuration, or the defaults when
/// `config_json` is null.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be valid
/// for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn od_pipeline_new(config_json: *const c_char, out: *mut *mut OdPipeline) -> OdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = config_from(config_json)?;
        let inner = lift(InferencePipeline::new(&cfg))?;
        *out = Box::into_raw(Box::new(OdPipeline { inner }));
        Ok(())
    })
}

/// Releases a pipeline; null is ignored.
///
/// # Safety
/// `p` must come from [`od_pipeline_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn od_pipeline_free(p: *mut OdPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Replaces the detector weights with a blob from [`od_pipeline_weights`].
///
/// # Safety
/// `p` must be a live pipeline and `bytes` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn od_pipeline_load_weights(p: *mut OdPipeline, bytes: *const u8, len: usize) -> OdStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("pipeline"))?;
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        let blob = WeightBlob::new(std::slice::from_raw_parts(bytes, len).to_vec());
        lift(p.inner.load_weights(&blob))
    })
}

/// Serializes the current weights into `buf`. `len` receives the blob size;
/// pass a null `buf` to query it.
///
/// # Safety
/// `p` must be a live pipeline, `buf` null or valid for `cap` bytes, `len`
/// valid for one write.
#[no_mangle]
pub unsafe extern "C" fn od_pipeline_weights(p: *const OdPipeline, buf: *mut u8, cap: usize, len: *mut usize) -> OdStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("pipeline"))?;
        if len.is_null() {
            return Err(null("len"));
        }
        let blob = p.inner.weights();
        *len = blob.bytes().len();
        if buf.is_null() {
            return Ok(());
        }
        if cap < blob.bytes().len() {
            return Err((OdStatus::BufferTooSmall, format!("need {} bytes", blob.bytes().len())));
        }
        ptr::copy_nonoverlapping(blob.bytes().as_ptr(), buf, blob.bytes().len());
        Ok(())
    })
}

/// Runs one 8-bit grayscale frame (`stride` bytes per row) through the
/// pipeline and writes up to `cap` boxes. `count` always receives the number
/// of detections; if it exceeds `cap` the call returns
/// `OD_STATUS_BUFFER_TOO_SMALL` after filling the buffer. Timestamps must
/// strictly increase.
///
/// # Safety
/// `pixels` must be valid for `stride * height` bytes, `boxes` null or valid
/// for `cap` elements, `count` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn od_pipeline_process(
    p: *mut OdPipeline,
    pixels: *const u8,
    width: usize,
    height: usize,
    stride: usize,
    timestamp: f64,
    boxes: *mut OdBox,
    cap: usize,
    count: *mut usize,
) -> OdStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("pipeline"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if count.is_null() {
            return Err(null("count"));
        }
        if width == 0 || height == 0 || stride < width {
            return Err((OdStatus::InvalidArgument, "need positive dimensions and stride >= width".into()));
        }
        let px = std::slice::from_raw_parts(pixels, stride * height);
        let frame = Frame::from_fn(width, height, timestamp, CameraId::Student, |x, y| px[y * stride + x] as f32 / 255.0);
        let dets = lift(p.inner.process(&frame))?;
        *count = dets.len();
        if !boxes.is_null() {
            for (i, b) in dets.iter().take(cap).enumerate() {
                *boxes.add(i) = OdBox::from(*b);
            }
        }
        if dets.len() > cap {
            return Err((OdStatus::BufferTooSmall, format!("{} detections, room for {cap}", dets.len())));
        }
        Ok(())
    })
}

/// Estimates a homography from `n` rows of `tx, ty, sx, sy` and writes it
/// row-major into `h`. `error` (optional) receives the mean reprojection
/// error in pixels.
///
/// # Safety
/// `pairs` must be valid for `4 * n` doubles, `h` for 9, `error` null or
/// valid for one write.
#[no_mangle]
pub unsafe extern "C" fn od_estimate_homography(pairs: *const f64, n: usize, h: *mut f64, error: *mut f64) -> OdStatus {
    guard(|| {
        if pairs.is_null() || h.is_null() {
            return Err(null("pairs or h"));
        }
        let raw = std::slice::from_raw_parts(pairs, 4 * n);
        let pts: Vec<(Point, Point)> = raw
            .chunks_exact(4)
            .map(|r| (Point::new(r[0], r[1]), Point::new(r[2], r[3])))
            .collect();
        let est = lift(estimate_homography(&pts))?;
        ptr::copy_nonoverlapping(est.homography.to_row_major().as_ptr(), h, 9);
        if !error.is_null() {
            *error = est.mean_reprojection_error;
        }
        Ok(())
    })
}

/// Renders a synthetic recording into `out_dir`, as the `simulate` command does.
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn od_simulate(config_json: *const c_char, out_dir: *const c_char) -> OdStatus {
    guard(|| {
        let cfg = config_from(config_json)?;
        let dir = opt_str(out_dir, "out_dir")?.ok_or_else(|| null("out_dir"))?;
        lift(write_recording(&cfg, Path::new(dir)).map(|_| ()))
    })
}
