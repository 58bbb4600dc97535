//! C ABI over the earforge library.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free`. Every fallible call returns an
//! [`EfStatus`]; on failure the message is kept per thread and can be read
//! with [`ef_last_error`]. Panics are caught and reported as
//! [`EfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use earforge::descriptors::{extract_handcrafted, BsifBank, Descriptor, DescriptorKind, HandcraftedParams};
use earforge::imgcore::{flip_horizontal, load_image, GrayImage};
use earforge::landmarks::LandmarkSet;
use earforge::manifest::{load_manifest, DatasetManifest};
use earforge::matchfuse::distance;
use earforge::normalizer::normalize_geometric;
use earforge::pipeline::{run_pipeline, PipelineConfig};
use earforge::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Degenerate = 5,
    Mismatch = 6,
    MissingArtifact = 7,
    Config = 8,
    StageFailure = 9,
    Internal = 10,
    Panic = 11,
    BufferTooSmall = 12,
}

/// Opaque grayscale image.
pub struct EfImage(GrayImage);
/// Opaque 55-point landmark set.
pub struct EfLandmarks(LandmarkSet);
/// Opaque feature vector.
pub struct EfDescriptor(Descriptor);
/// Opaque dataset manifest.
pub struct EfManifest(DatasetManifest);

/// Summary metrics of a pipeline run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EfReport {
    pub rank1: f64,
    pub rank5: f64,
    pub eer: f64,
    pub auc: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EfStatus {
    match e {
        Error::Io(_) | Error::MissingFile(_) | Error::Codec(_) => EfStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Format(_) | Error::DuplicateId(_) => EfStatus::Parse,
        Error::DegenerateLandmarks(_) | Error::ZeroWidth(_) | Error::SingularMap { .. } | Error::BadDiagonal(_) => EfStatus::Degenerate,
        Error::ShapeMismatch(_)
        | Error::SizeMismatch(_)
        | Error::MetricMismatch(_)
        | Error::LengthMismatch { .. }
        | Error::IdMismatch
        | Error::BadInputSize { .. } => EfStatus::Mismatch,
        Error::MissingArtifact(_) | Error::MissingFilterBank(_) => EfStatus::MissingArtifact,
        Error::ProtocolConfig(_) | Error::BadTrainConfig(_) | Error::BadAugmentSpec(_) => EfStatus::Config,
        Error::StageFailure { .. } => EfStatus::StageFailure,
        Error::InvalidImage(_) | Error::InvalidLandmarks(_) | Error::EmptyInput(_) => EfStatus::InvalidArgument,
        _ => EfStatus::Internal,
    }
}

enum Fail {
    Status(EfStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(EfStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EfStatus::Ok,
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(": ");
                msg.push_str(&s.to_string());
                src = s.source();
            }
            set_error(msg);
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            EfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(EfStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn ef_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn ef_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy `width * height` row-major floats into a new image.
///
/// # Safety
/// `data` must point to `width * height` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_image_new(width: usize, height: usize, data: *const f32, out: *mut *mut EfImage) -> EfStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = width.checked_mul(height).ok_or_else(|| Fail::Status(EfStatus::InvalidArgument, "size overflow".into()))?;
        let pixels = std::slice::from_raw_parts(data, n).to_vec();
        put(out, EfImage(GrayImage::new(width, height, pixels)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_image_load(path: *const c_char, out: *mut *mut EfImage) -> EfStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, EfImage(load_image(Path::new(p))?))
    })
}

/// # Safety
/// `img` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ef_image_width(img: *const EfImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.width())
}

/// # Safety
/// `img` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ef_image_height(img: *const EfImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.height())
}

/// Copy pixels into `buf`, which holds `len` floats.
///
/// # Safety
/// `img` must be a live handle; `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ef_image_pixels(img: *const EfImage, buf: *mut f32, len: usize) -> EfStatus {
    guard(|| copy_out(obj(img, "img")?.0.data(), buf, len))
}

unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(null("buf"));
    }
    if len < src.len() {
        return Err(Fail::Status(EfStatus::BufferTooSmall, format!("need {} elements, got {len}", src.len())));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// # Safety
/// `img` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ef_image_free(img: *mut EfImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Mirror an image left to right.
///
/// # Safety
/// `img` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_image_flip(img: *const EfImage, out: *mut *mut EfImage) -> EfStatus {
    guard(|| put(out, EfImage(flip_horizontal(&obj(img, "img")?.0))))
}

/// Landmarks from `count` interleaved `x, y` pairs.
///
/// # Safety
/// `xy` must point to `2 * count` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_landmarks_new(xy: *const f64, count: usize, out: *mut *mut EfLandmarks) -> EfStatus {
    guard(|| {
        if xy.is_null() {
            return Err(null("xy"));
        }
        let points = std::slice::from_raw_parts(xy, 2 * count).chunks(2).map(|p| [p[0], p[1]]).collect();
        put(out, EfLandmarks(LandmarkSet::new(points)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_landmarks_load(path: *const c_char, out: *mut *mut EfLandmarks) -> EfStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, EfLandmarks(LandmarkSet::load(Path::new(p))?))
    })
}

/// # Safety
/// `lm` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ef_landmarks_free(lm: *mut EfLandmarks) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// Geometric normalization to a 128x128 ear.
///
/// # Safety
/// `img` and `lm` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_normalize(img: *const EfImage, lm: *const EfLandmarks, out: *mut *mut EfImage) -> EfStatus {
    guard(|| {
        let n = normalize_geometric(&obj(img, "img")?.0, &obj(lm, "lm")?.0)?;
        put(out, EfImage(n))
    })
}

/// Handcrafted descriptor by name (`lbp`, `hog`, ...). BSIF uses a seeded
/// random filter bank since no learned bank crosses this boundary.
///
/// # Safety
/// `kind` must be a NUL-terminated string; `img` a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ef_extract(kind: *const c_char, img: *const EfImage, out: *mut *mut EfDescriptor) -> EfStatus {
    guard(|| {
        let name = str_arg(kind, "kind")?;
        let kind: DescriptorKind = name.parse().map_err(|e| Fail::Status(EfStatus::InvalidArgument, e))?;
        if !kind.is_handcrafted() {
            return Err(Fail::Status(EfStatus::InvalidArgument, format!("`{kind}` is not a handcrafted descriptor")));
        }
        let mut params = HandcraftedParams::default();
        if kind == DescriptorKind::Bsif {
            params = params.with_bsif(BsifBank::random(0));
        }
        put(out, EfDescriptor(extract_handcrafted(kind, &obj(img, "img")?.0, &params)?))
    })
}

/// # Safety
/// `d` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ef_descriptor_len(d: *const EfDescriptor) -> usize {
    d.as_ref().map_or(0, |d| d.0.values.len())
}

/// # Safety
/// `d` must be a live handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ef_descriptor_values(d: *const EfDescriptor, buf: *mut f64, len: usize) -> EfStatus {
    guard(|| copy_out(&obj(d, "d")?.0.values, buf, len))
}

/// # Safety
/// `d` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ef_descriptor_free(d: *mut EfDescriptor) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Distance under the descriptors' shared metric; lower is more similar.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_distance(a: *const EfDescriptor, b: *const EfDescriptor, out: *mut f64) -> EfStatus {
    guard(|| {
        let d = distance(&obj(a, "a")?.0, &obj(b, "b")?.0)?;
        *out.as_mut().ok_or_else(|| null("out"))? = d;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_manifest_load(path: *const c_char, out: *mut *mut EfManifest) -> EfStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, EfManifest(load_manifest(Path::new(p))?))
    })
}

/// # Safety
/// `m` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ef_manifest_len(m: *const EfManifest) -> usize {
    m.as_ref().map_or(0, |m| m.0.len())
}

/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ef_manifest_free(m: *mut EfManifest) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Run the pipeline with a JSON configuration. `report` may be null; it is
/// left untouched when the configuration stops before evaluation.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `m` a live handle.
#[no_mangle]
pub unsafe extern "C" fn ef_pipeline_run(config_json: *const c_char, m: *const EfManifest, report: *mut EfReport) -> EfStatus {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        let config: PipelineConfig = serde_json::from_str(text).map_err(Error::from)?;
        if let Some(r) = run_pipeline(&config, &obj(m, "m")?.0)? {
            if let Some(out) = report.as_mut() {
                *out = EfReport {
                    rank1: r.rank1,
                    rank5: r.rank5,
                    eer: r.eer,
                    auc: r.auc,
                };
            }
        }
        Ok(())
    })
}
