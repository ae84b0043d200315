//! C ABI over `mbr-core`: opaque model handles, retrieval scoring and size
//! audits. Every function returns an [`MbrStatus`]; on failure the message
//! is kept per thread and read with [`mbr_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mbr_core::auditor::{audit_preset, count_params, CountScope};
use mbr_core::evaluator::{rank_and_score, EmbeddingMatrix, Protocol, RowLabel};
use mbr_core::model::{preset, CamView, Model};
use mbr_core::{Error, Tensor};

/// Result codes shared by all entry points.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    UnknownPreset = 4,
    Dataset = 5,
    Checkpoint = 6,
    Shape = 7,
    Io = 8,
    NonFinite = 9,
    Internal = 10,
}

impl From<&Error> for MbrStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Metadata(_) => MbrStatus::Config,
            Error::UnknownPreset { .. } => MbrStatus::UnknownPreset,
            Error::Dataset(_) | Error::MissingSplit(_) | Error::UnparsableNames { .. } | Error::Sampler(_) | Error::Csv(_) => {
                MbrStatus::Dataset
            }
            Error::Checkpoint(_) | Error::Json(_) => MbrStatus::Checkpoint,
            Error::Shape(_) | Error::Loss(_) | Error::UnsupportedLayer(_) => MbrStatus::Shape,
            Error::Io(_) | Error::Image(_) => MbrStatus::Io,
            Error::NonFinite { .. } => MbrStatus::NonFinite,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MbrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MbrStatus::from(&e), e.to_string())
    }
}

type FfiResult = std::result::Result<(), Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> MbrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MbrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MbrStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MbrStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MbrStatus::InvalidArgument, msg.into())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> std::result::Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> std::result::Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn mbr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mbr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque model handle.
pub struct MbrModel {
    model: Model,
}

/// Builds a preset with seeded random weights. `base_width` and `input_size`
/// of 0 keep the full-size values; `num_classes` of 0 builds a headless model.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbr_model_new(
    name: *const c_char,
    base_width: usize,
    input_size: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut MbrModel,
) -> MbrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = c_str(name, "name")?;
        let mut spec = preset(name, None, (num_classes > 0).then_some(num_classes))?;
        if base_width > 0 || input_size > 0 {
            let w = if base_width > 0 { base_width } else { spec.base_width };
            let s = if input_size > 0 { input_size } else { spec.input_size };
            spec = spec.scaled(w, s)?;
        }
        let model = Model::new(spec, seed)?;
        *out = Box::into_raw(Box::new(MbrModel { model }));
        Ok(())
    })
}

/// Loads a checkpoint written by the trainer or by [`mbr_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbr_model_load(path: *const c_char, out: *mut *mut MbrModel) -> MbrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, _, _) = Model::load(Path::new(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(MbrModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mbr_model_save(model: *const MbrModel, path: *const c_char) -> MbrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.model.save(Path::new(c_str(path, "path")?), Default::default(), Default::default())?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mbr_model_free(model: *mut MbrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the global descriptor.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mbr_model_embedding_dim(model: *const MbrModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.spec.global_dim())
}

/// Square input side in pixels.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mbr_model_input_size(model: *const MbrModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.spec.input_size)
}

/// Learnable parameters; `full` also counts heads and side embeddings.
///
/// # Safety
/// `model` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mbr_model_param_count(model: *const MbrModel, full: bool, out: *mut u64) -> MbrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let scope = if full { CountScope::Full } else { CountScope::Audit };
        *out = count_params(&m.model, scope) as u64;
        Ok(())
    })
}

/// Embeds `n` normalized images laid out as `n x 3 x S x S` floats, writing
/// `n x dim` values to `out`. `cameras` and `views` may both be null; when
/// given, side embeddings are applied if the model has them.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mbr_model_embed(
    model: *const MbrModel,
    pixels: *const f32,
    n: usize,
    cameras: *const u32,
    views: *const u32,
    out: *mut f32,
    out_len: usize,
) -> MbrStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if n == 0 {
            return Err(invalid("n must be positive"));
        }
        let s = m.spec.input_size;
        let x = slice(pixels, n * 3 * s * s, "pixels")?;
        let dim = m.spec.global_dim();
        if out_len < n * dim {
            return Err(invalid(format!("output holds {out_len} floats, {} needed", n * dim)));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let x = Tensor::from_vec(&[n, 3, s, s], x.to_vec())?;
        let bundle = match (cameras.is_null(), views.is_null()) {
            (true, true) => m.forward_without_side(&x)?,
            (false, false) => {
                let (c, v) = (slice(cameras, n, "cameras")?, slice(views, n, "views")?);
                let meta: Vec<CamView> =
                    c.iter().zip(v).map(|(&camera, &view)| CamView { camera: camera as usize, view: view as usize }).collect();
                m.forward(&x, Some(&meta))?
            }
            _ => return Err(invalid("cameras and views must both be given or both be null")),
        };
        std::slice::from_raw_parts_mut(out, n * dim).copy_from_slice(bundle.global.data());
        Ok(())
    })
}

/// Retrieval metrics returned by [`mbr_retrieval_score`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MbrRetrieval {
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub n_queries: usize,
    pub n_excluded: usize,
}

unsafe fn matrix(
    data: *const f32,
    rows: usize,
    dim: usize,
    vids: *const u64,
    cams: *const u32,
    what: &str,
) -> std::result::Result<EmbeddingMatrix, Failure> {
    let d = slice(data, rows * dim, what)?;
    let v = slice(vids, rows, "vehicle ids")?;
    let c = slice(cams, rows, "camera ids")?;
    let labels = v
        .iter()
        .zip(c)
        .enumerate()
        .map(|(i, (&vehicle_id, &cam))| RowLabel { image_id: i.to_string(), vehicle_id, camera_id: cam as usize })
        .collect();
    Ok(EmbeddingMatrix::new(dim, d.to_vec(), labels)?)
}

/// Ranks the gallery for each query by Euclidean distance and scores the
/// ranking. With `filter_same_camera`, gallery entries of the query's
/// vehicle seen by the query's camera are discarded first.
///
/// # Safety
/// Every buffer must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mbr_retrieval_score(
    query: *const f32,
    query_vids: *const u64,
    query_cams: *const u32,
    n_query: usize,
    gallery: *const f32,
    gallery_vids: *const u64,
    gallery_cams: *const u32,
    n_gallery: usize,
    dim: usize,
    filter_same_camera: bool,
    out: *mut MbrRetrieval,
) -> MbrStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let q = matrix(query, n_query, dim, query_vids, query_cams, "query")?;
        let g = matrix(gallery, n_gallery, dim, gallery_vids, gallery_cams, "gallery")?;
        let r = rank_and_score(&q, &g, Protocol { filter_same_camera })?.report();
        *out = MbrRetrieval { map: r.map, cmc1: r.cmc1, cmc5: r.cmc5, n_queries: r.n_queries, n_excluded: r.n_excluded };
        Ok(())
    })
}

/// One audited preset.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MbrAuditRow {
    pub measured_params: u64,
    pub expected_params_m: f64,
    pub measured_macs: u64,
    pub expected_flops_g: f64,
    pub dim_slice: usize,
    pub dim_fg: usize,
    pub pass: bool,
}

/// Builds a full-size preset and compares it with its published sizes.
///
/// # Safety
/// `name` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mbr_audit_preset(name: *const c_char, out: *mut MbrAuditRow) -> MbrStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = audit_preset(c_str(name, "name")?)?;
        *out = MbrAuditRow {
            measured_params: r.measured_params as u64,
            expected_params_m: r.expected_params_m,
            measured_macs: r.measured_macs,
            expected_flops_g: r.expected_flops_g,
            dim_slice: r.dim_slice,
            dim_fg: r.dim_fg,
            pass: r.pass,
        };
        Ok(())
    })
}
