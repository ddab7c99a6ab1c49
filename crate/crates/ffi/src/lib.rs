//! C interface to `bodylift`.
//!
//! Every fallible function returns a [`BlStatus`]; on failure a description
//! is available from [`bl_last_error_message`] on the same thread. Handles
//! are opaque and released with their `_free` function. Strings returned to
//! the caller are released with [`bl_string_free`].
//!
//! Pose states cross the boundary as flat `double` arrays in the order
//! `r[6], t[3], beta[shape_dim], theta[pose_dim]`; point sets as `x, y, z`
//! (or `x, y` in 2D) triples.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use bodylift::body_model::{
    load_model, posed_landmarks, skin_vertices, toy_model, Frame, KinematicModel, LandmarkSet, PoseState,
    ToyModelConfig,
};
use bodylift::fitting::{self, FitError, FitReportFile};
use bodylift::metrics::{mpjpe, mpjpe_pa};
use bodylift::mixer::{load_checkpoint, predict, MixerParams};
use bodylift::obj::{write_posed_obj, write_rest_obj};
use bodylift::recrop::{crop_from_landmarks, crop_iou, OrientedCrop};
use nalgebra::{Vector2, Vector3};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    /// Sizes or dimensions do not agree with the model or lifter.
    Mismatch = 5,
    Diverged = 6,
    /// A caller buffer is smaller than required.
    BufferTooSmall = 7,
    /// Fitting needs more observed keypoints.
    InsufficientObservations = 8,
    Internal = 9,
}

/// Opaque body model handle.
pub struct BlModel {
    model: KinematicModel,
}

/// Opaque trained lifter handle.
pub struct BlLifter {
    params: MixerParams,
}

/// Oriented square crop in pixels; `angle` turns the crop's up axis onto
/// the hand axis.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlCrop {
    pub center_x: f64,
    pub center_y: f64,
    pub side: f64,
    pub angle: f64,
}

impl From<OrientedCrop> for BlCrop {
    fn from(c: OrientedCrop) -> Self {
        Self {
            center_x: c.center.x,
            center_y: c.center.y,
            side: c.side,
            angle: c.angle,
        }
    }
}

impl From<BlCrop> for OrientedCrop {
    fn from(c: BlCrop) -> Self {
        Self {
            center: Vector2::new(c.center_x, c.center_y),
            side: c.side,
            angle: c.angle,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

struct Failure(BlStatus, String);

impl Failure {
    fn new(status: BlStatus, message: impl Into<String>) -> Self {
        Self(status, message.into())
    }
}

type Outcome = Result<(), Failure>;

fn guard(body: impl FnOnce() -> Outcome) -> BlStatus {
    LAST_ERROR.with(|e| e.borrow_mut().take());
    let result = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure::new(BlStatus::Internal, format!("panic: {msg}")))
    });
    match result {
        Ok(()) => BlStatus::Ok,
        Err(Failure(status, message)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
            status
        }
    }
}

fn fit_failure(e: FitError) -> Failure {
    let status = match &e {
        FitError::InsufficientObservations(_) => BlStatus::InsufficientObservations,
        FitError::Diverged { .. } => BlStatus::Diverged,
        FitError::Parse { .. } => BlStatus::Parse,
        FitError::Io(_) => BlStatus::Io,
        _ => BlStatus::InvalidArgument,
    };
    Failure::new(status, e.to_string())
}

fn status_for(e: &dyn std::error::Error) -> BlStatus {
    let text = e.to_string();
    if text.contains("i/o") || e.source().is_some_and(|s| s.is::<std::io::Error>()) {
        BlStatus::Io
    } else {
        BlStatus::InvalidArgument
    }
}

fn fail<E: std::error::Error>(status: BlStatus) -> impl FnOnce(E) -> Failure {
    move |e| Failure::new(status, e.to_string())
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref()
        .ok_or_else(|| Failure::new(BlStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, Failure> {
    Ok(Path::new(str_arg(ptr, "path")?))
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::new(BlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::new(BlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::new(BlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_slice<'a>(ptr: *mut f64, len: usize, needed: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len < needed {
        return Err(Failure::new(
            BlStatus::BufferTooSmall,
            format!("{what} holds {len} values, {needed} needed"),
        ));
    }
    if ptr.is_null() {
        return Err(Failure::new(BlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Outcome {
    if out.is_null() {
        return Err(Failure::new(BlStatus::NullPointer, format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

fn points3(flat: &[f64]) -> Vec<Vector3<f64>> {
    flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

fn state_from(model: &KinematicModel, flat: &[f64]) -> Result<PoseState, Failure> {
    let expected = 9 + model.shape_dim + model.pose_dim;
    if flat.len() != expected {
        return Err(Failure::new(
            BlStatus::Mismatch,
            format!("state has {} values, model needs {expected}", flat.len()),
        ));
    }
    Ok(PoseState::from_flat(flat, model.shape_dim, model.pose_dim))
}

fn copy_points(points: &[Vector3<f64>], out: &mut [f64]) {
    for (p, o) in points.iter().zip(out.chunks_exact_mut(3)) {
        o.copy_from_slice(p.as_slice());
    }
}

/// Message of the last failed call on this thread, or null. Free the
/// result with [`bl_string_free`].
#[no_mangle]
pub extern "C" fn bl_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_deref() {
        Some(msg) => CString::new(msg.replace('\0', " ")).map_or(std::ptr::null_mut(), CString::into_raw),
        None => std::ptr::null_mut(),
    })
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load and validate a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bl_model_load(path: *const c_char, out: *mut *mut BlModel) -> BlStatus {
    guard(|| {
        let path = path_arg(path)?;
        let model = load_model(path).map_err(|e| Failure::new(status_for(&e), e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(BlModel { model })), "out")
    })
}

/// Build the procedural toy model with default sizes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bl_model_toy(seed: u64, out: *mut *mut BlModel) -> BlStatus {
    guard(|| {
        let model = toy_model(&ToyModelConfig {
            seed,
            ..ToyModelConfig::default()
        })
        .map_err(fail(BlStatus::Internal))?;
        write_out(out, Box::into_raw(Box::new(BlModel { model })), "out")
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bl_model_free(model: *mut BlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of landmarks `S`; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bl_model_landmark_count(model: *const BlModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.landmark_count())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bl_model_vertex_count(model: *const BlModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.vertex_count())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bl_model_face_count(model: *const BlModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.faces.len())
}

/// Length of a flat pose state for this model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bl_model_state_len(model: *const BlModel) -> usize {
    model.as_ref().map_or(0, |m| 9 + m.model.shape_dim + m.model.pose_dim)
}

/// Write the identity state (`bl_model_state_len` values) into `out`.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bl_model_identity_state(model: *const BlModel, out: *mut f64, out_len: usize) -> BlStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let flat = PoseState::identity(m).to_flat();
        out_slice(out, out_len, flat.len(), "out")?[..flat.len()].copy_from_slice(&flat);
        Ok(())
    })
}

/// World landmarks of a state: `3·S` values.
///
/// # Safety
/// `state` must hold `state_len` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bl_model_landmarks(
    model: *const BlModel,
    state: *const f64,
    state_len: usize,
    out: *mut f64,
    out_len: usize,
) -> BlStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let s = state_from(m, slice_arg(state, state_len, "state")?)?;
        let out = out_slice(out, out_len, 3 * m.landmark_count(), "out")?;
        let lm = posed_landmarks(m, &s).map_err(fail(BlStatus::InvalidArgument))?;
        copy_points(&lm.points, out);
        Ok(())
    })
}

/// Skinned mesh vertices of a state: `3·N_v` values.
///
/// # Safety
/// `state` must hold `state_len` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bl_model_vertices(
    model: *const BlModel,
    state: *const f64,
    state_len: usize,
    out: *mut f64,
    out_len: usize,
) -> BlStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let s = state_from(m, slice_arg(state, state_len, "state")?)?;
        let out = out_slice(out, out_len, 3 * m.vertex_count(), "out")?;
        let mesh = skin_vertices(m, &s).map_err(fail(BlStatus::InvalidArgument))?;
        copy_points(&mesh.vertices, out);
        Ok(())
    })
}

/// Write the mesh at `state` (or the rest mesh when `state` is null) as OBJ.
///
/// # Safety
/// `state` must be null or hold `state_len` doubles; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bl_model_export_obj(
    model: *const BlModel,
    state: *const f64,
    state_len: usize,
    path: *const c_char,
) -> BlStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let path = path_arg(path)?;
        let state = if state.is_null() {
            None
        } else {
            Some(state_from(m, slice_arg(state, state_len, "state")?)?)
        };
        let file = std::fs::File::create(path).map_err(fail(BlStatus::Io))?;
        let mut w = std::io::BufWriter::new(file);
        match &state {
            Some(s) => write_posed_obj(&mut w, m, s),
            None => write_rest_obj(&mut w, m),
        }
        .map_err(|e| Failure::new(status_for(&e), e.to_string()))?;
        std::io::Write::flush(&mut w).map_err(fail(BlStatus::Io))
    })
}

/// Load a lifter checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bl_lifter_load(path: *const c_char, out: *mut *mut BlLifter) -> BlStatus {
    guard(|| {
        let ckpt = load_checkpoint(path_arg(path)?).map_err(|e| Failure::new(status_for(&e), e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(BlLifter { params: ckpt.params })), "out")
    })
}

/// Release a lifter. Null is ignored.
///
/// # Safety
/// `lifter` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bl_lifter_free(lifter: *mut BlLifter) {
    if !lifter.is_null() {
        drop(Box::from_raw(lifter));
    }
}

/// Input token count the lifter accepts; 0 for a null handle.
///
/// # Safety
/// `lifter` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bl_lifter_token_count(lifter: *const BlLifter) -> usize {
    lifter.as_ref().map_or(0, |l| l.params.config.tokens)
}

/// Predict a flat state from `count` hip-centered landmarks (`3·count`
/// values). `count` must equal the lifter's token count.
///
/// # Safety
/// `landmarks` must hold `3·count` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bl_lifter_predict(
    lifter: *const BlLifter,
    landmarks: *const f64,
    count: usize,
    out: *mut f64,
    out_len: usize,
) -> BlStatus {
    guard(|| {
        let params = &handle(lifter, "lifter")?.params;
        if count != params.config.tokens {
            return Err(Failure::new(
                BlStatus::Mismatch,
                format!("lifter takes {} landmarks, got {count}", params.config.tokens),
            ));
        }
        let pts = points3(slice_arg(landmarks, 3 * count, "landmarks")?);
        let state = predict(params, &pts).map_err(fail(BlStatus::InvalidArgument))?;
        let flat = state.to_flat();
        out_slice(out, out_len, flat.len(), "out")?[..flat.len()].copy_from_slice(&flat);
        Ok(())
    })
}

/// Fit a problem given as JSON text; on success `*report_json` receives the
/// report as JSON, to be released with [`bl_string_free`].
///
/// # Safety
/// `problem_json` must be a NUL-terminated string; `report_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bl_fit_json(
    model: *const BlModel,
    problem_json: *const c_char,
    report_json: *mut *mut c_char,
) -> BlStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        let text = str_arg(problem_json, "problem_json")?;
        let (problem, truth) = fitting::parse_problem(text, "<problem>").map_err(fit_failure)?;
        let report = fitting::fit(m, &problem, None).map_err(fit_failure)?;
        let file = FitReportFile::new(m, report, truth.as_ref()).map_err(fit_failure)?;
        let json = serde_json::to_string(&file).map_err(fail(BlStatus::Internal))?;
        let json = CString::new(json).map_err(fail(BlStatus::Internal))?;
        write_out(report_json, json.into_raw(), "report_json")
    })
}

/// MPJPE and Procrustes-aligned MPJPE in millimeters between two sets of
/// `count` points in meters.
///
/// # Safety
/// `pred` and `gt` must hold `3·count` doubles; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn bl_mpjpe(
    pred: *const f64,
    gt: *const f64,
    count: usize,
    mpjpe_mm: *mut f64,
    mpjpe_pa_mm: *mut f64,
) -> BlStatus {
    guard(|| {
        let set = |ptr, what| -> Result<LandmarkSet, Failure> {
            Ok(LandmarkSet {
                points: points3(slice_arg(ptr, 3 * count, what)?),
                frame: Frame::World,
            })
        };
        let (p, g) = (set(pred, "pred")?, set(gt, "gt")?);
        let raw = mpjpe(&p, &g).map_err(fail(BlStatus::InvalidArgument))?;
        let aligned = mpjpe_pa(&p, &g).map_err(fail(BlStatus::InvalidArgument))?;
        write_out(mpjpe_mm, raw, "mpjpe_mm")?;
        write_out(mpjpe_pa_mm, aligned, "mpjpe_pa_mm")
    })
}

/// Crop around `count` 2D points (`2·count` values) whose axis runs from
/// point `axis_from` to point `axis_to`, scaled by `scale`.
///
/// # Safety
/// `points` must hold `2·count` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bl_crop_from_landmarks(
    points: *const f64,
    count: usize,
    axis_from: usize,
    axis_to: usize,
    scale: f64,
    out: *mut BlCrop,
) -> BlStatus {
    guard(|| {
        let pts: Vec<Vector2<f64>> = slice_arg(points, 2 * count, "points")?
            .chunks_exact(2)
            .map(|c| Vector2::new(c[0], c[1]))
            .collect();
        let crop = crop_from_landmarks(&pts, (axis_from, axis_to), scale).map_err(fail(BlStatus::InvalidArgument))?;
        write_out(out, crop.into(), "out")
    })
}

/// Intersection over union of two crops.
#[no_mangle]
pub extern "C" fn bl_crop_iou(a: BlCrop, b: BlCrop) -> f64 {
    crop_iou(&a.into(), &b.into())
}
