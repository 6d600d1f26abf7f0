//! C ABI over the t2ldm library.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns a
//! [`T2ldmStatus`]; on failure the message is kept per thread and can be
//! read with [`t2ldm_last_error`]. Strings returned by the library are
//! released with [`t2ldm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use t2ldm::annotate::{annotate_record, parse_template, AnnotationRules, SceneInput};
use t2ldm::checkpoint::Checkpoint;
use t2ldm::engine::ParamStore;
use t2ldm::evalmetrics::{detect_objects, evaluate, point_metrics, EvalConfig};
use t2ldm::nn::Denoiser;
use t2ldm::rangemap::{denormalize, normalize, project, unproject, NormalizedImage, Point, PointCloud, SensorConfig};
use t2ldm::sampling::{generate, load_denoiser};
use t2ldm::schedule::{cosine_schedule, NoiseSchedule};
use t2ldm::textenc::HashTextEncoder;
use t2ldm::training::TrainConfig;
use t2ldm::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum T2ldmStatus {
    Ok = 0,
    InvalidArgument = 1,
    RejectedInput = 2,
    ShapeMismatch = 3,
    NonFiniteLoss = 4,
    Format = 5,
    Io = 6,
    NullPointer = 7,
    /// The output buffer is too small; the message names the needed length.
    BufferTooSmall = 8,
    Panic = 9,
}

/// A point cloud: `x, y, z, intensity` per point.
pub struct T2ldmCloud(PointCloud);

/// Sensor geometry used for projection.
pub struct T2ldmSensor(SensorConfig);

/// A trained denoiser with its sensor and noise schedule.
pub struct T2ldmModel {
    dn: Denoiser,
    params: ParamStore,
    sensor: SensorConfig,
    schedule: NoiseSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> T2ldmStatus {
    match e {
        Error::InvalidArgument(_) => T2ldmStatus::InvalidArgument,
        Error::RejectedInput(_) => T2ldmStatus::RejectedInput,
        Error::ShapeMismatch { .. } => T2ldmStatus::ShapeMismatch,
        Error::NonFiniteLoss { .. } => T2ldmStatus::NonFiniteLoss,
        Error::Format(_) | Error::Json(_) => T2ldmStatus::Format,
        Error::Io(_) => T2ldmStatus::Io,
    }
}

struct Fail(T2ldmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(T2ldmStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> T2ldmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            T2ldmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            set_error(format!("internal panic: {}", msg.unwrap_or_default()));
            T2ldmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(T2ldmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = CString::new(s).map_err(|_| Fail(T2ldmStatus::Format, "string contains a nul byte".into()))?.into_raw();
    Ok(())
}

/// Copies `src` into `out[..cap]`, or reports the required length.
unsafe fn fill(src: &[f64], out: *mut f64, cap: usize) -> Result<(), Fail> {
    if cap < src.len() {
        return Err(Fail(T2ldmStatus::BufferTooSmall, format!("buffer holds {cap} values, {} needed", src.len())));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("output buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

unsafe fn clouds_arg<'a>(p: *const *const T2ldmCloud, n: usize, what: &str) -> Result<Vec<&'a PointCloud>, Fail> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, n).iter().map(|c| ref_arg(*c, what).map(|c| &c.0)).collect()
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn t2ldm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn t2ldm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_sensor_new(
    height: usize,
    width: usize,
    fov_up: f64,
    fov_down: f64,
    depth_min: f64,
    depth_max: f64,
    out: *mut *mut T2ldmSensor,
) -> T2ldmStatus {
    guard(|| put(out, T2ldmSensor(SensorConfig::new(height, width, fov_up, fov_down, depth_min, depth_max)?)))
}

/// # Safety
/// `sensor` must be null or a handle from [`t2ldm_sensor_new`].
#[no_mangle]
pub unsafe extern "C" fn t2ldm_sensor_free(sensor: *mut T2ldmSensor) {
    if !sensor.is_null() {
        drop(Box::from_raw(sensor));
    }
}

/// Builds a cloud from `n` interleaved `x, y, z, intensity` quadruples.
///
/// # Safety
/// `xyzi` must hold `4 * n` values; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_cloud_new(xyzi: *const f64, n: usize, out: *mut *mut T2ldmCloud) -> T2ldmStatus {
    guard(|| {
        let v = slice_arg(xyzi, 4 * n, "points")?;
        let pts = v.chunks_exact(4).map(|c| Point::new(c[0], c[1], c[2], c[3])).collect();
        put(out, T2ldmCloud(PointCloud::new(pts)))
    })
}

/// Reads a cloud from the library's binary point format.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_cloud_read(path: *const c_char, out: *mut *mut T2ldmCloud) -> T2ldmStatus {
    guard(|| put(out, T2ldmCloud(t2ldm::io::read_cloud(str_arg(path, "path")?)?)))
}

/// # Safety
/// `cloud` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_cloud_write(cloud: *const T2ldmCloud, path: *const c_char) -> T2ldmStatus {
    guard(|| Ok(t2ldm::io::write_cloud(str_arg(path, "path")?, &ref_arg(cloud, "cloud")?.0)?))
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_cloud_len(cloud: *const T2ldmCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// Copies the points as `x, y, z, intensity` quadruples into `out`, which
/// holds `cap` values.
///
/// # Safety
/// `cloud` must be a live handle; `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_cloud_points(cloud: *const T2ldmCloud, out: *mut f64, cap: usize) -> T2ldmStatus {
    guard(|| {
        let c = &ref_arg(cloud, "cloud")?.0;
        let flat: Vec<f64> = c.points.iter().flat_map(|p| [p.x, p.y, p.z, p.intensity]).collect();
        fill(&flat, out, cap)
    })
}

/// # Safety
/// `cloud` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_cloud_free(cloud: *mut T2ldmCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Projects a cloud and maps it into `[-1, 1]`: depth plane then
/// intensity plane, `2 × H × W` values row-major.
///
/// # Safety
/// Handles must be live; `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_project(cloud: *const T2ldmCloud, sensor: *const T2ldmSensor, out: *mut f64, cap: usize) -> T2ldmStatus {
    guard(|| {
        let img = normalize(&project(&ref_arg(cloud, "cloud")?.0, &ref_arg(sensor, "sensor")?.0)?);
        fill(&img.values, out, cap)
    })
}

/// Inverse of [`t2ldm_project`]: pixels whose depth falls below the
/// sensor minimum are dropped.
///
/// # Safety
/// `values` must hold `len` values; `sensor` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_unproject(values: *const f64, len: usize, sensor: *const T2ldmSensor, out: *mut *mut T2ldmCloud) -> T2ldmStatus {
    guard(|| {
        let cfg = ref_arg(sensor, "sensor")?.0;
        let img = NormalizedImage::from_values(slice_arg(values, len, "values")?.to_vec(), cfg)?;
        put(out, T2ldmCloud(unproject(&denormalize(&img, &cfg)?)))
    })
}

/// Captions one scene. `scene_json` holds `{"boxes": [...], "weather",
/// "time"}`; `template` is e.g. `"weather,quantity"`. The result is the
/// annotation record as JSON.
///
/// # Safety
/// Strings must be nul-terminated; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_annotate(scene_json: *const c_char, template: *const c_char, out: *mut *mut c_char) -> T2ldmStatus {
    guard(|| {
        let scene: SceneInput = serde_json::from_str(str_arg(scene_json, "scene")?).map_err(Error::from)?;
        let template = parse_template(str_arg(template, "template")?)?;
        let rec = annotate_record(&scene, 0, &AnnotationRules::default(), &template)?;
        put_string(out, serde_json::to_string(&rec).map_err(Error::from)?)
    })
}

/// Counts the object clusters the detector finds in a cloud, and how
/// many of them are car-sized.
///
/// # Safety
/// `cloud` must be live; `clusters` and `cars` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_detect(cloud: *const T2ldmCloud, clusters: *mut usize, cars: *mut usize) -> T2ldmStatus {
    guard(|| {
        if clusters.is_null() || cars.is_null() {
            return Err(null("output pointer"));
        }
        let dets = detect_objects(&ref_arg(cloud, "cloud")?.0);
        *clusters = dets.len();
        *cars = dets.iter().filter(|d| d.is_car()).count();
        Ok(())
    })
}

/// Chamfer, nearest-point MSE and matched (earth mover's) distance between
/// two clouds, on coordinates as given.
///
/// # Safety
/// Handles must be live; the outputs must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_point_distances(pred: *const T2ldmCloud, gt: *const T2ldmCloud, cd: *mut f64, mse: *mut f64, emd: *mut f64) -> T2ldmStatus {
    guard(|| {
        if cd.is_null() || mse.is_null() || emd.is_null() {
            return Err(null("output pointer"));
        }
        let xyz = |c: &PointCloud| c.points.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        let m = point_metrics(&xyz(&ref_arg(pred, "pred")?.0), &xyz(&ref_arg(gt, "gt")?.0))?;
        (*cd, *mse, *emd) = (m.cd, m.mse, m.emd);
        Ok(())
    })
}

/// Evaluates generated against reference clouds with default settings
/// and returns the report as JSON. `prompts` may be null; otherwise it
/// holds one string per generated cloud.
///
/// # Safety
/// Arrays must hold the stated number of live handles or strings.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_evaluate(
    generated: *const *const T2ldmCloud,
    n_generated: usize,
    reference: *const *const T2ldmCloud,
    n_reference: usize,
    prompts: *const *const c_char,
    out: *mut *mut c_char,
) -> T2ldmStatus {
    guard(|| {
        let gen: Vec<PointCloud> = clouds_arg(generated, n_generated, "generated")?.into_iter().cloned().collect();
        let refs: Vec<PointCloud> = clouds_arg(reference, n_reference, "reference")?.into_iter().cloned().collect();
        let prompts: Option<Vec<String>> = if prompts.is_null() {
            None
        } else {
            Some(std::slice::from_raw_parts(prompts, n_generated).iter().map(|p| str_arg(*p, "prompt").map(str::to_owned)).collect::<Result<_, _>>()?)
        };
        let report = evaluate(&gen, &refs, prompts.as_deref(), &EvalConfig::default())?;
        put_string(out, serde_json::to_string(&report).map_err(Error::from)?)
    })
}

/// Loads a denoiser checkpoint written by `t2ldm train`. `weights` selects
/// `"ema"` or `"params"`.
///
/// # Safety
/// Strings must be nul-terminated; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_model_load(path: *const c_char, weights: *const c_char, out: *mut *mut T2ldmModel) -> T2ldmStatus {
    guard(|| {
        let ns = str_arg(weights, "weights")?;
        if ns != "ema" && ns != "params" {
            return Err(Fail(T2ldmStatus::InvalidArgument, format!("weights must be \"ema\" or \"params\", got \"{ns}\"")));
        }
        let ck = Checkpoint::load(str_arg(path, "path")?)?;
        let (dn, params) = load_denoiser(&ck, ns)?;
        let sensor: SensorConfig = ck.meta_field("sensor")?;
        let train: TrainConfig = ck.meta_field("train")?;
        put(out, T2ldmModel { dn, params, sensor, schedule: cosine_schedule(train.timesteps)? })
    })
}

/// Samples one cloud for `prompt` (empty for unconditional).
///
/// # Safety
/// `model` must be live; `prompt` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn t2ldm_model_sample(
    model: *const T2ldmModel,
    prompt: *const c_char,
    cfg_scale: f64,
    seed: u64,
    out: *mut *mut T2ldmCloud,
) -> T2ldmStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let cond = HashTextEncoder::default().encode_text(str_arg(prompt, "prompt")?);
        let img = generate(&m.dn, &m.params, &m.sensor, &cond, cfg_scale, &m.schedule, &[seed])?.remove(0);
        put(out, T2ldmCloud(unproject(&denormalize(&img, &m.sensor)?)))
    })
}

/// # Safety
/// `model` must be null or a handle from [`t2ldm_model_load`].
#[no_mangle]
pub unsafe extern "C" fn t2ldm_model_free(model: *mut T2ldmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
