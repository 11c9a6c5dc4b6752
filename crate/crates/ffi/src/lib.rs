//! C ABI over the `stfnn` crate.
//!
//! Every fallible function returns an [`StfnnStatus`]; on failure the
//! message is kept per thread and can be read with
//! [`stfnn_last_error_message`]. Handles are opaque and must be released
//! with their matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use chrono::{DateTime, Utc};
use stfnn::encoding::{encode, PeriodSet, CODE_DIM};
use stfnn::geodata::{build_context, load_observations, CsvSchema};
use stfnn::model::Checkpoint;
use stfnn::{ContextSet, Coordinate, Error, FieldModel, ModelConfig, Normalizer, Source, StationDataset};

/// Result codes. `STFNN_STATUS_OK` is zero; everything else is a failure.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StfnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    InsufficientContext = 6,
    Checkpoint = 7,
    Numeric = 8,
    Panic = 9,
}

/// A field model plus the normalizer it was trained with, if any.
pub struct StfnnModel {
    model: FieldModel,
    normalizer: Option<Normalizer>,
}

/// Observations loaded from CSV.
pub struct StfnnDataset {
    dataset: StationDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> StfnnStatus {
    match err {
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) | Error::Schema(_) => {
            StfnnStatus::Parse
        }
        Error::Param(_) | Error::ConfigKeys { .. } | Error::NoUsableData(_) => {
            StfnnStatus::InvalidArgument
        }
        Error::InsufficientContext(_) => StfnnStatus::InsufficientContext,
        Error::Shape(_) => StfnnStatus::Shape,
        Error::Numeric(_) => StfnnStatus::Numeric,
        Error::Checkpoint(_) => StfnnStatus::Checkpoint,
        Error::File { .. } | Error::Io(_) => StfnnStatus::Io,
    }
}

struct Fail(StfnnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(StfnnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StfnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StfnnStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            StfnnStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Fail(StfnnStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stfnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stfnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the 10-value code of `(x, y, tau)` with unscaled periods.
///
/// # Safety
/// `out` must point to 10 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn stfnn_encode(x: f64, y: f64, tau: f64, out: *mut f64) -> StfnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let code = encode([x, y, tau], &PeriodSet::default())?;
        std::slice::from_raw_parts_mut(out, CODE_DIM).copy_from_slice(code.as_slice());
        Ok(())
    })
}

/// A freshly initialized model with default hyperparameters.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn stfnn_model_new(
    feature_dim: usize,
    seed: u64,
    out: *mut *mut StfnnModel,
) -> StfnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = ModelConfig {
            feature_dim,
            seed: Some(seed),
            ..ModelConfig::default()
        };
        let model = FieldModel::new(config)?;
        *out = Box::into_raw(Box::new(StfnnModel {
            model,
            normalizer: None,
        }));
        Ok(())
    })
}

/// Loads a JSON checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn stfnn_model_load(
    path: *const c_char,
    out: *mut *mut StfnnModel,
) -> StfnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(path_arg(path)?)?;
        let model = ckpt.to_model()?;
        *out = Box::into_raw(Box::new(StfnnModel {
            model,
            normalizer: ckpt.normalizer,
        }));
        Ok(())
    })
}

/// Saves the model as a JSON checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stfnn_model_save(
    model: *const StfnnModel,
    path: *const c_char,
) -> StfnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let seed = m.model.config.seed.unwrap_or(0);
        let ckpt = Checkpoint::from_model(&m.model, m.normalizer.as_ref(), seed, None);
        ckpt.save(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stfnn_model_free(model: *mut StfnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stfnn_model_param_count(model: *const StfnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.param_count())
}

/// Feature width the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stfnn_model_feature_dim(model: *const StfnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.feature_dim)
}

/// The learned gradient at normalized `c[3]`, written to `out[3]`.
///
/// # Safety
/// `model` must be a live handle; `c` and `out` must each hold 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn stfnn_model_field_probe(
    model: *const StfnnModel,
    c: *const f64,
    out: *mut f64,
) -> StfnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = slice(c, 3, "c")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let g = m.model.field_probe([c[0], c[1], c[2]]);
        std::slice::from_raw_parts_mut(out, 3).copy_from_slice(&g);
        Ok(())
    })
}

/// Infers one target from an explicit, already normalized context.
///
/// `coords` holds `n * 3` values `(x, y, tau)` row by row, `values` holds
/// `n` targets and `features` holds `n * feature_dim` values (may be null
/// when `feature_dim` is 0). `weights`, if not null, receives the `n`
/// aggregation weights.
///
/// # Safety
/// All non-null pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn stfnn_model_infer(
    model: *const StfnnModel,
    n: usize,
    coords: *const f64,
    values: *const f64,
    features: *const f64,
    feature_dim: usize,
    target: *const f64,
    out_estimate: *mut f64,
    weights: *mut f64,
) -> StfnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let coords = slice(coords, n * 3, "coords")?;
        let values = slice(values, n, "values")?;
        let features = slice(features, n * feature_dim, "features")?;
        let target = slice(target, 3, "target")?;
        if out_estimate.is_null() {
            return Err(null("out_estimate"));
        }
        let sources = (0..n)
            .map(|i| Source {
                coord: Coordinate {
                    x: coords[3 * i],
                    y: coords[3 * i + 1],
                    tau: coords[3 * i + 2],
                },
                features: features[i * feature_dim..(i + 1) * feature_dim].to_vec(),
                value: values[i],
                station: i,
                timestep: 0,
            })
            .collect();
        let ctx = ContextSet {
            sources,
            target_coord: Coordinate {
                x: target[0],
                y: target[1],
                tau: target[2],
            },
            target_timestep: 0,
        };
        let est = m.model.pyramidal_infer(&ctx)?;
        *out_estimate = est.y_hat;
        if !weights.is_null() {
            std::slice::from_raw_parts_mut(weights, n).copy_from_slice(&est.weights);
        }
        Ok(())
    })
}

/// Loads observations from a CSV file. `schema_json` is a JSON object with
/// `numeric_features` and `categorical_features` column lists, or null for
/// no feature columns.
///
/// # Safety
/// `path` and non-null `schema_json` must be NUL-terminated strings; `out`
/// a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn stfnn_dataset_load_csv(
    path: *const c_char,
    schema_json: *const c_char,
    out: *mut *mut StfnnDataset,
) -> StfnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let schema = if schema_json.is_null() {
            CsvSchema::default()
        } else {
            let text = CStr::from_ptr(schema_json)
                .to_str()
                .map_err(|_| Fail(StfnnStatus::InvalidArgument, "schema is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(Error::from)?
        };
        let dataset = load_observations(path_arg(path)?, &schema)?;
        *out = Box::into_raw(Box::new(StfnnDataset { dataset }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stfnn_dataset_free(dataset: *mut StfnnDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stfnn_dataset_station_count(dataset: *const StfnnDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.dataset.n_stations())
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stfnn_dataset_timestep_count(dataset: *const StfnnDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.dataset.timestamps.len())
}

/// Infers the raw-unit value at `(lng, lat)` and Unix time `unix_seconds`
/// from the dataset's `k_spatial` nearest stations over `t_hist` steps.
/// The model must carry a normalizer, i.e. come from a trained checkpoint.
///
/// # Safety
/// Handles must be live; `out_estimate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stfnn_infer_at(
    model: *const StfnnModel,
    dataset: *mut StfnnDataset,
    lng: f64,
    lat: f64,
    unix_seconds: i64,
    k_spatial: usize,
    t_hist: usize,
    out_estimate: *mut f64,
) -> StfnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = dataset.as_mut().ok_or_else(|| null("dataset"))?;
        if out_estimate.is_null() {
            return Err(null("out_estimate"));
        }
        let norm = m.normalizer.clone().ok_or_else(|| {
            Fail(StfnnStatus::Checkpoint, "model carries no normalizer".into())
        })?;
        let ts = chrono_ts(unix_seconds)?;
        let ds = &mut d.dataset;
        ds.normalizer = Some(norm.clone());
        let t = ds.timestep_at_or_before(ts).ok_or_else(|| {
            Fail(
                StfnnStatus::InsufficientContext,
                "time precedes the first observation".into(),
            )
        })?;
        let target = norm.coordinate(lng, lat, ds.days_at(ts));
        let ctx = build_context(ds, target, t, k_spatial, t_hist, &BTreeSet::new())?;
        let est = m.model.pyramidal_infer(&ctx)?;
        *out_estimate = norm.denormalize_target(est.y_hat);
        Ok(())
    })
}

fn chrono_ts(secs: i64) -> Result<DateTime<Utc>, Fail> {
    DateTime::<Utc>::from_timestamp(secs, 0)
        .ok_or_else(|| Fail(StfnnStatus::InvalidArgument, format!("bad unix time {secs}")))
}
