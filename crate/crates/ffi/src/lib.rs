//! C ABI over the mpsd pipeline: opaque model handles, status codes and
//! a thread-local last-error message. The header is generated into
//! include/mpsd.h at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use mpsd::cli::{cmd_evaluate, cmd_fit, CliError, RunConfig};
use mpsd::mps::MpsModel;

/// Status codes returned by every fallible call. Values above Ok match
/// the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpsdStatus {
    Ok = 0,
    /// Null pointer or malformed UTF-8/JSON argument.
    InvalidArgument = 1,
    /// Unusable configuration or unreadable file.
    Usage = 2,
    /// Bad data, schema or artifact content.
    Data = 3,
    /// Privacy budget cannot pay for a single update.
    Budget = 4,
}

/// Opaque trained-model handle.
pub struct MpsdModel {
    inner: MpsModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn status_from(err: &CliError) -> MpsdStatus {
    match err.exit_code() {
        2 => MpsdStatus::Usage,
        4 => MpsdStatus::Budget,
        _ => MpsdStatus::Data,
    }
}

fn fail(status: MpsdStatus, message: &str) -> MpsdStatus {
    set_error(message);
    status
}

unsafe fn path_arg(ptr: *const c_char, name: &str) -> Result<PathBuf, MpsdStatus> {
    if ptr.is_null() {
        set_error(&format!("{name} is null"));
        return Err(MpsdStatus::InvalidArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error(&format!("{name} is not valid UTF-8"));
            Err(MpsdStatus::InvalidArgument)
        }
    }
}

unsafe fn config_arg(config_json: *const c_char) -> Result<RunConfig, MpsdStatus> {
    if config_json.is_null() {
        return Ok(RunConfig::default());
    }
    let text = CStr::from_ptr(config_json).to_str().map_err(|_| {
        set_error("config_json is not valid UTF-8");
        MpsdStatus::InvalidArgument
    })?;
    serde_json::from_str(text).map_err(|e| {
        set_error(&format!("invalid config: {e}"));
        MpsdStatus::InvalidArgument
    })
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`). Returns the full message length in
/// bytes, excluding the terminator; 0 when there is no pending error.
#[no_mangle]
pub unsafe extern "C" fn mpsd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(message) = slot.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = message.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a model artifact. On success `*out` owns the handle; release
/// it with mpsd_model_free.
#[no_mangle]
pub unsafe extern "C" fn mpsd_model_load(
    path: *const c_char,
    out: *mut *mut MpsdModel,
) -> MpsdStatus {
    clear_error();
    if out.is_null() {
        return fail(MpsdStatus::InvalidArgument, "out is null");
    }
    *out = ptr::null_mut();
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match MpsModel::load(&path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(MpsdModel { inner }));
            MpsdStatus::Ok
        }
        Err(e) => fail(MpsdStatus::Data, &e.to_string()),
    }
}

/// Writes the model artifact to `path`.
#[no_mangle]
pub unsafe extern "C" fn mpsd_model_save(
    model: *const MpsdModel,
    path: *const c_char,
) -> MpsdStatus {
    clear_error();
    if model.is_null() {
        return fail(MpsdStatus::InvalidArgument, "model is null");
    }
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match (*model).inner.save(&path) {
        Ok(()) => MpsdStatus::Ok,
        Err(e) => fail(MpsdStatus::Data, &e.to_string()),
    }
}

/// Releases a handle returned by mpsd_model_load or mpsd_fit. Null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn mpsd_model_free(model: *mut MpsdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tensor cores in the chain; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn mpsd_model_num_cores(model: *const MpsdModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.num_cores()
}

/// Total trainable parameter count; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn mpsd_model_num_parameters(model: *const MpsdModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.num_parameters()
}

/// Trains a model from the JSON run configuration (same document the
/// CLI accepts; `data` and `out_dir` must be set). Artifacts are written
/// under out_dir and the trained model is returned through `out`.
#[no_mangle]
pub unsafe extern "C" fn mpsd_fit(
    config_json: *const c_char,
    out: *mut *mut MpsdModel,
) -> MpsdStatus {
    clear_error();
    if out.is_null() {
        return fail(MpsdStatus::InvalidArgument, "out is null");
    }
    *out = ptr::null_mut();
    let cfg = match config_arg(config_json) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let fit = match cmd_fit(&cfg) {
        Ok(f) => f,
        Err(e) => return fail(status_from(&e), &e.to_string()),
    };
    match MpsModel::load(&fit.model_path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(MpsdModel { inner }));
            MpsdStatus::Ok
        }
        Err(e) => fail(MpsdStatus::Data, &e.to_string()),
    }
}

/// Samples `count` synthetic records and writes them as CSV.
#[no_mangle]
pub unsafe extern "C" fn mpsd_sample_csv(
    model: *const MpsdModel,
    count: usize,
    seed: u64,
    out_path: *const c_char,
) -> MpsdStatus {
    clear_error();
    if model.is_null() {
        return fail(MpsdStatus::InvalidArgument, "model is null");
    }
    let out_path = match path_arg(out_path, "out_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    // Round-trip through a temporary artifact is avoided: sample directly.
    let model = &(*model).inner;
    let schema = model.schema();
    let columns: Vec<String> = schema.features.iter().map(|f| f.name.clone()).collect();
    let rows: Result<Vec<Vec<Option<String>>>, _> = model
        .sample(count, seed)
        .iter()
        .map(|rec| {
            mpsd::encoding::decode_record(rec, schema)
                .map(|cells| cells.into_iter().map(Some).collect())
        })
        .collect();
    let rows = match rows {
        Ok(r) => r,
        Err(e) => return fail(MpsdStatus::Data, &e.to_string()),
    };
    let table = match mpsd::encoding::Table::new(columns, rows) {
        Ok(t) => t,
        Err(e) => return fail(MpsdStatus::Data, &e.to_string()),
    };
    match table.write_csv(&out_path, "?") {
        Ok(()) => MpsdStatus::Ok,
        Err(e) => fail(MpsdStatus::Usage, &e.to_string()),
    }
}

/// Scores synthetic CSVs against real data; writes report.json and
/// report.csv under the config's out_dir. `synth_paths` is an array of
/// `num_synth` C strings.
#[no_mangle]
pub unsafe extern "C" fn mpsd_evaluate(
    config_json: *const c_char,
    real_path: *const c_char,
    synth_paths: *const *const c_char,
    num_synth: usize,
    schema_path: *const c_char,
) -> MpsdStatus {
    clear_error();
    let cfg = match config_arg(config_json) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let real = match path_arg(real_path, "real_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let schema = match path_arg(schema_path, "schema_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    if synth_paths.is_null() || num_synth == 0 {
        return fail(MpsdStatus::InvalidArgument, "synth_paths is empty");
    }
    let mut synth: Vec<PathBuf> = Vec::with_capacity(num_synth);
    for i in 0..num_synth {
        match path_arg(*synth_paths.add(i), "synth_paths[i]") {
            Ok(p) => synth.push(p),
            Err(s) => return s,
        }
    }
    match cmd_evaluate(Path::new(&real), &synth, &schema, &cfg) {
        Ok(_) => MpsdStatus::Ok,
        Err(e) => fail(status_from(&e), &e.to_string()),
    }
}
