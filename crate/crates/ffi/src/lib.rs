//! C interface to `iktn`: load a checkpoint, predict, evaluate and trace.
//!
//! Every fallible call returns an [`IktnStatus`]; on failure the message is
//! available from [`iktn_last_error`] on the same thread. Strings handed to
//! the caller are owned by the caller and released with [`iktn_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use iktn::cli::trace_sentence;
use iktn::data::{load_adjacency, load_aspect_corpus, Sentence};
use iktn::model::{Model, CHECKPOINT_FORMAT_VERSION};
use iktn::routing::Direction;
use iktn::training::evaluate_model;
use iktn::Error;
use serde::Deserialize;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IktnStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8 or not valid request JSON.
    InvalidArgument = 2,
    Config = 3,
    /// Malformed corpus, prediction file or tag.
    Format = 4,
    Checkpoint = 5,
    Io = 6,
    Numerical = 7,
    /// Shape, index or precondition failure inside the library.
    Internal = 8,
    Panic = 9,
}

/// Opaque handle to a loaded model.
pub struct IktnModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> IktnStatus {
    match e {
        Error::Config(_) => IktnStatus::Config,
        Error::Format { .. } | Error::Validation { .. } | Error::Schema(_) | Error::Json(_) => IktnStatus::Format,
        Error::Checkpoint(_) => IktnStatus::Checkpoint,
        Error::Io { .. } => IktnStatus::Io,
        Error::Numerical(_) => IktnStatus::Numerical,
        Error::Shape { .. } | Error::Contract(_) | Error::Index { .. } => IktnStatus::Internal,
    }
}

struct Failure(IktnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(IktnStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure and converts panics into [`IktnStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IktnStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IktnStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            IktnStatus::Panic
        }
    }
}

/// # Safety
/// `s` must be null or point to a nul-terminated string.
unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(Failure(IktnStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

/// # Safety
/// `out` must be null or valid for one pointer write.
unsafe fn emit(out: *mut *mut c_char, value: String) -> Result<(), Failure> {
    let c = CString::new(value).map_err(|_| invalid("output contains a nul byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// # Safety
/// `m` must be null or a live handle from [`iktn_model_load`].
unsafe fn model<'a>(m: *const IktnModel) -> Result<&'a Model, Failure> {
    m.as_ref()
        .map(|h| &h.model)
        .ok_or_else(|| Failure(IktnStatus::NullArgument, "model handle is null".into()))
}

/// One sentence: `{"tokens": [...], "edges": [[i, j], ...]}`, edges optional.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    tokens: Vec<String>,
    #[serde(default)]
    edges: Option<Vec<(usize, usize)>>,
}

fn parse_request(json: &str) -> Result<Sentence, Failure> {
    let req: Request = serde_json::from_str(json).map_err(|e| invalid(format!("request: {e}")))?;
    if req.tokens.is_empty() {
        return Err(invalid("request has no tokens"));
    }
    let mut s = Sentence::unlabeled(req.tokens);
    if let Some(edges) = req.edges {
        s.set_edges(&edges)?;
    }
    Ok(s)
}

/// Loads a checkpoint. On success `*out` receives a handle to release with
/// [`iktn_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for one pointer
/// write.
#[no_mangle]
pub unsafe extern "C" fn iktn_model_load(path: *const c_char, out: *mut *mut IktnModel) -> IktnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(IktnStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let path = text(path, "path")?;
        let model = Model::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(IktnModel { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `m` must be null or a handle from [`iktn_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iktn_model_free(m: *mut IktnModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Predicts spans and sentiments for one sentence given as request JSON.
/// `*out` receives one prediction object.
///
/// # Safety
/// `m` must be a live handle, `request` a nul-terminated string and `out`
/// valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn iktn_predict_json(
    m: *const IktnModel,
    request: *const c_char,
    out: *mut *mut c_char,
) -> IktnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(IktnStatus::NullArgument, "out is null".into()));
        }
        let model = model(m)?;
        let s = parse_request(text(request, "request")?)?;
        let pred = model.predict(&s)?;
        emit(out, serde_json::to_string(&pred).map_err(Error::from)?)
    })
}

/// Scores the model on a labelled corpus file. `adjacency` may be null.
/// `*out` receives the evaluation report.
///
/// # Safety
/// `m` must be a live handle, `corpus` a nul-terminated string, `adjacency`
/// null or a nul-terminated string, and `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn iktn_evaluate_json(
    m: *const IktnModel,
    corpus: *const c_char,
    adjacency: *const c_char,
    out: *mut *mut c_char,
) -> IktnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(IktnStatus::NullArgument, "out is null".into()));
        }
        let model = model(m)?;
        let mut sentences = load_aspect_corpus(Path::new(text(corpus, "corpus")?), &model.schemes)?;
        if !adjacency.is_null() {
            load_adjacency(Path::new(text(adjacency, "adjacency")?), &mut sentences)?;
        }
        let report = evaluate_model(model, &sentences)?;
        emit(out, serde_json::to_string(&report).map_err(Error::from)?)
    })
}

/// Coupling coefficients of one routing direction (`"ate->ote"` and the
/// like) for one sentence. `*out` receives an array of trace records.
///
/// # Safety
/// `m` must be a live handle, `request` and `direction` nul-terminated
/// strings, and `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn iktn_trace_json(
    m: *const IktnModel,
    request: *const c_char,
    direction: *const c_char,
    out: *mut *mut c_char,
) -> IktnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(IktnStatus::NullArgument, "out is null".into()));
        }
        let model = model(m)?;
        let s = parse_request(text(request, "request")?)?;
        let dir = Direction::parse(text(direction, "direction")?)?;
        let records = trace_sentence(model, &s, dir)?;
        emit(out, serde_json::to_string(&records).map_err(Error::from)?)
    })
}

/// Tensor names and shapes of the model, as `[[name, [dims...]], ...]`.
///
/// # Safety
/// `m` must be a live handle and `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn iktn_manifest_json(m: *const IktnModel, out: *mut *mut c_char) -> IktnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(IktnStatus::NullArgument, "out is null".into()));
        }
        let model = model(m)?;
        emit(out, serde_json::to_string(&model.manifest()).map_err(Error::from)?)
    })
}

/// Message of the last failure on this thread, or null after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn iktn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iktn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn iktn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Checkpoint container version this build reads and writes.
#[no_mangle]
pub extern "C" fn iktn_checkpoint_format_version() -> u32 {
    CHECKPOINT_FORMAT_VERSION
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statuses_follow_error_kinds() {
        assert_eq!(status_of(&Error::Config("x".into())), IktnStatus::Config);
        assert_eq!(status_of(&Error::Checkpoint("x".into())), IktnStatus::Checkpoint);
        assert_eq!(status_of(&Error::Numerical("x".into())), IktnStatus::Numerical);
        assert_eq!(status_of(&Error::Contract("x".into())), IktnStatus::Internal);
    }

    #[test]
    fn panics_become_a_status_with_a_message() {
        let st = guard(|| panic!("boom"));
        assert_eq!(st, IktnStatus::Panic);
        let msg = unsafe { CStr::from_ptr(iktn_last_error()) }.to_str().unwrap();
        assert!(msg.contains("boom"));
        assert_eq!(guard(|| Ok(())), IktnStatus::Ok);
        assert!(iktn_last_error().is_null());
    }

    #[test]
    fn requests_are_checked() {
        assert!(parse_request(r#"{"tokens": ["a", "b"], "edges": [[0, 1]]}"#).is_ok());
        assert!(parse_request(r#"{"tokens": []}"#).is_err());
        assert!(parse_request(r#"{"tokens": ["a"], "edges": [[0, 3]]}"#).is_err());
        assert!(parse_request(r#"{"words": ["a"]}"#).is_err());
    }
}
