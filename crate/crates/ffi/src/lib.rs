//! C ABI over the engine.
//!
//! Handles are opaque pointers. Every function returns a [`DvqaStatus`];
//! on failure, [`dvqa_last_error_message`] describes the error for the
//! calling thread. Strings handed out by the library must be released with
//! [`dvqa_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use libc::{c_char, size_t};
use serde_json::json;

use dvqa_core::assigner::parse_count;
use dvqa_core::config::{ConfigError, EngineConfig};
use dvqa_core::store::{cosine, normalize};
use dvqa_core::taxonomy::TaxonomyError;
use dvqa_core::{Engine, PipelineConfig, PipelineError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvqaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    UnknownQuestion = 4,
    Retrieval = 5,
    Prompt = 6,
    Gateway = 7,
    InvalidArgument = 8,
    NotFound = 9,
    Panic = 99,
}

/// Opaque engine handle.
pub struct DvqaEngine {
    engine: Engine,
    pipeline: PipelineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(DvqaStatus, String);

impl Fail {
    fn new(status: DvqaStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        Fail::new(DvqaStatus::Config, e.to_string())
    }
}

impl From<PipelineError> for Fail {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Taxonomy(TaxonomyError::UnknownQuestion(_)) => DvqaStatus::UnknownQuestion,
            PipelineError::Taxonomy(_) => DvqaStatus::InvalidArgument,
            PipelineError::Retrieval(_) => DvqaStatus::Retrieval,
            PipelineError::Prompt(_) => DvqaStatus::Prompt,
            PipelineError::Gateway { .. } => DvqaStatus::Gateway,
        };
        Fail::new(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DvqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DvqaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside dvqa");
            DvqaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(DvqaStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::new(DvqaStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::new(DvqaStatus::NullArgument, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail::new(DvqaStatus::InvalidArgument, "output contains NUL"))?;
    *out = c.into_raw();
    Ok(())
}

/// Loads a TOML engine config and builds an engine.
///
/// # Safety
/// `config_path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dvqa_engine_open(config_path: *const c_char, out: *mut *mut DvqaEngine) -> DvqaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(config_path, "config_path")?;
        let cfg = EngineConfig::load(Path::new(path))?;
        let engine = cfg.build_engine()?;
        *out = Box::into_raw(Box::new(DvqaEngine {
            engine,
            pipeline: cfg.pipeline,
        }));
        Ok(())
    })
}

/// # Safety
/// `engine` must come from [`dvqa_engine_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dvqa_engine_free(engine: *mut DvqaEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Answers one question about one image. On success `*out_json` holds the
/// verdict, reasoning and exemplars as JSON.
///
/// `selection_stage` is 1 for on, 0 for off, and -1 to keep the config value.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dvqa_ask(
    engine: *const DvqaEngine,
    image_ref: *const c_char,
    question: *const c_char,
    selection_stage: i32,
    out_json: *mut *mut c_char,
) -> DvqaStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(out_json, "out_json")?;
        *out_json = ptr::null_mut();
        let h = &*engine;
        let image = str_arg(image_ref, "image_ref")?;
        let question = str_arg(question, "question")?;
        let mut cfg = h.pipeline.clone();
        match selection_stage {
            -1 => {}
            0 => cfg.selection_stage = false,
            1 => cfg.selection_stage = true,
            v => return Err(Fail::new(DvqaStatus::InvalidArgument, format!("selection_stage must be -1, 0 or 1, got {v}"))),
        }
        let outcome = h.engine.ask(image, question, None, &cfg)?;
        let body = json!({
            "question_id": outcome.spec.question_id,
            "category": outcome.spec.category,
            "verdict": outcome.verdict,
            "display": outcome.verdict.value.to_string(),
            "reasoning": outcome.trace.raw,
            "exemplars": outcome.exemplars,
        });
        put_string(out_json, body.to_string())
    })
}

/// Classifies a question against the engine's registry; `*out_json` gets
/// the registry entry.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dvqa_classify(
    engine: *const DvqaEngine,
    question: *const c_char,
    out_json: *mut *mut c_char,
) -> DvqaStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(out_json, "out_json")?;
        *out_json = ptr::null_mut();
        let q = str_arg(question, "question")?;
        let spec = (*engine)
            .engine
            .registry
            .classify(q)
            .map_err(|e| Fail::new(DvqaStatus::UnknownQuestion, e.to_string()))?;
        put_string(out_json, serde_json::to_string(spec).expect("spec serializes"))
    })
}

/// Extracts a count from free text: the last integer, else the last number
/// word. Returns `NOT_FOUND` when there is neither.
///
/// # Safety
/// `text` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dvqa_parse_count(text: *const c_char, out: *mut u64) -> DvqaStatus {
    guard(|| {
        non_null(out, "out")?;
        let t = str_arg(text, "text")?;
        *out = parse_count(t).ok_or_else(|| Fail::new(DvqaStatus::NotFound, "no count in text"))?;
        Ok(())
    })
}

/// Cosine similarity of two `len`-float vectors.
///
/// # Safety
/// `a` and `b` must each point at `len` floats.
#[no_mangle]
pub unsafe extern "C" fn dvqa_cosine(a: *const f32, b: *const f32, len: size_t, out: *mut f64) -> DvqaStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        let bad = |e: dvqa_core::store::StoreError| Fail::new(DvqaStatus::InvalidArgument, e.to_string());
        let a = normalize(std::slice::from_raw_parts(a, len)).map_err(bad)?;
        let b = normalize(std::slice::from_raw_parts(b, len)).map_err(bad)?;
        *out = cosine(&a, &b).map_err(bad)?;
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn dvqa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dvqa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn dvqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
