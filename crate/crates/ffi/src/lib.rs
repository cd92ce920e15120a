//! C ABI over `fresh-core`.
//!
//! Every fallible function returns a [`FreshStatus`]; on failure the message
//! is available from [`fresh_last_error`] on the same thread. Output
//! buffers are caller-allocated; when one is too small the call fails with
//! [`FreshStatus::BufferTooSmall`] and reports the required length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fresh_core::checkpoint::Checkpoint;
use fresh_core::corpus::{tokenize, Document, EncodedDoc, Vocabulary, DEFAULT_MAX_PIECE_LEN};
use fresh_core::discretize::{best_window, resolve_k, select_instance, top_k_indices, Strategy};
use fresh_core::harness::expected_best;
use fresh_core::lei::{omega, RegularizerConfig};
use fresh_core::model::{forward, ModelParams};
use fresh_core::saliency::{score_document, Scorer};
use fresh_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreshStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Parse = 5,
    Schema = 6,
    Shape = 7,
    Numeric = 8,
    Config = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreshScorer {
    Attention = 0,
    Gradient = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreshStrategy {
    TopK = 0,
    Contiguous = 1,
}

/// A loaded classifier and its vocabulary.
pub struct FreshClassifier {
    params: ModelParams,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FreshStatus {
    match err.kind() {
        "io" => FreshStatus::Io,
        "parse" | "json" | "csv" => FreshStatus::Parse,
        "schema" | "empty_document" => FreshStatus::Schema,
        "shape" => FreshStatus::Shape,
        "numeric" | "diverged" => FreshStatus::Numeric,
        "config" | "selection" => FreshStatus::Config,
        _ => FreshStatus::Internal,
    }
}

struct Failure(FreshStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: FreshStatus, message: &str) -> Failure {
    Failure(status, message.to_string())
}

/// Run `f`, recording its error message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FreshStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FreshStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FreshStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(data: *const T, len: usize) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(fail(FreshStatus::NullPointer, "null input buffer"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn out<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(FreshStatus::NullPointer, "null output pointer"))
}

unsafe fn text<'a>(s: *const c_char) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(fail(FreshStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(FreshStatus::InvalidArgument, "string is not valid UTF-8"))
}

/// Copy `values` into a caller buffer of `capacity`, always reporting the
/// full length through `out_len`.
unsafe fn write_out<T: Copy>(values: &[T], buffer: *mut T, capacity: usize, out_len: *mut usize) -> Result<(), Failure> {
    *out(out_len)? = values.len();
    if values.len() > capacity {
        return Err(Failure(
            FreshStatus::BufferTooSmall,
            format!("buffer holds {capacity} values, {} needed", values.len()),
        ));
    }
    if !values.is_empty() {
        if buffer.is_null() {
            return Err(fail(FreshStatus::NullPointer, "null output buffer"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), buffer, values.len());
    }
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fresh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fresh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Rationale length for a document of `len` tokens at ratio `ratio`.
///
/// # Safety
/// `out_k` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fresh_resolve_k(len: usize, ratio: f64, out_k: *mut usize) -> FreshStatus {
    guard(|| {
        if len == 0 || !(ratio > 0.0 && ratio <= 1.0) {
            return Err(fail(FreshStatus::InvalidArgument, "need len >= 1 and ratio in (0, 1]"));
        }
        *out(out_k)? = resolve_k(len, ratio);
        Ok(())
    })
}

/// Start and mass of the highest-scoring window of `k` consecutive scores
/// (the first such window on ties).
///
/// # Safety
/// `scores` must point to `len` readable doubles; the out pointers must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn fresh_best_span(
    scores: *const f64,
    len: usize,
    k: usize,
    out_start: *mut usize,
    out_mass: *mut f64,
) -> FreshStatus {
    guard(|| {
        let (start, mass) = best_window(slice(scores, len)?, k)?;
        *out(out_start)? = start;
        *out(out_mass)? = mass;
        Ok(())
    })
}

/// Indices of the `k` highest scores in ascending index order (lower index
/// first on ties). `out_indices` must hold at least `k` entries.
///
/// # Safety
/// `scores` must point to `len` readable doubles and `out_indices` to `k`
/// writable entries.
#[no_mangle]
pub unsafe extern "C" fn fresh_topk(scores: *const f64, len: usize, k: usize, out_indices: *mut usize) -> FreshStatus {
    guard(|| {
        let idx = top_k_indices(slice(scores, len)?, k)?;
        let mut written = 0;
        write_out(&idx, out_indices, k, &mut written)
    })
}

/// Conciseness and contiguity penalty of a binary mask (`z[i]` nonzero
/// means selected).
///
/// # Safety
/// `z` must point to `len` readable bytes and `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fresh_omega(
    z: *const u8,
    len: usize,
    lambda1: f64,
    lambda2: f64,
    desired_ratio: f64,
    out_value: *mut f64,
) -> FreshStatus {
    guard(|| {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0 && desired_ratio > 0.0 && desired_ratio <= 1.0) {
            return Err(fail(FreshStatus::InvalidArgument, "need lambdas >= 0 and ratio in (0, 1]"));
        }
        let mask: Vec<bool> = slice(z, len)?.iter().map(|&b| b != 0).collect();
        let rcfg = RegularizerConfig {
            lambda1,
            lambda2,
            desired_ratio,
        };
        *out(out_value)? = omega(&mask, &rcfg);
        Ok(())
    })
}

/// Expected maximum of `n` uniform draws with replacement from `scores`.
///
/// # Safety
/// `scores` must point to `len` readable doubles and `out_value` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn fresh_expected_best(scores: *const f64, len: usize, n: u64, out_value: *mut f64) -> FreshStatus {
    guard(|| {
        *out(out_value)? = expected_best(slice(scores, len)?, n)?;
        Ok(())
    })
}

/// Load a classifier checkpoint and its `piece<TAB>id` vocabulary.
///
/// # Safety
/// Both paths must be valid NUL-terminated strings and `out_handle` a valid
/// pointer. The handle must be released with [`fresh_classifier_free`].
#[no_mangle]
pub unsafe extern "C" fn fresh_classifier_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out_handle: *mut *mut FreshClassifier,
) -> FreshStatus {
    guard(|| {
        let handle = out(out_handle)?;
        *handle = ptr::null_mut();
        let params = ModelParams::load(Path::new(text(checkpoint_path)?))?;
        let vocab = Vocabulary::read(Path::new(text(vocab_path)?))?;
        if vocab.len() != params.config.vocab_size {
            return Err(Failure(
                FreshStatus::Shape,
                format!(
                    "vocabulary has {} entries, checkpoint expects {}",
                    vocab.len(),
                    params.config.vocab_size
                ),
            ));
        }
        *handle = Box::into_raw(Box::new(FreshClassifier { params, vocab }));
        Ok(())
    })
}

/// Release a handle from [`fresh_classifier_load`]. NULL is ignored.
///
/// # Safety
/// `handle` must be NULL or a live handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fresh_classifier_free(handle: *mut FreshClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of classes, or 0 for a NULL handle.
///
/// # Safety
/// `handle` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fresh_classifier_num_classes(handle: *const FreshClassifier) -> usize {
    handle.as_ref().map_or(0, |h| h.params.config.num_classes)
}

impl FreshClassifier {
    fn encode(&self, doc_text: &str, query: Option<&str>) -> Result<(Document, EncodedDoc), Failure> {
        let tokens = tokenize(doc_text, DEFAULT_MAX_PIECE_LEN)?;
        let query = match query {
            Some(q) if !q.trim().is_empty() => Some(tokenize(q, DEFAULT_MAX_PIECE_LEN)?),
            _ => None,
        };
        let doc = Document {
            id: "input".into(),
            tokens,
            query,
            label: 0,
            gold_rationale: None,
        };
        let encoded = EncodedDoc::encode(&doc, &self.vocab);
        Ok((doc, encoded))
    }

    fn scores(&self, doc_text: &str, query: Option<&str>, scorer: FreshScorer) -> Result<Vec<f64>, Failure> {
        let (_, encoded) = self.encode(doc_text, query)?;
        let scorer = match scorer {
            FreshScorer::Attention => Scorer::Attention,
            FreshScorer::Gradient => Scorer::Gradient,
        };
        Ok(score_document(&self.params, "input", &encoded, scorer)?.scores)
    }
}

unsafe fn handle_ref<'a>(handle: *const FreshClassifier) -> Result<&'a FreshClassifier, Failure> {
    handle.as_ref().ok_or_else(|| fail(FreshStatus::NullPointer, "null classifier handle"))
}

unsafe fn optional_text<'a>(s: *const c_char) -> Result<Option<&'a str>, Failure> {
    if s.is_null() {
        Ok(None)
    } else {
        text(s).map(Some)
    }
}

/// Class probabilities for `doc_text` (whitespace-tokenized) with an
/// optional `query` (NULL for none), and the predicted label.
///
/// # Safety
/// `handle` must be live, strings NUL-terminated, `out_probs` must hold
/// `capacity` doubles, and the remaining out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fresh_classifier_predict(
    handle: *const FreshClassifier,
    doc_text: *const c_char,
    query: *const c_char,
    out_probs: *mut f64,
    capacity: usize,
    out_len: *mut usize,
    out_label: *mut usize,
) -> FreshStatus {
    guard(|| {
        let h = handle_ref(handle)?;
        let (_, encoded) = h.encode(text(doc_text)?, optional_text(query)?)?;
        let trace = forward(&h.params, &encoded, None)?;
        *out(out_label)? = fresh_core::metrics::argmax(&trace.probs);
        write_out(&trace.probs, out_probs, capacity, out_len)
    })
}

/// One importance score per whitespace token of `doc_text`.
///
/// # Safety
/// As for [`fresh_classifier_predict`], with `out_scores` holding
/// `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn fresh_classifier_token_scores(
    handle: *const FreshClassifier,
    doc_text: *const c_char,
    query: *const c_char,
    scorer: FreshScorer,
    out_scores: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> FreshStatus {
    guard(|| {
        let h = handle_ref(handle)?;
        let scores = h.scores(text(doc_text)?, optional_text(query)?, scorer)?;
        write_out(&scores, out_scores, capacity, out_len)
    })
}

/// Sorted token indices of the rationale for `doc_text` at length ratio
/// `ratio`, selected from the classifier's own scores.
///
/// # Safety
/// As for [`fresh_classifier_predict`], with `out_indices` holding
/// `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn fresh_classifier_rationale(
    handle: *const FreshClassifier,
    doc_text: *const c_char,
    query: *const c_char,
    scorer: FreshScorer,
    ratio: f64,
    strategy: FreshStrategy,
    out_indices: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> FreshStatus {
    guard(|| {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(fail(FreshStatus::InvalidArgument, "ratio must lie in (0, 1]"));
        }
        let h = handle_ref(handle)?;
        let scores = h.scores(text(doc_text)?, optional_text(query)?, scorer)?;
        let scorer = match scorer {
            FreshScorer::Attention => Scorer::Attention,
            FreshScorer::Gradient => Scorer::Gradient,
        };
        let sv = fresh_core::saliency::ScoreVector::new("input", scores, scorer);
        let strategy = match strategy {
            FreshStrategy::TopK => Strategy::TopK,
            FreshStrategy::Contiguous => Strategy::Contiguous,
        };
        let mask = select_instance(&sv, ratio, strategy)?;
        write_out(&mask.selected, out_indices, capacity, out_len)
    })
}
