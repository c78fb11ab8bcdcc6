//! C ABI over the okdlab model, tokenizer and metrics.
//!
//! Every function returns an [`OkdStatus`]. On failure a message is kept in
//! thread-local storage and can be copied out with
//! [`okd_last_error_message`]. Models are opaque [`OkdModel`] handles owned
//! by the caller and released with [`okd_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use okdlab::data::ByteTokenizer;
use okdlab::metrics;
use okdlab::model::{generate, DecodeConfig, TransformerLm};
use okdlab::numcore::{softmax_rows, Tensor};
use okdlab::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OkdStatus {
    Ok = 0,
    InvalidArgument = 1,
    NumericDomain = 2,
    Io = 3,
    Parse = 4,
    NullPointer = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Opaque handle to a loaded transformer.
pub struct OkdModel {
    inner: TransformerLm<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(OkdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NumericDomain(_) | Error::DegenerateDenominator { .. } => OkdStatus::NumericDomain,
            Error::Io { .. } => OkdStatus::Io,
            Error::Parse { .. } | Error::Json(_) | Error::Csv(_) | Error::Checkpoint { .. } => OkdStatus::Parse,
            _ => OkdStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: OkdStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            OkdStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OkdStatus::Internal
        }
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(OkdStatus::NullPointer, format!("{what} is null"));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(OkdStatus::NullPointer, format!("{what} is null")))
}

/// Copies `src` into `(dst, cap)` after storing its length in `len`.
unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize, len: *mut usize) -> Result<(), Failure> {
    *output(len, "length output")? = src.len();
    if src.len() > cap {
        return fail(
            OkdStatus::BufferTooSmall,
            format!("{} elements needed, buffer holds {cap}", src.len()),
        );
    }
    if !src.is_empty() {
        if dst.is_null() {
            return fail(OkdStatus::NullPointer, "output buffer is null");
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

fn widen(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

fn narrow(ids: &[usize]) -> Vec<u32> {
    ids.iter().map(|&i| i as u32).collect()
}

unsafe fn model<'a>(m: *const OkdModel) -> Result<&'a TransformerLm<f32>, Failure> {
    m.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| Failure(OkdStatus::NullPointer, "model handle is null".into()))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `cap`. Returns the full message
/// length including the terminator.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn okd_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn okd_model_load(path: *const c_char, out: *mut *mut OkdModel) -> OkdStatus {
    guard(|| {
        let out = output(out, "out")?;
        *out = ptr::null_mut();
        if path.is_null() {
            return fail(OkdStatus::NullPointer, "path is null");
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(OkdStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let inner = TransformerLm::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(OkdModel { inner }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`okd_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn okd_model_free(model: *mut OkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn okd_model_vocab_size(model: *const OkdModel, out: *mut usize) -> OkdStatus {
    guard(|| {
        *output(out, "out")? = self::model(model)?.config().vocab_size;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn okd_model_max_seq_len(model: *const OkdModel, out: *mut usize) -> OkdStatus {
    guard(|| {
        *output(out, "out")? = self::model(model)?.config().max_seq_len;
        Ok(())
    })
}

/// Writes the `[n, vocab]` row-major logits of one sequence into `out`,
/// whose capacity is `cap` floats. `out_len` receives `n * vocab`.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn okd_model_forward_logits(
    model: *const OkdModel,
    tokens: *const u32,
    n: usize,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> OkdStatus {
    guard(|| {
        let m = self::model(model)?;
        let tokens = widen(input(tokens, n, "tokens")?);
        if tokens.is_empty() {
            return fail(OkdStatus::InvalidArgument, "empty token sequence");
        }
        let logits = m.sequence_logits(&tokens, None)?;
        copy_out(logits.data(), out, cap, out_len)
    })
}

/// Continues `prompt` by up to `max_new_tokens` tokens. A `temperature` of
/// zero or less decodes greedily; otherwise tokens are sampled with a
/// generator seeded by `seed`. Only the new tokens are written.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn okd_model_generate(
    model: *const OkdModel,
    prompt: *const u32,
    n: usize,
    max_new_tokens: usize,
    temperature: f64,
    seed: u64,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> OkdStatus {
    guard(|| {
        let m = self::model(model)?;
        let prompt = widen(input(prompt, n, "prompt")?);
        let cfg = if temperature > 0.0 {
            DecodeConfig::sample(max_new_tokens, temperature)
        } else {
            DecodeConfig::greedy(max_new_tokens)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = generate(m, &prompt, &cfg, &mut rng)?;
        copy_out(&narrow(&ids), out, cap, out_len)
    })
}

/// Maps bytes to token ids (byte + 3); no reserved ids are added.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn okd_tokenize(
    bytes: *const u8,
    n: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> OkdStatus {
    guard(|| {
        let ids = ByteTokenizer.tokenize(input(bytes, n, "bytes")?);
        copy_out(&narrow(&ids), out, cap, out_len)
    })
}

/// Maps token ids back to bytes, dropping reserved ids.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn okd_detokenize(
    ids: *const u32,
    n: usize,
    out: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> OkdStatus {
    guard(|| {
        let bytes = ByteTokenizer.detokenize(&widen(input(ids, n, "ids")?))?;
        copy_out(&bytes, out, cap, out_len)
    })
}

/// ROUGE-L precision, recall and F1 of a candidate against a reference.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn okd_rouge_l(
    candidate: *const u32,
    n_candidate: usize,
    reference: *const u32,
    n_reference: usize,
    precision: *mut f64,
    recall: *mut f64,
    f1: *mut f64,
) -> OkdStatus {
    guard(|| {
        let c = input(candidate, n_candidate, "candidate")?;
        let r = input(reference, n_reference, "reference")?;
        let s = metrics::rouge_l(c, r)?;
        *output(precision, "precision")? = s.precision;
        *output(recall, "recall")? = s.recall;
        *output(f1, "f1")? = s.f1;
        Ok(())
    })
}

/// Uncertainty `1 - softmax(logits)[target]` of one logit row.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn okd_unc(logits: *const f64, n: usize, target: usize, out: *mut f64) -> OkdStatus {
    guard(|| {
        *output(out, "out")? = metrics::unc(input(logits, n, "logits")?, target)?;
        Ok(())
    })
}

/// Fraction of rows whose argmaxes agree between two `[rows, cols]`
/// logit matrices of one sentence.
///
/// # Safety
/// `teacher` and `student` must hold `rows * cols` values.
#[no_mangle]
pub unsafe extern "C" fn okd_top1_agreement(
    teacher: *const f64,
    student: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> OkdStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(OkdStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let t = Tensor::new(vec![rows, cols], input(teacher, n, "teacher")?.to_vec())?;
        let s = Tensor::new(vec![rows, cols], input(student, n, "student")?.to_vec())?;
        *output(out, "out")? = metrics::top1_agreement(&t, &s, &vec![1.0; rows])?;
        Ok(())
    })
}

/// Row-wise softmax of `logits / temperature` into `out` (same size).
///
/// # Safety
/// `logits` and `out` must hold `rows * cols` values.
#[no_mangle]
pub unsafe extern "C" fn okd_softmax(
    logits: *const f64,
    rows: usize,
    cols: usize,
    temperature: f64,
    out: *mut f64,
) -> OkdStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(OkdStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let t = Tensor::new(vec![rows, cols], input(logits, n, "logits")?.to_vec())?;
        let p = softmax_rows(&t, temperature)?;
        let mut len = 0;
        copy_out(p.data(), out, n, &mut len)
    })
}
