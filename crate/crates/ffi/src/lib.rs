//! C ABI over `bindgeom`.
//!
//! Objects cross the boundary as opaque handles (`BgMatrix`, `BgAnnotation`)
//! that the caller frees with the matching `*_free` function. Every fallible
//! call returns a `BgStatus`; on failure `bg_last_error_message` describes the
//! error until the next failing call on the same thread. No function unwinds
//! into C: panics are caught and reported as `BG_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bindgeom::attention::{cross_attention_maps, ProjectionWeights};
use bindgeom::capo::{apply_capo, CapoOptions, CausalityMode};
use bindgeom::embx::{self, Dtype};
use bindgeom::optim::total_loss;
use bindgeom::pipeline::annotate_template;
use bindgeom::prompt::{load_annotation, parse_template_prompt, save_annotation, tokenize, Lexicon, PromptAnnotation};
use bindgeom::{Error, Matrix};

/// Opaque row-major `f64` matrix.
pub struct BgMatrix(Matrix);

/// Opaque prompt annotation.
pub struct BgAnnotation(PromptAnnotation);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed EMBX bytes or annotation JSON.
    Format = 4,
    /// Prompt outside the template grammar or lexicon.
    Parse = 5,
    Shape = 6,
    /// Near-singular input, non-finite loss or a similar numerical failure.
    Numerical = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BgMode {
    Causal = 0,
    NonCausal = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BgLoss {
    pub ent: f64,
    pub bhat: f64,
    pub total: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> BgStatus {
    match err.root() {
        Error::Io { .. } => BgStatus::Io,
        Error::BadMagic { .. }
        | Error::BadVersion { .. }
        | Error::BadDtype { .. }
        | Error::TruncatedPayload { .. }
        | Error::TrailingBytes { .. }
        | Error::Schema(_)
        | Error::Json(_)
        | Error::Overlap { .. }
        | Error::Index(_)
        | Error::NonFinite { .. } => BgStatus::Format,
        Error::Parse { .. } => BgStatus::Parse,
        Error::BadShape { .. }
        | Error::DimensionMismatch { .. }
        | Error::ShapeMismatch(_)
        | Error::SizeMismatch { .. }
        | Error::IndexOutOfRange { .. } => BgStatus::Shape,
        e if e.exit_code() == 2 => BgStatus::Numerical,
        _ => BgStatus::InvalidArgument,
    }
}

struct Failure(BgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

type FfiResult = Result<(), Failure>;

fn null(what: &str) -> Failure {
    Failure(BgStatus::NullPointer, format!("{what} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BgStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> FfiResult) -> BgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            BgStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn dtype_of(byte: u8) -> Result<Dtype, Failure> {
    Ok(Dtype::from_byte(byte)?)
}

/// Message for the last failing call on this thread; empty if none. Valid
/// until the next failing call on the same thread. Do not free.
#[no_mangle]
pub extern "C" fn bg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// --- matrices ---------------------------------------------------------------

/// Copies `rows * cols` row-major values from `data` into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles (may be NULL when that
/// product is 0); `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bg_matrix_new(rows: usize, cols: usize, data: *const f64, out: *mut *mut BgMatrix) -> BgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("rows * cols overflows"))?;
        let values = if n == 0 {
            Vec::new()
        } else if data.is_null() {
            return Err(null("data"));
        } else {
            std::slice::from_raw_parts(data, n).to_vec()
        };
        *out = boxed(BgMatrix(Matrix::new(rows, cols, values)?));
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bg_matrix_free(m: *mut BgMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Rows of `m`, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bg_matrix_rows(m: *const BgMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// Columns of `m`, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bg_matrix_cols(m: *const BgMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Borrowed pointer to the row-major data, valid while `m` lives.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bg_matrix_data(m: *const BgMatrix) -> *const f64 {
    m.as_ref().map_or(ptr::null(), |m| m.0.as_slice().as_ptr())
}

// --- EMBX -------------------------------------------------------------------

/// Decodes EMBX bytes. `out_dtype` (optional) receives 0 for f32, 1 for f64.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be valid;
/// `out_dtype` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn bg_embx_read(
    bytes: *const u8,
    len: usize,
    out: *mut *mut BgMatrix,
    out_dtype: *mut u8,
) -> BgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let data = if len == 0 {
            &[][..]
        } else if bytes.is_null() {
            return Err(null("bytes"));
        } else {
            std::slice::from_raw_parts(bytes, len)
        };
        let file = embx::read_embx(data)?;
        if let Some(d) = out_dtype.as_mut() {
            *d = file.dtype as u8;
        }
        *out = boxed(BgMatrix(file.matrix));
        Ok(())
    })
}

/// Encodes `m` with `dtype` (0 = f32, 1 = f64) into a new buffer that the
/// caller releases with `bg_bytes_free`.
///
/// # Safety
/// `m` must be a live handle; `out_bytes` and `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bg_embx_write(
    m: *const BgMatrix,
    dtype: u8,
    out_bytes: *mut *mut u8,
    out_len: *mut usize,
) -> BgStatus {
    guard(|| {
        let m = deref(m, "m")?;
        let out_bytes = out_ptr(out_bytes, "out_bytes")?;
        let out_len = out_ptr(out_len, "out_len")?;
        let bytes = embx::write_embx(&m.0, dtype_of(dtype)?).into_boxed_slice();
        *out_len = bytes.len();
        *out_bytes = Box::into_raw(bytes).cast();
        Ok(())
    })
}

/// # Safety
/// `bytes`/`len` must come from `bg_embx_write`, or `bytes` must be NULL.
#[no_mangle]
pub unsafe extern "C" fn bg_bytes_free(bytes: *mut u8, len: usize) {
    if !bytes.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(bytes, len)));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` valid; `out_dtype` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn bg_embx_load(path: *const c_char, out: *mut *mut BgMatrix, out_dtype: *mut u8) -> BgStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let out = out_ptr(out, "out")?;
        let file = embx::load(path)?;
        if let Some(d) = out_dtype.as_mut() {
            *d = file.dtype as u8;
        }
        *out = boxed(BgMatrix(file.matrix));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `m` a live handle.
#[no_mangle]
pub unsafe extern "C" fn bg_embx_save(path: *const c_char, m: *const BgMatrix, dtype: u8) -> BgStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let m = deref(m, "m")?;
        embx::save(path, &m.0, dtype_of(dtype)?)?;
        Ok(())
    })
}

// --- annotations ------------------------------------------------------------

/// Parses a template prompt with the built-in lexicon. With `rows > 0` the
/// annotation spans `rows` embedding rows, the extras being EOT then PAD.
///
/// # Safety
/// `prompt` must be a NUL-terminated string; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn bg_parse_prompt(prompt: *const c_char, rows: usize, out: *mut *mut BgAnnotation) -> BgStatus {
    guard(|| {
        let prompt = c_str(prompt, "prompt")?;
        let out = out_ptr(out, "out")?;
        let ann = if rows == 0 {
            parse_template_prompt(&tokenize(prompt), &Lexicon::builtin())?
        } else {
            annotate_template(prompt, rows)?
        };
        *out = boxed(BgAnnotation(ann));
        Ok(())
    })
}

/// Loads an annotation from its JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn bg_annotation_load(json: *const c_char, out: *mut *mut BgAnnotation) -> BgStatus {
    guard(|| {
        let json = c_str(json, "json")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(BgAnnotation(load_annotation(json)?));
        Ok(())
    })
}

/// JSON document for `a`; release with `bg_string_free`. NULL on NULL input.
///
/// # Safety
/// `a` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bg_annotation_to_json(a: *const BgAnnotation) -> *mut c_char {
    match a.as_ref() {
        Some(a) => CString::new(save_annotation(&a.0)).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `a` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bg_annotation_token_count(a: *const BgAnnotation) -> usize {
    a.as_ref().map_or(0, |a| a.0.token_count)
}

/// # Safety
/// `a` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bg_annotation_np_count(a: *const BgAnnotation) -> usize {
    a.as_ref().map_or(0, |a| a.0.nps.len())
}

/// Object token index of noun phrase `np`.
///
/// # Safety
/// `a` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn bg_annotation_object_index(a: *const BgAnnotation, np: usize, out: *mut usize) -> BgStatus {
    guard(|| {
        let a = deref(a, "a")?;
        let out = out_ptr(out, "out")?;
        let phrase = a.0.nps.get(np).ok_or_else(|| {
            Failure(BgStatus::Shape, format!("noun phrase {np} out of range for {}", a.0.nps.len()))
        })?;
        *out = phrase.object_index;
        Ok(())
    })
}

/// # Safety
/// `a` must be NULL or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bg_annotation_free(a: *mut BgAnnotation) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn bg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// --- algorithms -------------------------------------------------------------

/// Projection-out of noun-phrase tokens. `strict_complement` only affects
/// causal mode.
///
/// # Safety
/// `t` and `a` must be live handles; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn bg_apply_capo(
    t: *const BgMatrix,
    a: *const BgAnnotation,
    mode: BgMode,
    strict_complement: bool,
    out: *mut *mut BgMatrix,
) -> BgStatus {
    guard(|| {
        let t = deref(t, "t")?;
        let a = deref(a, "a")?;
        let out = out_ptr(out, "out")?;
        let mode = match mode {
            BgMode::Causal => CausalityMode::Causal,
            BgMode::NonCausal => CausalityMode::NonCausal,
        };
        let options = CapoOptions { strict_complement, ..Default::default() };
        *out = boxed(BgMatrix(apply_capo(&t.0, &a.0, mode, options)?.embeddings));
        Ok(())
    })
}

unsafe fn weights(wq: *const BgMatrix, wk: *const BgMatrix, wv: *const BgMatrix) -> Result<ProjectionWeights, Failure> {
    Ok(ProjectionWeights::new(
        deref(wq, "wq")?.0.clone(),
        deref(wk, "wk")?.0.clone(),
        deref(wv, "wv")?.0.clone(),
    )?)
}

/// Row-softmax attention `P` (N×L) and its column normalisation `A`. Either
/// output pointer may be NULL to skip it.
///
/// # Safety
/// All handles must be live; output pointers valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn bg_cross_attention(
    h: *const BgMatrix,
    t: *const BgMatrix,
    wq: *const BgMatrix,
    wk: *const BgMatrix,
    wv: *const BgMatrix,
    out_p: *mut *mut BgMatrix,
    out_a: *mut *mut BgMatrix,
) -> BgStatus {
    guard(|| {
        let state = cross_attention_maps(&deref(h, "h")?.0, &deref(t, "t")?.0, &weights(wq, wk, wv)?)?;
        if let Some(p) = out_p.as_mut() {
            *p = boxed(BgMatrix(state.p));
        }
        if let Some(a) = out_a.as_mut() {
            *a = boxed(BgMatrix(state.a));
        }
        Ok(())
    })
}

/// Entropy over object maps plus `lambda` times the inter-NP Bhattacharyya sum.
///
/// # Safety
/// All handles must be live; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn bg_total_loss(
    h: *const BgMatrix,
    t: *const BgMatrix,
    wq: *const BgMatrix,
    wk: *const BgMatrix,
    wv: *const BgMatrix,
    a: *const BgAnnotation,
    lambda: f64,
    out: *mut BgLoss,
) -> BgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let a = deref(a, "a")?;
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let state = cross_attention_maps(&deref(h, "h")?.0, &deref(t, "t")?.0, &weights(wq, wk, wv)?)?;
        let lb = total_loss(&state, &a.0, lambda)?;
        *out = BgLoss { ent: lb.ent, bhat: lb.bhat, total: lb.total };
        Ok(())
    })
}
