//! C ABI over the billetdec decoder.
//!
//! Objects cross the boundary as opaque handles created by `bd_*_new`,
//! `bd_*_load` or `bd_*_parse` and released with the matching `bd_*_free`.
//! Every fallible call returns a `BdStatus`; on failure the message is kept
//! per thread and read back with `bd_last_error`. Strings passed in are
//! NUL-terminated UTF-8. Strings handed out either borrow from their handle
//! or, where documented, must be released with `bd_string_free`.
//!
//! Panics never unwind into C: they are caught and reported as
//! `BD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use billetdec::ctc::{self, DecodeOptions, DecodeResult, ProbLattice, Provenance, RepairOptions};
use billetdec::error::Error;
use billetdec::harness;
use billetdec::model::{self, ModelParams};
use billetdec::numeric::{self, Alphabet, Tensor};
use billetdec::rules::EncodingRules;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    AlphabetMismatch = 5,
    Internal = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdProvenance {
    Normal = 0,
    BlankRepaired = 1,
    RuleCorrected = 2,
}

impl From<Provenance> for BdProvenance {
    fn from(p: Provenance) -> Self {
        match p {
            Provenance::Normal => BdProvenance::Normal,
            Provenance::BlankRepaired => BdProvenance::BlankRepaired,
            Provenance::RuleCorrected => BdProvenance::RuleCorrected,
        }
    }
}

/// Decoder switches; start from `bd_decode_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BdDecodeOptions {
    pub repair_enabled: bool,
    pub rules_enabled: bool,
    pub min_run: usize,
    pub repair_edges: bool,
}

impl From<BdDecodeOptions> for DecodeOptions {
    fn from(o: BdDecodeOptions) -> Self {
        DecodeOptions {
            repair: RepairOptions {
                min_run: o.min_run,
                repair_edges: o.repair_edges,
            },
            repair_enabled: o.repair_enabled,
            rules_enabled: o.rules_enabled,
        }
    }
}

pub struct BdLattice(ProbLattice);
pub struct BdRules(EncodingRules);
pub struct BdModel(ModelParams);

pub struct BdResult {
    inner: DecodeResult,
    text: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> BdStatus {
    match err {
        Error::Parse { .. } | Error::Format(_) | Error::Csv(_) => BdStatus::Parse,
        Error::Io { .. } => BdStatus::Io,
        Error::AlphabetMismatch(_) | Error::UnknownSymbol(_) => BdStatus::AlphabetMismatch,
        Error::Internal(_) => BdStatus::Internal,
        _ => BdStatus::InvalidArgument,
    }
}

/// Boundary failure: either a core error or a bad argument detected here.
enum Fail {
    Core(Error),
    Null(&'static str),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            BdStatus::Ok
        }
        Ok(Err(Fail::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            BdStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            BdStatus::InvalidArgument
        }
        Err(_) => {
            set_error("panic inside billetdec".into());
            BdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    write_out(out, Box::into_raw(Box::new(value)), "out")
}

unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

// ---- misc -------------------------------------------------------------------

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next `bd_*` call on the same thread.
#[no_mangle]
pub extern "C" fn bd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn bd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library with ownership.
///
/// # Safety
/// `s` must come from a `bd_*` call documented as returning an owned string,
/// or be NULL.
#[no_mangle]
pub unsafe extern "C" fn bd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Shannon entropy (nats) of a probability vector summing to 1.
///
/// # Safety
/// `probs` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bd_entropy(probs: *const f64, len: usize, out: *mut f64) -> BdStatus {
    guard(|| {
        let p = slice_arg(probs, len, "probs")?;
        write_out(out, numeric::entropy_of(p)?, "out")
    })
}

/// Elementwise `1 / (1 + exp(-k (p - t)))` over `len` values.
///
/// # Safety
/// `prob`, `thresh` and `out` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bd_db_binarize(
    prob: *const f64,
    thresh: *const f64,
    len: usize,
    k: f64,
    out: *mut f64,
) -> BdStatus {
    guard(|| {
        let p = slice_arg(prob, len, "prob")?;
        let t = slice_arg(thresh, len, "thresh")?;
        if out.is_null() && len > 0 {
            return Err(Fail::Null("out"));
        }
        let p = Tensor::new(vec![len], p.to_vec())?;
        let t = Tensor::new(vec![len], t.to_vec())?;
        let b = numeric::db_binarize(&p, &t, k)?;
        if len > 0 {
            std::slice::from_raw_parts_mut(out, len).copy_from_slice(b.data());
        }
        Ok(())
    })
}

/// Levenshtein distance between two UTF-8 strings, in characters.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn bd_edit_distance(a: *const c_char, b: *const c_char, out: *mut usize) -> BdStatus {
    guard(|| {
        let a = str_arg(a, "a")?;
        let b = str_arg(b, "b")?;
        write_out(out, harness::edit_distance(a, b), "out")
    })
}

// ---- lattices -----------------------------------------------------------------

/// Builds a lattice from `timesteps * classes` row-major probabilities.
/// `classes` must equal the alphabet length plus one (blank last).
///
/// # Safety
/// `alphabet` must be a NUL-terminated string and `probs` must point to
/// `timesteps * classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn bd_lattice_new(
    alphabet: *const c_char,
    timesteps: usize,
    classes: usize,
    probs: *const f64,
    out: *mut *mut BdLattice,
) -> BdStatus {
    guard(|| {
        let alphabet = Alphabet::parse(str_arg(alphabet, "alphabet")?)?;
        if classes != alphabet.classes() {
            return Err(Fail::Arg(format!(
                "classes = {classes} but the alphabet needs {}",
                alphabet.classes()
            )));
        }
        let n = timesteps
            .checked_mul(classes)
            .ok_or_else(|| Fail::Arg("lattice size overflows".into()))?;
        let data = slice_arg(probs, n, "probs")?;
        let lat = ProbLattice::from_flat(alphabet, timesteps, data, numeric::DIST_SUM_TOL)?;
        write_handle(out, BdLattice(lat))
    })
}

/// Parses a lattice in the `LAT1` text format.
///
/// # Safety
/// `text` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bd_lattice_parse(text: *const c_char, out: *mut *mut BdLattice) -> BdStatus {
    guard(|| {
        let lat = ProbLattice::from_text(str_arg(text, "text")?)?;
        write_handle(out, BdLattice(lat))
    })
}

/// Loads a text or binary lattice file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bd_lattice_load(path: *const c_char, out: *mut *mut BdLattice) -> BdStatus {
    guard(|| {
        let lat = ProbLattice::load(str_arg(path, "path")?)?;
        write_handle(out, BdLattice(lat))
    })
}

/// # Safety
/// `lattice` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn bd_lattice_timesteps(lattice: *const BdLattice) -> usize {
    lattice.as_ref().map_or(0, |l| l.0.timesteps())
}

/// # Safety
/// `lattice` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn bd_lattice_classes(lattice: *const BdLattice) -> usize {
    lattice.as_ref().map_or(0, |l| l.0.classes())
}

/// Mean per-row entropy in nats.
///
/// # Safety
/// `lattice` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bd_lattice_mean_entropy(lattice: *const BdLattice, out: *mut f64) -> BdStatus {
    guard(|| {
        let l = ref_arg(lattice, "lattice")?;
        write_out(out, l.0.mean_entropy(), "out")
    })
}

/// # Safety
/// `lattice` must be a handle from this library or NULL; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn bd_lattice_free(lattice: *mut BdLattice) {
    free_handle(lattice)
}

// ---- rules ----------------------------------------------------------------------

/// The bundled billet numbering schema.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bd_rules_billet(out: *mut *mut BdRules) -> BdStatus {
    guard(|| write_handle(out, BdRules(EncodingRules::billet())))
}

/// Parses encoding rules (`name CLASS length` per line).
///
/// # Safety
/// `text` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bd_rules_parse(text: *const c_char, out: *mut *mut BdRules) -> BdStatus {
    guard(|| {
        let rules = EncodingRules::parse(str_arg(text, "text")?)?;
        write_handle(out, BdRules(rules))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bd_rules_load(path: *const c_char, out: *mut *mut BdRules) -> BdStatus {
    guard(|| {
        let rules = EncodingRules::load(str_arg(path, "path")?)?;
        write_handle(out, BdRules(rules))
    })
}

/// Writes whether `text` satisfies every positional constraint.
///
/// # Safety
/// `rules` must be a live handle and `text` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bd_rules_is_valid(rules: *const BdRules, text: *const c_char, out: *mut bool) -> BdStatus {
    guard(|| {
        let r = ref_arg(rules, "rules")?;
        write_out(out, r.0.is_valid(str_arg(text, "text")?), "out")
    })
}

/// # Safety
/// `rules` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn bd_rules_free(rules: *mut BdRules) {
    free_handle(rules)
}

// ---- model ----------------------------------------------------------------------

/// Loads a checkpoint written by `billetdec train`.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bd_model_load(path: *const c_char, out: *mut *mut BdModel) -> BdStatus {
    guard(|| {
        let params = ModelParams::load(str_arg(path, "path")?)?;
        write_handle(out, BdModel(params))
    })
}

/// Slides the classifier over a grayscale strip (`height * width` values in
/// [0, 1], row-major) and returns the probability lattice. `stride` 0 picks
/// half the window.
///
/// # Safety
/// `model` must be a live handle and `pixels` must point to `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn bd_model_classify_strip(
    model: *const BdModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    stride: usize,
    out: *mut *mut BdLattice,
) -> BdStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Fail::Arg("strip size overflows".into()))?;
        let data = slice_arg(pixels, n, "pixels")?;
        let strip = Tensor::new(vec![1, height, width], data.to_vec())?;
        let window = m.0.arch.input;
        let stride = if stride == 0 { window / 2 } else { stride };
        let lat = model::classify_strip(&m.0, &strip, window, stride)?;
        write_handle(out, BdLattice(lat))
    })
}

/// # Safety
/// `model` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn bd_model_free(model: *mut BdModel) {
    free_handle(model)
}

// ---- decoding -------------------------------------------------------------------

/// Repair and rules on, minimum blank run 3, edge runs skipped.
#[no_mangle]
pub extern "C" fn bd_decode_options_default() -> BdDecodeOptions {
    let d = DecodeOptions::default();
    BdDecodeOptions {
        repair_enabled: d.repair_enabled,
        rules_enabled: d.rules_enabled,
        min_run: d.repair.min_run,
        repair_edges: d.repair.repair_edges,
    }
}

/// Greedy CTC decoding with optional blank-run repair and rule correction.
/// `rules` may be NULL (no correction); `options` may be NULL (defaults).
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bd_decode(
    lattice: *const BdLattice,
    rules: *const BdRules,
    options: *const BdDecodeOptions,
    out: *mut *mut BdResult,
) -> BdStatus {
    guard(|| {
        let l = ref_arg(lattice, "lattice")?;
        let rules = rules.as_ref().map(|r| &r.0);
        let opts = options.as_ref().copied().unwrap_or_else(|| bd_decode_options_default());
        let inner = ctc::decode(&l.0, rules, &opts.into())?;
        let text = CString::new(inner.text.clone()).map_err(|e| Fail::Arg(e.to_string()))?;
        write_handle(out, BdResult { inner, text })
    })
}

/// Decoded text, borrowed from the result.
///
/// # Safety
/// `result` must be a live handle or NULL (returns NULL).
#[no_mangle]
pub unsafe extern "C" fn bd_result_text(result: *const BdResult) -> *const c_char {
    result.as_ref().map_or(ptr::null(), |r| r.text.as_ptr())
}

/// Number of decoded characters.
///
/// # Safety
/// `result` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn bd_result_len(result: *const BdResult) -> usize {
    result.as_ref().map_or(0, |r| r.inner.chars.len())
}

/// Character `index` as a Unicode scalar, the lattice timestep it came from
/// and how it was produced. Any output pointer may be NULL.
///
/// # Safety
/// `result` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bd_result_char(
    result: *const BdResult,
    index: usize,
    symbol: *mut u32,
    timestep: *mut usize,
    provenance: *mut BdProvenance,
) -> BdStatus {
    guard(|| {
        let r = ref_arg(result, "result")?;
        let c = r.inner.chars.get(index).ok_or(Fail::Core(Error::Range {
            index,
            len: r.inner.chars.len(),
        }))?;
        if let Some(s) = symbol.as_mut() {
            *s = c.symbol as u32;
        }
        if let Some(t) = timestep.as_mut() {
            *t = c.timestep;
        }
        if let Some(p) = provenance.as_mut() {
            *p = c.provenance.into();
        }
        Ok(())
    })
}

/// Full result as one JSON object. Release with `bd_string_free`.
///
/// # Safety
/// `result` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bd_result_json(result: *const BdResult, out: *mut *mut c_char) -> BdStatus {
    guard(|| {
        let r = ref_arg(result, "result")?;
        let json = serde_json::to_string(&r.inner).map_err(|e| Fail::Core(Error::Internal(e.to_string())))?;
        let c = CString::new(json).map_err(|e| Fail::Arg(e.to_string()))?;
        write_out(out, c.into_raw(), "out")
    })
}

/// # Safety
/// `result` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn bd_result_free(result: *mut BdResult) {
    free_handle(result)
}
