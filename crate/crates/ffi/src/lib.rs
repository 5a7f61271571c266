//! C ABI for the closed-form calculators.
//!
//! Objects are opaque heap handles created by `*_new` functions and released
//! with the matching `*_free`. Every fallible call returns an [`SdStatus`];
//! on failure a message is available from [`sd_last_error_message`] on the
//! same thread until the next failing call. Matrices are row-major and all
//! indices are 0-based.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DMatrix;
use selfdistill::distill::{pll_output, sample_output, Sample};
use selfdistill::gram::{build_gram, GramModel, SuperclassMap};
use selfdistill::noise::{
    make_corruption, minimal_rounds, pll_accuracy_condition, predicted_population_accuracy, sd_accuracy_condition,
    theory_constants, AccuracyMode, CorruptionKind, CorruptionMatrix, MinimalRounds, TheoryConstants,
};
use selfdistill::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdStatus {
    Ok = 0,
    /// Inputs violate a precondition.
    Invalid = 1,
    /// A numerical procedure failed.
    Numerical = 2,
    NullPointer = 3,
    /// The caller's buffer is too small; the required length is reported.
    BufferTooSmall = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdCase {
    CaseI = 1,
    CaseIi = 2,
    CaseIii = 3,
    CaseIv = 4,
    CaseV = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdCorruptionKind {
    Symmetric = 0,
    Asymmetric = 1,
    Superclass = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdAccuracyMode {
    Sd = 0,
    Pll = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SdTheoryScalars {
    pub p: f64,
    pub q: f64,
    /// `q/p`.
    pub ratio: f64,
    pub lambda: f64,
    pub k: usize,
    pub n: usize,
    /// Number of superclass ratios available from `sd_theory_r`.
    pub num_superclasses: usize,
}

pub struct SdGramModel {
    inner: GramModel,
}

pub struct SdCorruption {
    inner: CorruptionMatrix,
}

pub struct SdTheory {
    inner: TheoryConstants,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SdStatus, msg: impl Into<String>) -> SdStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> SdStatus {
    let status = if e.is_numerical() { SdStatus::Numerical } else { SdStatus::Invalid };
    fail(status, e.to_string())
}

/// Runs `f`, converting panics into `SdStatus::Internal`.
fn guard(f: impl FnOnce() -> SdStatus) -> SdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SdStatus::Internal, "internal panic"),
    }
}

macro_rules! deref {
    ($p:expr) => {
        match unsafe { $p.as_ref() } {
            Some(v) => v,
            None => return fail(SdStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

macro_rules! out {
    ($p:expr) => {
        match unsafe { $p.as_mut() } {
            Some(v) => v,
            None => return fail(SdStatus::NullPointer, concat!(stringify!($p), " is null")),
        }
    };
}

macro_rules! try_sd {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(err) => return from_error(err),
        }
    };
}

unsafe fn slice<'a, T>(p: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(p, len))
    }
}

fn write_out(values: &[f64], buf: *mut f64, len: usize) -> SdStatus {
    if len < values.len() {
        return fail(
            SdStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        );
    }
    if buf.is_null() {
        return fail(SdStatus::NullPointer, "output buffer is null");
    }
    unsafe { ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len()) };
    SdStatus::Ok
}

/// Message of the last failing call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a Gram model. `omega` (length `k`) is read only for Case II;
/// `superclass_sizes` (length `num_superclasses`) only for Case IV/V, where
/// `k` must equal their sum.
///
/// # Safety
/// Pointers must be null or valid for the stated lengths; `out` must be
/// writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sd_gram_model_new(
    case_: SdCase,
    k: usize,
    n: usize,
    c: f64,
    d: f64,
    e: f64,
    omega: *const f64,
    superclass_sizes: *const usize,
    num_superclasses: usize,
    out: *mut *mut SdGramModel,
) -> SdStatus {
    guard(|| {
        let out = out!(out);
        *out = ptr::null_mut();
        let model = match case_ {
            SdCase::CaseI => GramModel::case_i(k, n, c),
            SdCase::CaseIi => {
                let Some(w) = (unsafe { slice(omega, k) }) else {
                    return fail(SdStatus::NullPointer, "omega is null");
                };
                GramModel::case_ii(k, n, w.to_vec())
            }
            SdCase::CaseIii => GramModel::case_iii(k, n, c, d),
            SdCase::CaseIv | SdCase::CaseV => {
                let Some(sizes) = (unsafe { slice(superclass_sizes, num_superclasses) }) else {
                    return fail(SdStatus::NullPointer, "superclass_sizes is null");
                };
                let map = try_sd!(SuperclassMap::from_sizes(sizes));
                if map.num_classes() != k {
                    return fail(
                        SdStatus::Invalid,
                        format!("superclass sizes cover {} classes but k = {k}", map.num_classes()),
                    );
                }
                if case_ == SdCase::CaseIv {
                    GramModel::case_iv(n, c, d, map)
                } else {
                    GramModel::case_v(n, c, d, e, map)
                }
            }
        };
        try_sd!(model.validate());
        *out = Box::into_raw(Box::new(SdGramModel { inner: model }));
        SdStatus::Ok
    })
}

/// # Safety
/// `model` must be null or a handle from `sd_gram_model_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sd_gram_model_free(model: *mut SdGramModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the `Kn × Kn` Gram matrix (row-major) into `buf`.
///
/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sd_gram_model_build(model: *const SdGramModel, buf: *mut f64, len: usize) -> SdStatus {
    guard(|| {
        let model = deref!(model);
        let g = try_sd!(build_gram(&model.inner));
        // Symmetric, so column-major storage reads as row-major.
        write_out(g.as_slice(), buf, len)
    })
}

/// Builds a standard corruption matrix. `model` supplies the superclass map
/// for `SD_CORRUPTION_KIND_SUPERCLASS` and may otherwise be null.
///
/// # Safety
/// `model` must be null or a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_corruption_new(
    kind: SdCorruptionKind,
    eta: f64,
    k: usize,
    model: *const SdGramModel,
    out: *mut *mut SdCorruption,
) -> SdStatus {
    guard(|| {
        let out = out!(out);
        *out = ptr::null_mut();
        let kind = match kind {
            SdCorruptionKind::Symmetric => CorruptionKind::Symmetric,
            SdCorruptionKind::Asymmetric => CorruptionKind::Asymmetric,
            SdCorruptionKind::Superclass => CorruptionKind::Superclass,
        };
        let map = unsafe { model.as_ref() }.map(|m| m.inner.superclass_map());
        let c = try_sd!(make_corruption(kind, eta, k, map.as_ref(), None));
        *out = Box::into_raw(Box::new(SdCorruption { inner: c }));
        SdStatus::Ok
    })
}

/// Wraps an explicit row-major `k × k` matrix; rows and columns must sum to 1.
///
/// # Safety
/// `entries` must be valid for `k * k` reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_corruption_from_entries(
    entries: *const f64,
    k: usize,
    out: *mut *mut SdCorruption,
) -> SdStatus {
    guard(|| {
        let out = out!(out);
        *out = ptr::null_mut();
        let Some(v) = (unsafe { slice(entries, k * k) }) else {
            return fail(SdStatus::NullPointer, "entries is null");
        };
        let c = try_sd!(CorruptionMatrix::new(DMatrix::from_row_slice(k, k, v)));
        *out = Box::into_raw(Box::new(SdCorruption { inner: c }));
        SdStatus::Ok
    })
}

/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sd_corruption_free(c: *mut SdCorruption) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_theory_new(model: *const SdGramModel, lambda: f64, out: *mut *mut SdTheory) -> SdStatus {
    guard(|| {
        let out = out!(out);
        *out = ptr::null_mut();
        let model = deref!(model);
        let tc = try_sd!(theory_constants(&model.inner, lambda));
        *out = Box::into_raw(Box::new(SdTheory { inner: tc }));
        SdStatus::Ok
    })
}

/// # Safety
/// `theory` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sd_theory_free(theory: *mut SdTheory) {
    if !theory.is_null() {
        drop(Box::from_raw(theory));
    }
}

/// # Safety
/// `theory` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_theory_scalars(theory: *const SdTheory, out: *mut SdTheoryScalars) -> SdStatus {
    guard(|| {
        let tc = &deref!(theory).inner;
        *out!(out) = SdTheoryScalars {
            p: tc.p,
            q: tc.q,
            ratio: tc.ratio(),
            lambda: tc.lambda,
            k: tc.k,
            n: tc.n,
            num_superclasses: tc.r.len(),
        };
        SdStatus::Ok
    })
}

/// Copies the superclass ratios `r_s` into `buf`.
///
/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sd_theory_r(theory: *const SdTheory, buf: *mut f64, len: usize) -> SdStatus {
    guard(|| write_out(&deref!(theory).inner.r, buf, len))
}

/// Whether the `t`-round model reaches 100% population accuracy.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_sd_condition(
    c: *const SdCorruption,
    theory: *const SdTheory,
    t: u32,
    out: *mut bool,
) -> SdStatus {
    guard(|| {
        let report = try_sd!(sd_accuracy_condition(&deref!(c).inner, &deref!(theory).inner, t));
        *out!(out) = report.achieves_100;
        SdStatus::Ok
    })
}

/// Whether the top-2 student reaches 100% population accuracy.
///
/// # Safety
/// `c` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_pll_condition(c: *const SdCorruption, out: *mut bool) -> SdStatus {
    guard(|| {
        *out!(out) = pll_accuracy_condition(&deref!(c).inner).achieves_100;
        SdStatus::Ok
    })
}

/// Smallest number of rounds reaching 100% accuracy. `*reachable` is false
/// (and `*rounds` 0) when no number of rounds suffices.
///
/// # Safety
/// Handles must be live; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_minimal_rounds(
    c: *const SdCorruption,
    theory: *const SdTheory,
    rounds: *mut u32,
    reachable: *mut bool,
) -> SdStatus {
    guard(|| {
        let m = try_sd!(minimal_rounds(&deref!(c).inner, &deref!(theory).inner));
        let (r, ok) = match m {
            MinimalRounds::Rounds(t) => (t, true),
            MinimalRounds::Unreachable => (0, false),
        };
        *out!(rounds) = r;
        *out!(reachable) = ok;
        SdStatus::Ok
    })
}

/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sd_predicted_accuracy(
    c: *const SdCorruption,
    theory: *const SdTheory,
    t: u32,
    mode: SdAccuracyMode,
    out: *mut f64,
) -> SdStatus {
    guard(|| {
        let mode = match mode {
            SdAccuracyMode::Sd => AccuracyMode::Sd,
            SdAccuracyMode::Pll => AccuracyMode::Pll,
        };
        *out!(out) = try_sd!(predicted_population_accuracy(&deref!(c).inner, &deref!(theory).inner, t, mode));
        SdStatus::Ok
    })
}

/// Round-`t` closed-form output (length K) of a sample with the given true
/// and given labels.
///
/// # Safety
/// Handles must be live; `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sd_closed_form_output(
    c: *const SdCorruption,
    theory: *const SdTheory,
    true_label: usize,
    given_label: usize,
    t: u32,
    buf: *mut f64,
    len: usize,
) -> SdStatus {
    guard(|| {
        let sample = Sample { true_label, given_label };
        let y = try_sd!(sample_output(sample, &deref!(c).inner, &deref!(theory).inner, t));
        write_out(&y, buf, len)
    })
}

/// Output (length K) of the one-round top-2 student.
///
/// # Safety
/// Handles must be live; `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sd_pll_output(
    c: *const SdCorruption,
    theory: *const SdTheory,
    true_label: usize,
    given_label: usize,
    buf: *mut f64,
    len: usize,
) -> SdStatus {
    guard(|| {
        let sample = Sample { true_label, given_label };
        let y = try_sd!(pll_output(sample, &deref!(c).inner, &deref!(theory).inner));
        write_out(&y.output, buf, len)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_out_pointer_is_reported() {
        let s = unsafe { sd_gram_model_new(SdCase::CaseI, 2, 3, 0.5, 0.0, 0.0, ptr::null(), ptr::null(), 0, ptr::null_mut()) };
        assert_eq!(s, SdStatus::NullPointer);
        assert!(!sd_last_error_message().is_null());
    }
}
