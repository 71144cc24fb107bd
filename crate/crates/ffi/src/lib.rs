//! C interface to merge states and orthogonal bases.
//!
//! Every fallible function returns an [`MdmStatus`]. On failure the message
//! is available from [`mdm_last_error`] on the same thread until the next
//! failing call. Handles are opaque and must be released with their `_free`
//! function. Vectors cross the boundary as `(pointer, length)` pairs of
//! doubles; ids and paths are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use mdm_core::merge::{IntegrateOutcome, MergeState};
use mdm_core::orthogonal::{orthogonality_check, OrthogonalBasis, Projection};
use mdm_core::params::{DeltaRecord, LayerLayout, ParameterVector};
use mdm_core::{ErrorClass, MdmError};

/// Status codes; the non-zero values match the `mdm` exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdmStatus {
    Ok = 0,
    /// A null pointer, bad UTF-8 or an out-of-range index.
    InvalidArgument = 1,
    Validation = 2,
    Numerical = 3,
    /// An internal panic was caught at the boundary.
    Panic = 4,
}

/// A merge state: base, orthogonal members, coefficients and ledger.
pub struct MdmState {
    inner: MergeState,
}

/// An orthogonal basis built by sequential admission.
pub struct MdmBasis {
    inner: OrthogonalBasis,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: MdmStatus,
    message: String,
}

impl From<MdmError> for Failure {
    fn from(e: MdmError) -> Self {
        let status = match e.class() {
            ErrorClass::Usage => MdmStatus::InvalidArgument,
            ErrorClass::Validation => MdmStatus::Validation,
            ErrorClass::Numerical => MdmStatus::Numerical,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

fn bad_arg(msg: impl Into<String>) -> Failure {
    Failure {
        status: MdmStatus::InvalidArgument,
        message: msg.into(),
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?")).expect("NUL bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MdmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdmStatus::Ok,
        Ok(Err(fail)) => {
            set_error(fail.message);
            fail.status
        }
        Err(_) => {
            set_error("internal panic".into());
            MdmStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(bad_arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| bad_arg(format!("{what} is not UTF-8")))
}

unsafe fn doubles<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(bad_arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn state_ref<'a>(p: *const MdmState) -> Result<&'a MdmState, Failure> {
    p.as_ref().ok_or_else(|| bad_arg("state handle is null"))
}

unsafe fn state_mut<'a>(p: *mut MdmState) -> Result<&'a mut MdmState, Failure> {
    p.as_mut().ok_or_else(|| bad_arg("state handle is null"))
}

unsafe fn basis_ref<'a>(p: *const MdmBasis) -> Result<&'a MdmBasis, Failure> {
    p.as_ref().ok_or_else(|| bad_arg("basis handle is null"))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(bad_arg(format!("{what} is null")));
    }
    *out = value;
    Ok(())
}

unsafe fn copy_into(src: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if len != src.len() {
        return Err(bad_arg(format!("buffer holds {len} values, need {}", src.len())));
    }
    if len > 0 {
        if out.is_null() {
            return Err(bad_arg("output buffer is null"));
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), out, len);
    }
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mdm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mdm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an empty state over a base vector of `len` doubles.
///
/// # Safety
/// `base` must point to `len` readable doubles, `op` must be a NUL-terminated
/// string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_new(
    base: *const f64,
    len: usize,
    op: *const c_char,
    out: *mut *mut MdmState,
) -> MdmStatus {
    guard(|| {
        let values = doubles(base, len, "base")?.to_vec();
        let op = text(op, "operator")?;
        let layout = Arc::new(LayerLayout::single("theta", len));
        let pv = ParameterVector::new(values, layout)?;
        let h = Box::new(MdmState {
            inner: MergeState::empty(pv, op),
        });
        write_out(out, Box::into_raw(h), "out")
    })
}

/// Loads a state directory written by [`mdm_state_save`] or the `mdm` tool.
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_load(dir: *const c_char, recompute: bool, out: *mut *mut MdmState) -> MdmStatus {
    guard(|| {
        let dir = PathBuf::from(text(dir, "dir")?);
        let inner = MergeState::load(&dir, recompute)?;
        write_out(out, Box::into_raw(Box::new(MdmState { inner })), "out")
    })
}

/// # Safety
/// `state` must be a live handle and `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_save(state: *const MdmState, dir: *const c_char) -> MdmStatus {
    guard(|| {
        let s = state_ref(state)?;
        let dir = PathBuf::from(text(dir, "dir")?);
        Ok(s.inner.save(&dir)?)
    })
}

/// Releases a state; null is ignored.
///
/// # Safety
/// `state` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_free(state: *mut MdmState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Parameter count, or 0 for a null handle.
///
/// # Safety
/// `state` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_dim(state: *const MdmState) -> usize {
    state.as_ref().map_or(0, |s| s.inner.merged_values().len())
}

/// Number of current members, or 0 for a null handle.
///
/// # Safety
/// `state` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_member_count(state: *const MdmState) -> usize {
    state.as_ref().map_or(0, |s| s.inner.basis().len())
}

/// Projects a raw delta onto the null space of the members and adds it with
/// coefficient `alpha`. `accepted` is set to false when the residual was
/// degenerate and the delta was logged as rejected.
///
/// # Safety
/// `state` must be a live handle, `id` a NUL-terminated string, `delta` must
/// point to `len` doubles and `accepted` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_integrate(
    state: *mut MdmState,
    id: *const c_char,
    delta: *const f64,
    len: usize,
    alpha: f64,
    accepted: *mut bool,
) -> MdmStatus {
    guard(|| {
        let s = state_mut(state)?;
        let id = text(id, "id")?;
        let values = doubles(delta, len, "delta")?.to_vec();
        if accepted.is_null() {
            return Err(bad_arg("accepted is null"));
        }
        let rec = DeltaRecord::new(id, values, s.inner.base().layout().clone())?;
        let outcome = s.inner.integrate(&rec, alpha)?;
        write_out(accepted, matches!(outcome, IntegrateOutcome::Accepted { .. }), "accepted")
    })
}

/// Removes a member; `purge` also deletes its archived delta.
///
/// # Safety
/// `state` must be a live handle and `id` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_unmerge(state: *mut MdmState, id: *const c_char, purge: bool) -> MdmStatus {
    guard(|| {
        let s = state_mut(state)?;
        Ok(s.inner.unmerge(text(id, "id")?, purge)?)
    })
}

/// # Safety
/// `state` must be a live handle and `id` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_reweight(state: *mut MdmState, id: *const c_char, alpha: f64) -> MdmStatus {
    guard(|| {
        let s = state_mut(state)?;
        Ok(s.inner.reweight(text(id, "id")?, alpha)?)
    })
}

/// Coefficient of member `id`.
///
/// # Safety
/// `state` must be a live handle, `id` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_alpha(state: *const MdmState, id: *const c_char, out: *mut f64) -> MdmStatus {
    guard(|| {
        let s = state_ref(state)?;
        let id = text(id, "id")?;
        let a = *s
            .inner
            .alphas()
            .get(id)
            .ok_or_else(|| MdmError::UnknownId(id.to_string()))?;
        write_out(out, a, "out")
    })
}

/// Copies the merged parameters into `out`, which must hold exactly
/// [`mdm_state_dim`] doubles.
///
/// # Safety
/// `state` must be a live handle and `out` must point to `len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_merged(state: *const MdmState, out: *mut f64, len: usize) -> MdmStatus {
    guard(|| copy_into(state_ref(state)?.inner.merged_values(), out, len))
}

/// Replays the ledger from the base and compares with the current state.
///
/// # Safety
/// `state` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_check_replay(state: *const MdmState, rel_tol: f64) -> MdmStatus {
    guard(|| Ok(state_ref(state)?.inner.check_replay(rel_tol)?))
}

/// Largest absolute cosine between two members.
///
/// # Safety
/// `state` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_state_max_abs_cosine(state: *const MdmState, out: *mut f64) -> MdmStatus {
    guard(|| {
        let c = orthogonality_check(state_ref(state)?.inner.basis()).max_abs_cosine;
        write_out(out, c, "out")
    })
}

/// Creates an empty basis; residuals no longer than `eps_drop` times the
/// input norm are dropped.
///
/// # Safety
/// `out` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn mdm_basis_new(eps_drop: f64, out: *mut *mut MdmBasis) -> MdmStatus {
    guard(|| {
        if !(eps_drop.is_finite() && eps_drop >= 0.0) {
            return Err(bad_arg("eps_drop must be finite and non-negative"));
        }
        let h = Box::new(MdmBasis {
            inner: OrthogonalBasis::new(eps_drop),
        });
        write_out(out, Box::into_raw(h), "out")
    })
}

/// # Safety
/// `basis` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdm_basis_free(basis: *mut MdmBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// Projects a delta onto the null space of the members and admits the
/// residual; `accepted` is false when it was dropped as degenerate.
///
/// # Safety
/// `basis` must be a live handle, `id` a NUL-terminated string, `delta` must
/// point to `len` doubles and `accepted` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_basis_admit(
    basis: *mut MdmBasis,
    id: *const c_char,
    delta: *const f64,
    len: usize,
    accepted: *mut bool,
) -> MdmStatus {
    guard(|| {
        let b = basis.as_mut().ok_or_else(|| bad_arg("basis handle is null"))?;
        let id = text(id, "id")?;
        let rec = DeltaRecord::from_vec(id, doubles(delta, len, "delta")?.to_vec())?;
        if accepted.is_null() {
            return Err(bad_arg("accepted is null"));
        }
        let p = b.inner.admit(&rec)?;
        write_out(accepted, matches!(p, Projection::Accepted { .. }), "accepted")
    })
}

/// Number of members, or 0 for a null handle.
///
/// # Safety
/// `basis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdm_basis_len(basis: *const MdmBasis) -> usize {
    basis.as_ref().map_or(0, |b| b.inner.len())
}

/// Copies member `index` into `out`, which must hold `len` doubles.
///
/// # Safety
/// `basis` must be a live handle and `out` must point to `len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn mdm_basis_member(basis: *const MdmBasis, index: usize, out: *mut f64, len: usize) -> MdmStatus {
    guard(|| {
        let b = basis_ref(basis)?;
        let m = b
            .inner
            .members()
            .get(index)
            .ok_or_else(|| bad_arg(format!("member index {index} out of range")))?;
        copy_into(m.values(), out, len)
    })
}

/// Largest absolute cosine between two members.
///
/// # Safety
/// `basis` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdm_basis_max_abs_cosine(basis: *const MdmBasis, out: *mut f64) -> MdmStatus {
    guard(|| write_out(out, orthogonality_check(&basis_ref(basis)?.inner).max_abs_cosine, "out"))
}
