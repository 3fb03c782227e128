//! C ABI over `qromlab`. Objects are opaque handles created and freed by this
//! library; every call returns a [`QromStatus`] and leaves a message for
//! [`qrom_last_error`] on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use qromlab::algebra::GroupSpec;
use qromlab::attack::{full_attack, AttackOptions};
use qromlab::circuit::circuit_layout;
use qromlab::cli::{run_experiment, ExperimentConfig};
use qromlab::oracle::OracleSpec;
use qromlab::protocol::{run_program, Key, Op, Protocol};
use qromlab::qstate::QuantumState;
use qromlab::{zoo, Error};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QromStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Unsupported = 4,
    Runtime = 5,
    Io = 6,
    Panic = 7,
}

/// Protocol handle.
pub struct QromProtocol(Protocol);

/// State on registers `x` and `y` with a purified oracle.
pub struct QromState(QuantumState);

/// Keys are 0, 1, or -1 for abort. Diagnostics are NaN when the learner aborted.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QromAttackOutcome {
    pub k_e: i32,
    pub k_a: i32,
    pub k_b: i32,
    pub l_size: usize,
    pub aborted: bool,
    pub conjecture_relevant: bool,
    pub eq_find: f64,
    pub eq_simulatedm: f64,
    pub eq_agrees: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> QromStatus {
    match e {
        Error::Config(_) | Error::Validation(_) => QromStatus::InvalidConfig,
        Error::Domain(_) | Error::DimensionMismatch(_) | Error::UnknownRegister(_) | Error::Layout(_) => {
            QromStatus::InvalidArgument
        }
        Error::Unsupported(_) => QromStatus::Unsupported,
        Error::Io(_) => QromStatus::Io,
        _ => QromStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (QromStatus, String)>) -> QromStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QromStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            QromStatus::Panic
        }
    }
}

fn lift<T>(r: qromlab::Result<T>) -> Result<T, (QromStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (QromStatus, String) {
    (QromStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (QromStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller passes a nul-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (QromStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn group_arg(factors: *const usize, len: usize) -> Result<GroupSpec, (QromStatus, String)> {
    if factors.is_null() {
        return Err(null("factors"));
    }
    // SAFETY: caller passes `len` readable factors.
    let f = unsafe { std::slice::from_raw_parts(factors, len) };
    lift(GroupSpec::new(f.to_vec()))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), (QromStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| (QromStatus::Runtime, "string has interior nul".into()))?;
    // SAFETY: `out` is non-null and writable.
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn key_code(k: Key) -> i32 {
    k.bit().map_or(-1, i32::from)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qrom_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn qrom_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn qrom_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: allocated by `CString::into_raw` in this library.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Builtin protocol `name` with domain size `n` over the group with the given
/// cyclic factors.
///
/// # Safety
/// `name` is a nul-terminated string, `factors` points to `n_factors` values
/// and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qrom_protocol_builtin(
    name: *const c_char,
    n: usize,
    factors: *const usize,
    n_factors: usize,
    out: *mut *mut QromProtocol,
) -> QromStatus {
    guard(|| {
        let name = unsafe { str_arg(name, "name") }?;
        let g = unsafe { group_arg(factors, n_factors) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = lift(zoo::builtin(name, n, &g))?;
        unsafe { *out = Box::into_raw(Box::new(QromProtocol(p))) };
        Ok(())
    })
}

/// Parses and validates a protocol JSON document.
///
/// # Safety
/// `json` is a nul-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qrom_protocol_from_json(json: *const c_char, out: *mut *mut QromProtocol) -> QromStatus {
    guard(|| {
        let text = unsafe { str_arg(json, "json") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = lift(Protocol::from_json(text))?;
        lift(p.ensure_valid())?;
        unsafe { *out = Box::into_raw(Box::new(QromProtocol(p))) };
        Ok(())
    })
}

/// Protocol JSON; free with [`qrom_string_free`].
///
/// # Safety
/// `p` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qrom_protocol_to_json(p: *const QromProtocol, out: *mut *mut c_char) -> QromStatus {
    guard(|| {
        let p = unsafe { p.as_ref() }.ok_or_else(|| null("protocol"))?;
        out_string(p.0.to_json(), out)
    })
}

/// Query budget `d` and whether the protocol is inside the attack's hypothesis.
///
/// # Safety
/// `p` is a live handle; the out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn qrom_protocol_info(
    p: *const QromProtocol,
    d: *mut usize,
    alice_no_final_query: *mut bool,
) -> QromStatus {
    guard(|| {
        let p = unsafe { p.as_ref() }.ok_or_else(|| null("protocol"))?;
        if d.is_null() || alice_no_final_query.is_null() {
            return Err(null("out"));
        }
        unsafe {
            *d = p.0.d;
            *alice_no_final_query = p.0.alice_no_final_query;
        }
        Ok(())
    })
}

/// # Safety
/// `p` is null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn qrom_protocol_free(p: *mut QromProtocol) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// One attack trial against a uniformly random oracle. The oracle and all
/// randomness come from stream `trial` of a generator seeded with `seed`.
///
/// # Safety
/// `p` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qrom_attack_run(
    p: *const QromProtocol,
    eps: f64,
    lambda: f64,
    seed: u64,
    trial: u64,
    force_simulated_oracle: bool,
    out: *mut QromAttackOutcome,
) -> QromStatus {
    guard(|| {
        let p = &unsafe { p.as_ref() }.ok_or_else(|| null("protocol"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial);
        let q = p.oracle.range.order() as u64;
        let h: Vec<usize> = (0..p.oracle.domain_size).map(|_| (rng.next_u64() % q) as usize).collect();
        let opts = AttackOptions { force_simulated_oracle, cap: None };
        let o = lift(full_attack(p, eps, lambda, &h, &opts, &mut rng))?.outcome;
        let nan = |x: Option<f64>| x.unwrap_or(f64::NAN);
        unsafe {
            *out = QromAttackOutcome {
                k_e: key_code(o.k_e),
                k_a: key_code(o.k_a),
                k_b: key_code(o.k_b),
                l_size: o.l_size,
                aborted: o.aborted,
                conjecture_relevant: o.conjecture_relevant,
                eq_find: nan(o.eq_find),
                eq_simulatedm: nan(o.eq_simulatedm),
                eq_agrees: nan(o.eq_agrees),
            }
        };
        Ok(())
    })
}

/// Validates and runs an experiment config, writing its reports; the summary
/// JSON is returned in `out`. Invalid configs return `InvalidConfig`.
///
/// # Safety
/// `config_json` is a nul-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qrom_experiment_run(config_json: *const c_char, out: *mut *mut c_char) -> QromStatus {
    guard(|| {
        let text = unsafe { str_arg(config_json, "config_json") }?;
        let x = lift(ExperimentConfig::from_json(text).and_then(|c| c.validate()))?;
        let s = lift(run_experiment(&x))?;
        let json = serde_json::to_string(&s).map_err(|e| (QromStatus::Runtime, e.to_string()))?;
        out_string(json, out)
    })
}

/// `|0⟩_x |0⟩_y` with a purified oracle `h: [n] → G`.
///
/// # Safety
/// `factors` points to `n_factors` values and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qrom_state_new(
    n: usize,
    factors: *const usize,
    n_factors: usize,
    out: *mut *mut QromState,
) -> QromStatus {
    guard(|| {
        let g = unsafe { group_arg(factors, n_factors) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = lift(OracleSpec::new(n, g))?;
        let s = QuantumState::new(lift(circuit_layout(&spec))?);
        unsafe { *out = Box::into_raw(Box::new(QromState(s))) };
        Ok(())
    })
}

unsafe fn with_state(s: *mut QromState, f: impl FnOnce(&mut QuantumState) -> qromlab::Result<()>) -> QromStatus {
    guard(|| {
        let s = unsafe { s.as_mut() }.ok_or_else(|| null("state"))?;
        lift(f(&mut s.0))
    })
}

unsafe fn register_arg(r: *const c_char) -> Result<String, (QromStatus, String)> {
    let name = unsafe { str_arg(r, "register") }?;
    match name {
        "x" | "y" => Ok(name.to_string()),
        _ => Err((QromStatus::InvalidArgument, format!("register `{name}` is neither x nor y"))),
    }
}

/// Fourier transform (or its inverse) on register `x` or `y`.
///
/// # Safety
/// `s` is a live handle and `register` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qrom_state_fourier(s: *mut QromState, register: *const c_char, inverse: bool) -> QromStatus {
    let target = match unsafe { register_arg(register) } {
        Ok(t) => t,
        Err((status, msg)) => {
            set_error(msg);
            return status;
        }
    };
    unsafe { with_state(s, |st| run_program(st, &[Op::Fourier { target, inverse }])) }
}

/// Adds `value` to register `x` or `y`.
///
/// # Safety
/// `s` is a live handle and `register` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qrom_state_add(s: *mut QromState, register: *const c_char, value: usize) -> QromStatus {
    let target = match unsafe { register_arg(register) } {
        Ok(t) => t,
        Err((status, msg)) => {
            set_error(msg);
            return status;
        }
    };
    unsafe { with_state(s, |st| run_program(st, &[Op::add_constant(&target, value)])) }
}

/// `|x⟩|y⟩ ↦ |x⟩|y ± h(x)⟩` against the purified oracle.
///
/// # Safety
/// `s` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn qrom_state_query(s: *mut QromState, inverse: bool) -> QromStatus {
    unsafe { with_state(s, |st| st.oracle_query("x", "y", inverse)) }
}

/// Probability that cell `x` is not `|0̂⟩`.
///
/// # Safety
/// `s` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qrom_state_weight(s: *const QromState, x: usize, out: *mut f64) -> QromStatus {
    guard(|| {
        let s = unsafe { s.as_ref() }.ok_or_else(|| null("state"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let w = lift(s.0.weight(x))?;
        unsafe { *out = w };
        Ok(())
    })
}

/// Largest number of non-zero Fourier characters in any component.
///
/// # Safety
/// `s` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qrom_state_sparsity(s: *const QromState, out: *mut usize) -> QromStatus {
    guard(|| {
        let s = unsafe { s.as_ref() }.ok_or_else(|| null("state"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = s.0.fourier_support_size() };
        Ok(())
    })
}

/// # Safety
/// `s` is null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn qrom_state_free(s: *mut QromState) {
    if !s.is_null() {
        drop(unsafe { Box::from_raw(s) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(status_of(&Error::Config(vec![])), QromStatus::InvalidConfig);
        assert_eq!(status_of(&Error::Domain(String::new())), QromStatus::InvalidArgument);
        assert_eq!(status_of(&Error::Unsupported(String::new())), QromStatus::Unsupported);
        assert_eq!(status_of(&Error::ZeroProbability(String::new())), QromStatus::Runtime);
    }

    #[test]
    fn keys_and_panics() {
        assert_eq!([Key::Zero, Key::One, Key::Abort].map(key_code), [0, 1, -1]);
        assert_eq!(guard(|| panic!("boom")), QromStatus::Panic);
        let msg = unsafe { CStr::from_ptr(qrom_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "internal panic");
    }
}
