//! C ABI over the `opfree` toolkit.
//!
//! Objects cross the boundary as opaque handles released with the matching `*_free`
//! function. Every fallible call returns an [`OpfreeStatus`]; on failure the message is
//! available from [`opfree_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use opfree::compression::eta_power_cumulant;
use opfree::error::Error;
use opfree::io::{parse_grid, parse_problem, run, Command, Output, ProblemSpec, RunArgs};
use opfree::laws::{BLaw, CauchyTransform};
use opfree::linalg::{c, eye, AmpElem, Mat};
use opfree::subordination::SubordinatedLaw;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpfreeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Schema = 3,
    Domain = 4,
    Convergence = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A parsed problem spec.
pub struct OpfreeProblem {
    spec: ProblemSpec,
}

/// Output of a command: CSV text or a JSON report.
pub struct OpfreeOutput {
    text: CString,
    passed: bool,
}

/// Optional overrides for [`opfree_run_with`]; zero / null fields mean "unset".
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OpfreeRunArgs {
    pub degree: usize,
    pub depth: usize,
    /// JSON matrix or array of matrices; may be null.
    pub z_json: *const c_char,
    pub grid_a: f64,
    pub grid_b: f64,
    /// Number of grid points; 0 leaves the grid unset.
    pub grid_points: usize,
    /// Imaginary offset for densities; values <= 0 leave it unset.
    pub eps: f64,
    pub seed: u64,
    pub has_seed: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> OpfreeStatus {
    match e.exit_code() {
        2 => OpfreeStatus::Schema,
        3 => OpfreeStatus::Domain,
        _ => OpfreeStatus::Convergence,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (OpfreeStatus, String)>) -> OpfreeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OpfreeStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            OpfreeStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (OpfreeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null() -> (OpfreeStatus, String) {
    (OpfreeStatus::NullPointer, "null pointer argument".into())
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, (OpfreeStatus, String)> {
    if s.is_null() {
        return Err(null());
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (OpfreeStatus::InvalidUtf8, "string is not valid UTF-8".into()))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn opfree_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn opfree_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a JSON problem spec into `*out`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn opfree_problem_parse(json: *const c_char, out: *mut *mut OpfreeProblem) -> OpfreeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let spec = parse_problem(read_str(json)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(OpfreeProblem { spec }));
        Ok(())
    })
}

/// Releases a problem; null is ignored.
///
/// # Safety
/// `p` must come from [`opfree_problem_parse`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn opfree_problem_free(p: *mut OpfreeProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Matrix size `d` of `B = M_d`, or 0 for null.
///
/// # Safety
/// `p` must be null or a live problem handle.
#[no_mangle]
pub unsafe extern "C" fn opfree_problem_dim(p: *const OpfreeProblem) -> usize {
    p.as_ref().map_or(0, |p| p.spec.d)
}

fn command_of(name: &str) -> Result<Command, (OpfreeStatus, String)> {
    name.parse().map_err(lib_err)
}

unsafe fn run_into(
    p: *const OpfreeProblem,
    command: *const c_char,
    args: RunArgs,
    out: *mut *mut OpfreeOutput,
) -> Result<(), (OpfreeStatus, String)> {
    let p = p.as_ref().ok_or_else(null)?;
    if out.is_null() {
        return Err(null());
    }
    let cmd = command_of(read_str(command)?)?;
    let result = run(cmd, &p.spec, &args).map_err(lib_err)?;
    let passed = !matches!(result, Output::Report { pass: false, .. });
    let text = CString::new(result.text()).map_err(|_| (OpfreeStatus::InvalidUtf8, "output contains NUL".into()))?;
    *out = Box::into_raw(Box::new(OpfreeOutput { text, passed }));
    Ok(())
}

/// Runs a command (`moments`, `cumulants`, `convolve-power`, `nfold-sum`, `subordinate`,
/// `density`, `verify`, `verify-section5`) with default arguments.
///
/// # Safety
/// `p` must be a live problem, `command` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn opfree_run(
    p: *const OpfreeProblem,
    command: *const c_char,
    out: *mut *mut OpfreeOutput,
) -> OpfreeStatus {
    guard(|| run_into(p, command, RunArgs::default(), out))
}

/// As [`opfree_run`], with overrides.
///
/// # Safety
/// As [`opfree_run`]; `args` must be valid and `args.z_json` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn opfree_run_with(
    p: *const OpfreeProblem,
    command: *const c_char,
    args: *const OpfreeRunArgs,
    out: *mut *mut OpfreeOutput,
) -> OpfreeStatus {
    guard(|| {
        let a = args.as_ref().ok_or_else(null)?;
        let z = if a.z_json.is_null() { None } else { Some(read_str(a.z_json)?.to_string()) };
        let grid = if a.grid_points == 0 {
            None
        } else {
            Some(parse_grid(&format!("{},{},{}", a.grid_a, a.grid_b, a.grid_points)).map_err(lib_err)?)
        };
        let ra = RunArgs {
            degree: (a.degree > 0).then_some(a.degree),
            depth: (a.depth > 0).then_some(a.depth),
            z,
            grid,
            eps: (a.eps > 0.0).then_some(a.eps),
            seed: a.has_seed.then_some(a.seed),
        };
        run_into(p, command, ra, out)
    })
}

/// Text of an output (CSV or JSON), or null. Valid while the output lives.
///
/// # Safety
/// `o` must be null or a live output handle.
#[no_mangle]
pub unsafe extern "C" fn opfree_output_text(o: *const OpfreeOutput) -> *const c_char {
    o.as_ref().map_or(ptr::null(), |o| o.text.as_ptr())
}

/// False only for a verification report that did not pass.
///
/// # Safety
/// `o` must be null or a live output handle.
#[no_mangle]
pub unsafe extern "C" fn opfree_output_passed(o: *const OpfreeOutput) -> bool {
    o.as_ref().is_some_and(|o| o.passed)
}

/// Releases an output; null is ignored.
///
/// # Safety
/// `o` must come from a run call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn opfree_output_free(o: *mut OpfreeOutput) {
    if !o.is_null() {
        drop(Box::from_raw(o));
    }
}

unsafe fn write_moments(law: &BLaw, degree: usize, re: *mut f64, im: *mut f64, len: usize) -> Result<(), (OpfreeStatus, String)> {
    if re.is_null() || im.is_null() {
        return Err(null());
    }
    let d = law.d();
    let need = degree * d * d;
    if len < need {
        return Err((OpfreeStatus::BufferTooSmall, format!("need {need} entries, got {len}")));
    }
    let re = std::slice::from_raw_parts_mut(re, need);
    let im = std::slice::from_raw_parts_mut(im, need);
    for k in 1..=degree {
        let m = law.moment(&vec![eye(d); k + 1]).map_err(lib_err)?;
        for p in 0..d {
            for q in 0..d {
                let i = (k - 1) * d * d + p * d + q;
                re[i] = m[(p, q)].re;
                im[i] = m[(p, q)].im;
            }
        }
    }
    Ok(())
}

/// Writes `E[X^k]`, `k = 1..=degree`, of `mu` as row-major `d x d` blocks into `re`/`im`
/// (each of length at least `degree * d * d`).
///
/// # Safety
/// `p` must be a live problem; `re` and `im` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn opfree_moments(
    p: *const OpfreeProblem,
    degree: usize,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> OpfreeStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(null)?;
        write_moments(&p.spec.mu, degree, re, im, len)
    })
}

/// As [`opfree_moments`], for `mu^{boxplus eta}` through the cumulant route.
///
/// # Safety
/// As [`opfree_moments`].
#[no_mangle]
pub unsafe extern "C" fn opfree_convolve_power_moments(
    p: *const OpfreeProblem,
    degree: usize,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> OpfreeStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(null)?;
        let nu = eta_power_cumulant(&p.spec.mu, &p.spec.eta, degree, &p.spec.options.tol).map_err(lib_err)?;
        write_moments(&nu, degree, re, im, len)
    })
}

/// Cauchy transform of `mu^{boxplus eta}` at a `d x d` point `z` (row-major `re`/`im`,
/// `d * d` entries each), computed through subordination; writes `G(z)` and the
/// fixed-point residual.
///
/// # Safety
/// `p` must be a live problem; all pointers valid for `d * d` doubles (`residual`: one).
#[no_mangle]
pub unsafe extern "C" fn opfree_convolve_power_cauchy(
    p: *const OpfreeProblem,
    z_re: *const f64,
    z_im: *const f64,
    g_re: *mut f64,
    g_im: *mut f64,
    residual: *mut f64,
) -> OpfreeStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(null)?;
        if [z_re, z_im].iter().any(|x| x.is_null()) || g_re.is_null() || g_im.is_null() || residual.is_null() {
            return Err(null());
        }
        let d = p.spec.d;
        let zr = std::slice::from_raw_parts(z_re, d * d);
        let zi = std::slice::from_raw_parts(z_im, d * d);
        let z = AmpElem::from_b(&Mat::from_fn(d, d, |i, j| c(zr[i * d + j], zi[i * d + j])));
        let law = SubordinatedLaw::new(&p.spec.mu, &p.spec.eta).map_err(lib_err)?;
        let g = law.cauchy(&z, &p.spec.options.tol).map_err(lib_err)?;
        let gr = std::slice::from_raw_parts_mut(g_re, d * d);
        let gi = std::slice::from_raw_parts_mut(g_im, d * d);
        for i in 0..d {
            for j in 0..d {
                gr[i * d + j] = g.value.mat()[(i, j)].re;
                gi[i * d + j] = g.value.mat()[(i, j)].im;
            }
        }
        *residual = g.tail;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_follows_cli_exit_codes() {
        assert_eq!(status_of(&Error::schema("x", "y")), OpfreeStatus::Schema);
        assert_eq!(status_of(&Error::Dimension("x".into())), OpfreeStatus::Domain);
    }

    #[test]
    fn panics_become_status_codes() {
        assert_eq!(guard(|| panic!("boom")), OpfreeStatus::Panic);
        let msg = unsafe { CStr::from_ptr(opfree_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "internal panic");
        assert_eq!(guard(|| Ok(())), OpfreeStatus::Ok);
        assert!(opfree_last_error_message().is_null());
    }

    #[test]
    fn interior_nul_in_message_is_replaced() {
        set_last_error("a\0b");
        let msg = unsafe { CStr::from_ptr(opfree_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "a b");
    }
}
