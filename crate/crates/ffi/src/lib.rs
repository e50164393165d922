//! C ABI over the `wkam` toolkit.
//!
//! Systems and solutions are opaque heap handles released with their `_free`
//! functions. Every entry point returns a [`WkamStatus`]; on failure the
//! message is kept per thread and read back with [`wkam_last_error`].
//! Panics are caught at the boundary and reported as [`WkamStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use wkam::action::Scheme;
use wkam::characteristics::{hamiltonian_flow, FlowSettings};
use wkam::semiconcave::{EstimatorParams, SuperdiffEstimator};
use wkam::weakkam::{lift_v, solve_alpha_u, ScalarField, SolveReport, SolverSettings};
use wkam::{Covector, Error, MechanicalSystem, TorusGrid};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WkamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidSystem = 3,
    InvalidArgument = 4,
    NoConvergence = 5,
    Precondition = 6,
    /// The caller's buffer is too small; the needed length is still reported.
    BufferTooSmall = 7,
    Numerical = 8,
    Panic = 9,
}

/// A mechanical system `H = ½⟨A(x)p, p⟩ + V(x)` on the torus.
pub struct WkamSystem {
    inner: MechanicalSystem,
}

/// Weak KAM solution `u_c` with its `α(c)` and the system it was solved for.
pub struct WkamSolution {
    system: MechanicalSystem,
    field: ScalarField,
    report: SolveReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

fn status_of(err: &Error) -> WkamStatus {
    match err {
        Error::InvalidSystem(_) | Error::Json(_) => WkamStatus::InvalidSystem,
        Error::InvalidTimeStep(_) | Error::InvalidArgument(_) | Error::GridMismatch(_) | Error::Config(_) => WkamStatus::InvalidArgument,
        Error::NoConvergence { .. } | Error::AlphaMismatch { .. } | Error::BarrierNotConverged { .. } => WkamStatus::NoConvergence,
        Error::Precondition(_) | Error::EmptyAubrySet | Error::SupercriticalAubry | Error::NoSmoothNeighbors { .. } => {
            WkamStatus::Precondition
        }
        Error::IntegratorAccuracy { .. } | Error::CalibrationDefect { .. } | Error::Io(_) => WkamStatus::Numerical,
    }
}

/// Runs `f`, records failures and converts panics.
fn guard(f: impl FnOnce() -> Result<(), (WkamStatus, String)>) -> WkamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            WkamStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside wkam");
            WkamStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (WkamStatus, String) {
    (status_of(&e), format!("[{}] {e}", e.module()))
}

fn null(name: &str) -> (WkamStatus, String) {
    (WkamStatus::NullPointer, format!("{name} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, name: &str) -> Result<&'a T, (WkamStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_slot<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (WkamStatus, String)> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Reads `dim` doubles from `p`.
unsafe fn read_vec(p: *const f64, dim: usize, name: &str) -> Result<[f64; 2], (WkamStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = std::slice::from_raw_parts(p, dim);
    Ok([s[0], if dim == 2 { s[1] } else { 0.0 }])
}

/// Copies `data` into `buf` when it fits and always stores the needed length.
unsafe fn fill<T: Copy>(data: &[T], buf: *mut T, cap: usize, len_out: *mut usize) -> Result<(), (WkamStatus, String)> {
    *out_slot(len_out, "len_out")? = data.len();
    if data.len() > cap {
        return Err((WkamStatus::BufferTooSmall, format!("buffer holds {cap}, need {}", data.len())));
    }
    if !data.is_empty() {
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    }
    Ok(())
}

/// Copies the message of the last failed call on this thread into `buf` as a
/// NUL-terminated string, truncated to `cap` bytes, and returns the full
/// message length without the terminator.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn wkam_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Parses a system from its JSON description.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wkam_system_from_json(json: *const c_char, out: *mut *mut WkamSystem) -> WkamStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        *slot = ptr::null_mut();
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|e| (WkamStatus::InvalidUtf8, format!("system JSON is not UTF-8: {e}")))?;
        let inner = MechanicalSystem::from_json_str(text).map_err(lib_err)?;
        *slot = Box::into_raw(Box::new(WkamSystem { inner }));
        Ok(())
    })
}

/// Releases a system. Null is accepted.
///
/// # Safety
/// `sys` must come from [`wkam_system_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wkam_system_free(sys: *mut WkamSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Dimension of the torus, 1 or 2; 0 for a null handle.
///
/// # Safety
/// `sys` must be null or a live system handle.
#[no_mangle]
pub unsafe extern "C" fn wkam_system_dim(sys: *const WkamSystem) -> usize {
    sys.as_ref().map_or(0, |s| s.inner.dim())
}

/// `H(x, p)`; `x` and `p` hold `dim` entries each.
///
/// # Safety
/// Pointers must be valid for `dim` reads, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn wkam_hamiltonian(sys: *const WkamSystem, x: *const f64, p: *const f64, out: *mut f64) -> WkamStatus {
    guard(|| {
        let sys = &borrow(sys, "sys")?.inner;
        let x = read_vec(x, sys.dim(), "x")?;
        let p = read_vec(p, sys.dim(), "p")?;
        *out_slot(out, "out")? = sys.hamiltonian(x, Covector(p));
        Ok(())
    })
}

/// Solves for `u_c` and `α(c)` on an `n`-point-per-axis grid. `c` holds `dim`
/// entries; `dt ≤ 0` selects the default time step.
///
/// # Safety
/// `c` must be valid for `dim` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn wkam_solve(
    sys: *const WkamSystem,
    c: *const f64,
    n: usize,
    dt: f64,
    tol_fp: f64,
    out: *mut *mut WkamSolution,
) -> WkamStatus {
    guard(|| {
        let slot = out_slot(out, "out")?;
        *slot = ptr::null_mut();
        let system = borrow(sys, "sys")?.inner.clone();
        let c = Covector(read_vec(c, system.dim(), "c")?);
        if !(tol_fp > 0.0) {
            return Err((WkamStatus::InvalidArgument, format!("tol_fp must be positive, got {tol_fp}")));
        }
        let grid = TorusGrid::new(system.dim(), n).map_err(lib_err)?;
        let scheme = Scheme::for_system(&system, c, &grid, (dt > 0.0).then_some(dt), None).map_err(lib_err)?;
        let settings = SolverSettings { tol_fp, ..SolverSettings::default() };
        let (field, report) = solve_alpha_u(&system, c, grid, &scheme, &settings).map_err(lib_err)?;
        *slot = Box::into_raw(Box::new(WkamSolution { system, field, report }));
        Ok(())
    })
}

/// Releases a solution. Null is accepted.
///
/// # Safety
/// `sol` must come from [`wkam_solve`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wkam_solution_free(sol: *mut WkamSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// `α(c)`; NaN for a null handle.
///
/// # Safety
/// `sol` must be null or a live solution handle.
#[no_mangle]
pub unsafe extern "C" fn wkam_solution_alpha(sol: *const WkamSolution) -> f64 {
    sol.as_ref().map_or(f64::NAN, |s| s.report.alpha)
}

/// Number of power iterations the solve took; 0 for a null handle.
///
/// # Safety
/// `sol` must be null or a live solution handle.
#[no_mangle]
pub unsafe extern "C" fn wkam_solution_iterations(sol: *const WkamSolution) -> usize {
    sol.as_ref().map_or(0, |s| s.report.iterations)
}

/// Node values of `u_c` in row-major order (first axis slowest).
///
/// # Safety
/// `buf` must be valid for `cap` writes and `len_out` for one write.
#[no_mangle]
pub unsafe extern "C" fn wkam_solution_values(sol: *const WkamSolution, buf: *mut f64, cap: usize, len_out: *mut usize) -> WkamStatus {
    guard(|| {
        let sol = borrow(sol, "sol")?;
        fill(&sol.field.values, buf, cap, len_out)
    })
}

/// Indices of the estimated singular nodes of `v = c·x + u_c`, with default
/// estimator parameters.
///
/// # Safety
/// `buf` must be valid for `cap` writes and `len_out` for one write.
#[no_mangle]
pub unsafe extern "C" fn wkam_solution_singular_nodes(
    sol: *const WkamSolution,
    buf: *mut usize,
    cap: usize,
    len_out: *mut usize,
) -> WkamStatus {
    guard(|| {
        let sol = borrow(sol, "sol")?;
        let est = estimator(sol);
        fill(&est.singular_set().nodes, buf, cap, len_out)
    })
}

fn estimator(sol: &WkamSolution) -> SuperdiffEstimator {
    let params = EstimatorParams::for_system(&sol.system, sol.report.alpha, &sol.field.grid);
    SuperdiffEstimator::new(&lift_v(&sol.field, sol.field.c), params)
}

/// Vertices of the estimated superdifferential of `v` at `x`, as `dim`
/// doubles per vertex. `len_out` receives the number of doubles.
///
/// # Safety
/// `x` must be valid for `dim` reads, `buf` for `cap` writes and `len_out`
/// for one write.
#[no_mangle]
pub unsafe extern "C" fn wkam_solution_superdifferential(
    sol: *const WkamSolution,
    x: *const f64,
    buf: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> WkamStatus {
    guard(|| {
        let sol = borrow(sol, "sol")?;
        let dim = sol.system.dim();
        let x = read_vec(x, dim, "x")?;
        let poly = estimator(sol).superdifferential(x).map_err(lib_err)?;
        let flat: Vec<f64> = poly.vertices().iter().flat_map(|p| p.0[..dim].to_vec()).collect();
        fill(&flat, buf, cap, len_out)
    })
}

/// Integrates the Hamiltonian flow from `(x0, p0)` to `t_end` (negative runs
/// backward) with step `dt`, energy projection on. Writes the final state to
/// `x_out`, `p_out` (`dim` entries each) and the energy drift to `drift_out`.
///
/// # Safety
/// Vector pointers must be valid for `dim` reads or writes, `drift_out` for
/// one write.
#[no_mangle]
pub unsafe extern "C" fn wkam_flow(
    sys: *const WkamSystem,
    x0: *const f64,
    p0: *const f64,
    t_end: f64,
    dt: f64,
    x_out: *mut f64,
    p_out: *mut f64,
    drift_out: *mut f64,
) -> WkamStatus {
    guard(|| {
        let sys = &borrow(sys, "sys")?.inner;
        let dim = sys.dim();
        let x = read_vec(x0, dim, "x0")?;
        let p = read_vec(p0, dim, "p0")?;
        if x_out.is_null() || p_out.is_null() {
            return Err(null("x_out/p_out"));
        }
        let drift_slot = out_slot(drift_out, "drift_out")?;
        let settings = FlowSettings { dt, ..FlowSettings::default() };
        let traj = hamiltonian_flow(sys, x, Covector(p), t_end, &settings).map_err(lib_err)?;
        let (xe, pe) = traj.last();
        ptr::copy_nonoverlapping(xe.as_ptr(), x_out, dim);
        ptr::copy_nonoverlapping(pe.0.as_ptr(), p_out, dim);
        *drift_slot = traj.energy_drift;
        Ok(())
    })
}
