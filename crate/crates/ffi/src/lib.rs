//! C ABI over the solver library.
//!
//! Problems come in as the same JSON accepted by the `rbsde` CLI; solver
//! state lives behind opaque handles that must be released with the matching
//! `*_free` function. Every fallible call returns an `int` status
//! (`RBSDE_OK`, `RBSDE_ERR_INPUT`, `RBSDE_ERR_NUMERICAL`, `RBSDE_ERR_NULL`);
//! on failure [`rbsde_last_error_message`] returns a thread-local,
//! NUL-terminated description valid until the next failing call on the same
//! thread.
//!
//! The generated header lives at `include/rbsde.h`; it is rebuilt by the
//! build script on every compile.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, c_uint, CStr, CString};

use rbsde::lattice::LatticeError;
use rbsde::schemes::SolveError;
use rbsde::{config, solve_backward, solve_root, validate, validate_scheme};
use rbsde::{Problem, SchemeKind, SolutionGrid};

/// Call succeeded.
pub const RBSDE_OK: c_int = 0;
/// Invalid input: malformed JSON, failed validation, out-of-range argument.
pub const RBSDE_ERR_INPUT: c_int = 1;
/// Numerical failure while solving.
pub const RBSDE_ERR_NUMERICAL: c_int = 2;
/// A required pointer argument was NULL (or not valid UTF-8).
pub const RBSDE_ERR_NULL: c_int = 3;

/// Backward kernel selector.
#[repr(C)]
#[derive(Clone, Copy)]
pub enum RbsdeScheme {
    RbsdeSchemeImplicitPenalization = 0,
    RbsdeSchemeImplicitExplicitPenalization = 1,
    RbsdeSchemeImplicitReflected = 2,
    RbsdeSchemeExplicitReflected = 3,
}

/// Which per-node quantity to read from a solution.
#[repr(C)]
#[derive(Clone, Copy)]
pub enum RbsdeField {
    /// Solution value; defined on layers `0..=n`.
    RbsdeFieldY = 0,
    /// Integrand; defined on layers `0..n`.
    RbsdeFieldZ = 1,
    /// Upward reflection increment; defined on layers `0..n`.
    RbsdeFieldLowerForce = 2,
    /// Downward reflection increment; defined on layers `0..n`.
    RbsdeFieldUpperForce = 3,
}

/// Opaque problem handle.
pub struct RbsdeProblem {
    problem: Problem,
}

/// Opaque solution handle.
pub struct RbsdeSolution {
    grid: SolutionGrid,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn fail(code: c_int, message: String) -> c_int {
    set_last_error(message);
    code
}

fn solve_error_code(error: &SolveError) -> c_int {
    match error {
        SolveError::InvalidInput(_) | SolveError::BarrierCrossing { .. } => RBSDE_ERR_INPUT,
        SolveError::Lattice(LatticeError::PathDependentBarrier)
        | SolveError::Lattice(LatticeError::PathFunctionalTerminal) => RBSDE_ERR_INPUT,
        SolveError::Lattice(LatticeError::Eval { .. }) | SolveError::Step { .. } => {
            RBSDE_ERR_NUMERICAL
        }
    }
}

fn scheme_kind(scheme: RbsdeScheme, penalty: c_double) -> SchemeKind {
    match scheme {
        RbsdeScheme::RbsdeSchemeImplicitPenalization => {
            SchemeKind::ImplicitPenalization { penalty }
        }
        RbsdeScheme::RbsdeSchemeImplicitExplicitPenalization => {
            SchemeKind::ImplicitExplicitPenalization { penalty }
        }
        RbsdeScheme::RbsdeSchemeImplicitReflected => SchemeKind::ImplicitReflected,
        RbsdeScheme::RbsdeSchemeExplicitReflected => SchemeKind::ExplicitReflected,
    }
}

/// Most recent error message on this thread, or NULL if none was recorded.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rbsde_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |s| s.as_ptr())
    })
}

/// Parse a JSON problem configuration (the CLI schema, `"version": 1`).
///
/// On success writes a handle to `out`; release it with
/// [`rbsde_problem_free`].
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rbsde_problem_parse(
    json: *const c_char,
    out: *mut *mut RbsdeProblem,
) -> c_int {
    if json.is_null() || out.is_null() {
        return fail(RBSDE_ERR_NULL, "null argument".to_string());
    }
    let text = match CStr::from_ptr(json).to_str() {
        Ok(t) => t,
        Err(_) => return fail(RBSDE_ERR_NULL, "config is not valid UTF-8".to_string()),
    };
    let config = match config::RunConfig::from_json(text) {
        Ok(c) => c,
        Err(e) => return fail(RBSDE_ERR_INPUT, e.to_string()),
    };
    let problem = match config.to_problem() {
        Ok(p) => p,
        Err(e) => return fail(RBSDE_ERR_INPUT, e.to_string()),
    };
    *out = Box::into_raw(Box::new(RbsdeProblem { problem }));
    RBSDE_OK
}

/// Release a problem handle. NULL is ignored.
///
/// # Safety
/// `problem` must have come from [`rbsde_problem_parse`] and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rbsde_problem_free(problem: *mut RbsdeProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Check a problem/discretization/scheme combination without solving.
///
/// Returns `RBSDE_OK` when there are no validation errors; warnings are not
/// reported here.
///
/// # Safety
/// `problem` must be a live handle from [`rbsde_problem_parse`].
#[no_mangle]
pub unsafe extern "C" fn rbsde_validate(
    problem: *const RbsdeProblem,
    steps: c_uint,
    scheme: RbsdeScheme,
    penalty: c_double,
) -> c_int {
    if problem.is_null() {
        return fail(RBSDE_ERR_NULL, "null problem handle".to_string());
    }
    let problem = &(*problem).problem;
    let mut report = validate(problem, steps as usize);
    report.merge(validate_scheme(&scheme_kind(scheme, penalty)));
    if report.is_ok() {
        RBSDE_OK
    } else {
        let text = report
            .errors()
            .map(|e| e.message.clone())
            .collect::<Vec<_>>()
            .join("; ");
        fail(RBSDE_ERR_INPUT, text)
    }
}

/// Solve with the two-layer sweep and write the root value `y0` to `out`.
///
/// `penalty` is ignored by the reflected schemes.
///
/// # Safety
/// `problem` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rbsde_solve_root(
    problem: *const RbsdeProblem,
    steps: c_uint,
    scheme: RbsdeScheme,
    penalty: c_double,
    out: *mut c_double,
) -> c_int {
    if problem.is_null() || out.is_null() {
        return fail(RBSDE_ERR_NULL, "null argument".to_string());
    }
    match solve_root(
        &(*problem).problem,
        steps as usize,
        scheme_kind(scheme, penalty),
    ) {
        Ok(root) => {
            *out = root;
            RBSDE_OK
        }
        Err(e) => fail(solve_error_code(&e), e.to_string()),
    }
}

/// Solve keeping the whole grid; writes a handle to `out`.
///
/// Release the handle with [`rbsde_solution_free`].
///
/// # Safety
/// `problem` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rbsde_solve(
    problem: *const RbsdeProblem,
    steps: c_uint,
    scheme: RbsdeScheme,
    penalty: c_double,
    out: *mut *mut RbsdeSolution,
) -> c_int {
    if problem.is_null() || out.is_null() {
        return fail(RBSDE_ERR_NULL, "null argument".to_string());
    }
    match solve_backward(
        &(*problem).problem,
        steps as usize,
        scheme_kind(scheme, penalty),
    ) {
        Ok(grid) => {
            *out = Box::into_raw(Box::new(RbsdeSolution { grid }));
            RBSDE_OK
        }
        Err(e) => fail(solve_error_code(&e), e.to_string()),
    }
}

/// Release a solution handle. NULL is ignored.
///
/// # Safety
/// `solution` must have come from [`rbsde_solve`] and must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn rbsde_solution_free(solution: *mut RbsdeSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Number of time steps of a solved grid.
///
/// # Safety
/// `solution` must be a live handle from [`rbsde_solve`].
#[no_mangle]
pub unsafe extern "C" fn rbsde_solution_steps(solution: *const RbsdeSolution) -> c_uint {
    if solution.is_null() {
        return 0;
    }
    (*solution).grid.steps() as c_uint
}

/// Root value `y0` of a solved grid.
///
/// # Safety
/// `solution` must be a live handle from [`rbsde_solve`].
#[no_mangle]
pub unsafe extern "C" fn rbsde_solution_root(solution: *const RbsdeSolution) -> c_double {
    if solution.is_null() {
        return f64::NAN;
    }
    (*solution).grid.root_value()
}

/// Read one per-node quantity at layer `layer`, up-move count `up_moves`.
///
/// `y` is defined for `layer <= n`, the other fields for `layer < n`;
/// `up_moves <= layer` always.
///
/// # Safety
/// `solution` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rbsde_solution_value(
    solution: *const RbsdeSolution,
    layer: c_uint,
    up_moves: c_uint,
    field: RbsdeField,
    out: *mut c_double,
) -> c_int {
    if solution.is_null() || out.is_null() {
        return fail(RBSDE_ERR_NULL, "null argument".to_string());
    }
    let grid = &(*solution).grid;
    let n = grid.steps();
    let (layer, up_moves) = (layer as usize, up_moves as usize);
    let last = match field {
        RbsdeField::RbsdeFieldY => n,
        _ => n - 1,
    };
    if layer > last || up_moves > layer {
        return fail(
            RBSDE_ERR_INPUT,
            format!("node (j={layer}, k={up_moves}) out of range (last layer {last})"),
        );
    }
    let node = rbsde::NodeIndex::new(layer, up_moves);
    *out = match field {
        RbsdeField::RbsdeFieldY => grid.y().value(node),
        RbsdeField::RbsdeFieldZ => grid.z().value(node),
        RbsdeField::RbsdeFieldLowerForce => grid.a().value(node),
        RbsdeField::RbsdeFieldUpperForce => grid.k().value(node),
    };
    RBSDE_OK
}
