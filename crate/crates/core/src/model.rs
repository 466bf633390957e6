//! Problem descriptions shared by every solver.
//!
//! A [`Problem`] bundles the horizon `T`, the generator `g(t, y, z)` with its
//! Lipschitz bound, the terminal payoff and the two reflecting barriers. All
//! coefficient functions can be native closures or compiled expressions from
//! [`crate::expr`]; either way they are immutable after construction and safe
//! to share across concurrent solver runs.

use std::fmt;
use std::sync::Arc;

use crate::expr::{self, EvalError, Expr, ParseError, Program, Scope, VarSet};
use crate::lattice::{NodeIndex, WalkGrid};

// ─── Coefficient functions ─────────────────────────────────────────────────

type Fn1 = dyn Fn(f64) -> f64 + Send + Sync;
type Fn2 = dyn Fn(f64, f64) -> f64 + Send + Sync;
type Fn3 = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;
type FnPath = dyn Fn(&[f64]) -> f64 + Send + Sync;

enum FnImpl<F: ?Sized> {
    Native(Arc<F>),
    Compiled(Arc<Program>),
}

impl<F: ?Sized> Clone for FnImpl<F> {
    fn clone(&self) -> Self {
        match self {
            FnImpl::Native(f) => FnImpl::Native(Arc::clone(f)),
            FnImpl::Compiled(p) => FnImpl::Compiled(Arc::clone(p)),
        }
    }
}

/// Real function of one spatial coordinate, used for terminal payoffs.
#[derive(Clone)]
pub struct PointFn(FnImpl<Fn1>);

impl PointFn {
    pub fn from_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        PointFn(FnImpl::Native(Arc::new(f)))
    }

    /// Compile an expression in the variable `x`.
    pub fn from_expr(expr: &Expr) -> Result<Self, ParseError> {
        check_vars(expr, VarSet::POINT)?;
        Ok(PointFn(FnImpl::Compiled(Arc::new(expr.compile()))))
    }

    pub fn parse(source: &str) -> Result<Self, ParseError> {
        Self::from_expr(&expr::parse(source, VarSet::POINT)?)
    }

    pub fn eval(&self, x: f64) -> Result<f64, EvalError> {
        match &self.0 {
            FnImpl::Native(f) => Ok(f(x)),
            FnImpl::Compiled(p) => p.eval(&Scope {
                x,
                ..Scope::default()
            }),
        }
    }
}

impl fmt::Debug for PointFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            FnImpl::Native(_) => write!(f, "PointFn(<native>)"),
            FnImpl::Compiled(_) => write!(f, "PointFn(<compiled>)"),
        }
    }
}

/// Real function of `(t, x)`, used for barrier surfaces and Itô coefficients.
#[derive(Clone)]
pub struct SurfaceFn(FnImpl<Fn2>);

impl SurfaceFn {
    pub fn from_fn(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        SurfaceFn(FnImpl::Native(Arc::new(f)))
    }

    /// Compile an expression in the variables `t`, `x`.
    pub fn from_expr(expr: &Expr) -> Result<Self, ParseError> {
        check_vars(expr, VarSet::SURFACE)?;
        Ok(SurfaceFn(FnImpl::Compiled(Arc::new(expr.compile()))))
    }

    pub fn parse(source: &str) -> Result<Self, ParseError> {
        Self::from_expr(&expr::parse(source, VarSet::SURFACE)?)
    }

    pub fn eval(&self, t: f64, x: f64) -> Result<f64, EvalError> {
        match &self.0 {
            FnImpl::Native(f) => Ok(f(t, x)),
            FnImpl::Compiled(p) => p.eval(&Scope {
                t,
                x,
                ..Scope::default()
            }),
        }
    }
}

impl fmt::Debug for SurfaceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            FnImpl::Native(_) => write!(f, "SurfaceFn(<native>)"),
            FnImpl::Compiled(_) => write!(f, "SurfaceFn(<compiled>)"),
        }
    }
}

/// Real function of `(t, y, z)`: the generator shape.
#[derive(Clone)]
pub struct GeneratorFn(FnImpl<Fn3>);

impl GeneratorFn {
    pub fn from_fn(f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        GeneratorFn(FnImpl::Native(Arc::new(f)))
    }

    /// Compile an expression in the variables `t`, `y`, `z`.
    pub fn from_expr(expr: &Expr) -> Result<Self, ParseError> {
        check_vars(expr, VarSet::GENERATOR)?;
        Ok(GeneratorFn(FnImpl::Compiled(Arc::new(expr.compile()))))
    }

    pub fn parse(source: &str) -> Result<Self, ParseError> {
        Self::from_expr(&expr::parse(source, VarSet::GENERATOR)?)
    }

    pub fn eval(&self, t: f64, y: f64, z: f64) -> Result<f64, EvalError> {
        match &self.0 {
            FnImpl::Native(f) => Ok(f(t, y, z)),
            FnImpl::Compiled(p) => p.eval(&Scope { t, y, z, x: 0.0 }),
        }
    }
}

impl fmt::Debug for GeneratorFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            FnImpl::Native(_) => write!(f, "GeneratorFn(<native>)"),
            FnImpl::Compiled(_) => write!(f, "GeneratorFn(<compiled>)"),
        }
    }
}

/// Real functional of a whole discrete Brownian path `[b_0, ..., b_n]`.
///
/// Only the full path-tree solver can honor these; the recombining lattice
/// rejects them.
#[derive(Clone)]
pub struct PathFn(Arc<FnPath>);

impl PathFn {
    pub fn from_fn(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        PathFn(Arc::new(f))
    }

    pub fn eval(&self, path: &[f64]) -> f64 {
        (self.0)(path)
    }
}

impl fmt::Debug for PathFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PathFn(<native>)")
    }
}

fn check_vars(expr: &Expr, allowed: VarSet) -> Result<(), ParseError> {
    let used = expr.variables();
    if used.is_subset_of(allowed) {
        return Ok(());
    }
    for var in expr::Var::ALL {
        if used.contains(var) && !allowed.contains(var) {
            return Err(ParseError::DisallowedVariable {
                name: var.name(),
                allowed,
                offset: expr.span().0,
            });
        }
    }
    unreachable!()
}

// ─── Problem description ───────────────────────────────────────────────────

/// The generator `g(t, y, z)` together with its declared Lipschitz bound μ.
///
/// μ is user-declared rather than inferred: estimating a Lipschitz constant
/// of a black-box function is unreliable, so [`validate`] only probes it and
/// warns on apparent violations.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    func: GeneratorFn,
    mu: f64,
}

impl GeneratorSpec {
    pub fn new(func: GeneratorFn, mu: f64) -> Self {
        GeneratorSpec { func, mu }
    }

    pub fn parse(source: &str, mu: f64) -> Result<Self, ParseError> {
        Ok(GeneratorSpec::new(GeneratorFn::parse(source)?, mu))
    }

    /// Identically-zero generator (with μ = 0).
    pub fn zero() -> Self {
        GeneratorSpec::new(GeneratorFn::from_fn(|_, _, _| 0.0), 0.0)
    }

    pub fn eval(&self, t: f64, y: f64, z: f64) -> Result<f64, EvalError> {
        self.func.eval(t, y, z)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// One reflecting barrier.
#[derive(Debug, Clone)]
pub enum BarrierSpec {
    /// `b(t) = f(t, B_t)` for a surface function f.
    Functional(SurfaceFn),
    /// Itô form with constant coefficients: `b(t) = initial + drift·t + diffusion·B_t`.
    ItoConstant {
        initial: f64,
        drift: f64,
        diffusion: f64,
    },
    /// Itô form with state-dependent coefficients. Path-dependent on the
    /// lattice, hence legal only in the full path-tree solver.
    ItoGeneral {
        initial: f64,
        drift: SurfaceFn,
        diffusion: SurfaceFn,
    },
    /// No barrier on this side; comparisons treat it as ∓∞.
    Absent,
}

impl BarrierSpec {
    pub fn is_absent(&self) -> bool {
        matches!(self, BarrierSpec::Absent)
    }

    /// Whether the barrier value at a lattice node is a function of `(t, B_t)`
    /// alone.
    pub fn is_node_functional(&self) -> bool {
        !matches!(self, BarrierSpec::ItoGeneral { .. })
    }
}

/// Terminal payoff at the horizon.
#[derive(Debug, Clone)]
pub enum TerminalSpec {
    /// `ξ = φ(B_T)`.
    Markovian(PointFn),
    /// `ξ = Γ(B)` for a functional of the whole path; full-tree solver only.
    PathFunctional(PathFn),
}

/// A complete problem description.
#[derive(Debug, Clone)]
pub struct Problem {
    pub horizon: f64,
    pub generator: GeneratorSpec,
    pub terminal: TerminalSpec,
    pub lower: BarrierSpec,
    pub upper: BarrierSpec,
    /// Replace terminal values falling outside `[L_T, U_T]` by the nearest
    /// barrier value. Off by default: the backward recursion starts from the
    /// raw terminal condition and [`validate`] only warns.
    pub clamp_terminal: bool,
}

impl Problem {
    /// A problem with no barriers (classical backward equation).
    pub fn new(horizon: f64, generator: GeneratorSpec, terminal: TerminalSpec) -> Self {
        Problem {
            horizon,
            generator,
            terminal,
            lower: BarrierSpec::Absent,
            upper: BarrierSpec::Absent,
            clamp_terminal: false,
        }
    }

    pub fn with_lower(mut self, lower: BarrierSpec) -> Self {
        self.lower = lower;
        self
    }

    pub fn with_upper(mut self, upper: BarrierSpec) -> Self {
        self.upper = upper;
        self
    }

    pub fn with_clamped_terminal(mut self, clamp: bool) -> Self {
        self.clamp_terminal = clamp;
        self
    }

    pub fn is_markovian(&self) -> bool {
        matches!(self.terminal, TerminalSpec::Markovian(_))
            && self.lower.is_node_functional()
            && self.upper.is_node_functional()
    }
}

// ─── Scheme selection ───────────────────────────────────────────────────────

/// Which backward kernel to apply at each node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchemeKind {
    /// Solve the penalized step equation with the generator taken at the
    /// unknown value.
    ImplicitPenalization { penalty: f64 },
    /// Penalized step with the generator frozen at the conditional
    /// expectation; closed form.
    ImplicitExplicitPenalization { penalty: f64 },
    /// Reflected step with the generator taken at the unknown value.
    ImplicitReflected,
    /// Reflected step with the generator frozen at the conditional
    /// expectation; closed form.
    ExplicitReflected,
}

impl SchemeKind {
    pub fn penalty(&self) -> Option<f64> {
        match self {
            SchemeKind::ImplicitPenalization { penalty }
            | SchemeKind::ImplicitExplicitPenalization { penalty } => Some(*penalty),
            _ => None,
        }
    }

    pub fn is_penalization(&self) -> bool {
        self.penalty().is_some()
    }

    /// Stable command-line name.
    pub fn cli_name(&self) -> &'static str {
        match self {
            SchemeKind::ImplicitPenalization { .. } => "implicit-pen",
            SchemeKind::ImplicitExplicitPenalization { .. } => "impexp-pen",
            SchemeKind::ImplicitReflected => "implicit-reflected",
            SchemeKind::ExplicitReflected => "explicit-reflected",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

// ─── Validation ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone)]
pub struct ValidationIssue {
    pub severity: Severity,
    pub message: String,
}

/// Outcome of [`validate`]: a list of errors and warnings, never a panic.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors().next().is_none()
    }

    pub fn errors(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Warning)
    }

    fn error(&mut self, message: String) {
        self.issues.push(ValidationIssue {
            severity: Severity::Error,
            message,
        });
    }

    fn warning(&mut self, message: String) {
        self.issues.push(ValidationIssue {
            severity: Severity::Warning,
            message,
        });
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.issues.extend(other.issues);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            let tag = match issue.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            writeln!(f, "{tag}: {}", issue.message)?;
        }
        Ok(())
    }
}

/// Check a problem/discretization pair before solving on the recombining
/// lattice.
///
/// Errors: non-positive horizon, `n = 0`, μ out of range, `μ·δ ≥ 1` (the
/// implicit inversions stop being contractions), path-dependent barriers or
/// terminal (full-tree solver only), and crossed barriers `L > U` at a
/// reachable node. Warnings: `δ(1 + 2μ + 2μ²) ≥ 1` (the standing estimates
/// lose their hypothesis; solving is still permitted), a terminal value
/// outside `[L_T, U_T]`, and apparent violations of the declared Lipschitz
/// bound on random probes.
///
/// Pure and deterministic: identical inputs yield identical reports.
pub fn validate(problem: &Problem, n: usize) -> ValidationReport {
    let mut report = ValidationReport::default();

    if !problem.horizon.is_finite() || problem.horizon <= 0.0 {
        report.error(format!(
            "horizon must be positive and finite, got {}",
            problem.horizon
        ));
    }
    if n == 0 {
        report.error("number of time steps must be positive".to_string());
    }
    let mu = problem.generator.mu();
    if !mu.is_finite() || mu < 0.0 {
        report.error(format!(
            "Lipschitz bound mu must be nonnegative and finite, got {mu}"
        ));
    }
    if !report.is_ok() {
        return report;
    }

    let delta = problem.horizon / n as f64;
    if mu * delta >= 1.0 {
        report.error(format!(
            "mu*delta = {} >= 1: the implicit step inversion is not a contraction; increase n",
            mu * delta
        ));
    }
    if delta * (1.0 + 2.0 * mu + 2.0 * mu * mu) >= 1.0 {
        report.warning(format!(
            "delta*(1 + 2*mu + 2*mu^2) = {} >= 1: a-priori estimates do not apply at this resolution",
            delta * (1.0 + 2.0 * mu + 2.0 * mu * mu)
        ));
    }

    if !problem.lower.is_node_functional() {
        report.error(
            "lower barrier has state-dependent Ito coefficients; only the full path-tree solver supports it"
                .to_string(),
        );
    }
    if !problem.upper.is_node_functional() {
        report.error(
            "upper barrier has state-dependent Ito coefficients; only the full path-tree solver supports it"
                .to_string(),
        );
    }
    if matches!(problem.terminal, TerminalSpec::PathFunctional(_)) {
        report.error(
            "terminal value is a path functional; only the full path-tree solver supports it"
                .to_string(),
        );
    }
    if !report.is_ok() {
        return report;
    }

    sweep_barriers(problem, n, &mut report);
    probe_lipschitz(problem, &mut report);
    report
}

/// Scheme-level checks: the penalization parameter must be positive.
pub fn validate_scheme(scheme: &SchemeKind) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Some(p) = scheme.penalty() {
        if !p.is_finite() || p <= 0.0 {
            report.error(format!(
                "penalization parameter must be positive and finite, got {p}"
            ));
        }
    }
    report
}

/// Node sweep: barrier ordering on every reachable node and terminal values
/// against the barriers at the horizon.
fn sweep_barriers(problem: &Problem, n: usize, report: &mut ValidationReport) {
    use crate::lattice::{BarrierSide, NodeBarrier};

    let grid = WalkGrid::new(problem.horizon, n);
    let lower = match NodeBarrier::prepare(&problem.lower, BarrierSide::Lower) {
        Ok(b) => b,
        Err(_) => return, // already reported above
    };
    let upper = match NodeBarrier::prepare(&problem.upper, BarrierSide::Upper) {
        Ok(b) => b,
        Err(_) => return,
    };

    if !(problem.lower.is_absent() || problem.upper.is_absent()) {
        let mut crossings = 0usize;
        let mut first: Option<(NodeIndex, f64, f64)> = None;
        for layer in 0..=n {
            let t = grid.time(layer);
            for up_moves in 0..=layer {
                let node = NodeIndex::new(layer, up_moves);
                let b = grid.b_value(node);
                let (lo, hi) = match (lower.value(t, b), upper.value(t, b)) {
                    (Ok(lo), Ok(hi)) => (lo, hi),
                    (Err(e), _) | (_, Err(e)) => {
                        report.error(format!("barrier evaluation failed at node {node}: {e}"));
                        return;
                    }
                };
                if lo > hi {
                    crossings += 1;
                    if first.is_none() {
                        first = Some((node, lo, hi));
                    }
                }
            }
        }
        if let Some((node, lo, hi)) = first {
            report.error(format!(
                "barriers cross at node {node}: lower {lo} > upper {hi} ({crossings} node(s) affected)"
            ));
            return;
        }
    }

    if let TerminalSpec::Markovian(phi) = &problem.terminal {
        let t = grid.time(n);
        let mut outside = 0usize;
        let mut first: Option<(NodeIndex, f64, f64, f64)> = None;
        for up_moves in 0..=n {
            let node = NodeIndex::new(n, up_moves);
            let b = grid.b_value(node);
            let xi = match phi.eval(b) {
                Ok(v) => v,
                Err(e) => {
                    report.error(format!("terminal evaluation failed at node {node}: {e}"));
                    return;
                }
            };
            let (lo, hi) = match (lower.value(t, b), upper.value(t, b)) {
                (Ok(lo), Ok(hi)) => (lo, hi),
                (Err(e), _) | (_, Err(e)) => {
                    report.error(format!("barrier evaluation failed at node {node}: {e}"));
                    return;
                }
            };
            if xi < lo || xi > hi {
                outside += 1;
                if first.is_none() {
                    first = Some((node, xi, lo, hi));
                }
            }
        }
        if let Some((node, xi, lo, hi)) = first {
            let action = if problem.clamp_terminal {
                "it will be clamped to the barriers"
            } else {
                "the backward recursion starts outside the barriers there"
            };
            report.warning(format!(
                "terminal value {xi} lies outside [{lo}, {hi}] at node {node} ({outside} node(s) affected); {action}"
            ));
        }
    }
}

/// Deterministic probe of the declared Lipschitz bound.
fn probe_lipschitz(problem: &Problem, report: &mut ValidationReport) {
    let mu = problem.generator.mu();
    let times = [0.0, 0.5 * problem.horizon, problem.horizon];
    let points: [f64; 5] = [-2.0, -0.5, 0.0, 1.0, 3.0];
    let mut worst: f64 = 0.0;
    for &t in &times {
        for &y1 in &points {
            for &z1 in &points {
                for &y2 in &points {
                    for &z2 in &points {
                        let denom = (y1 - y2).abs() + (z1 - z2).abs();
                        if denom == 0.0 {
                            continue;
                        }
                        let (g1, g2) = match (
                            problem.generator.eval(t, y1, z1),
                            problem.generator.eval(t, y2, z2),
                        ) {
                            (Ok(a), Ok(b)) => (a, b),
                            _ => {
                                report.warning(
                                    "generator evaluation failed on a Lipschitz probe point"
                                        .to_string(),
                                );
                                return;
                            }
                        };
                        worst = worst.max((g1 - g2).abs() / denom);
                    }
                }
            }
        }
    }
    if worst > mu * (1.0 + 1e-9) + 1e-12 {
        report.warning(format!(
            "generator varied with ratio {worst} on probe points, above the declared Lipschitz bound {mu}"
        ));
    }
}
