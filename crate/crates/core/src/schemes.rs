//! The four backward kernels and the layer-by-layer backward sweep.
//!
//! All kernels consume the same per-node data: the conditional expectation
//! `E` of the next layer, the integrand `z` extracted from the children, the
//! barrier values `L <= U` (infinite when absent) and the generator. They
//! differ in how the step equation
//!
//! ```text
//! y = E + g(t, ·, z)·delta + a - k
//! ```
//!
//! is closed:
//!
//! * **explicit reflected**: `g` frozen at `E`; `a`, `k` are exactly the
//!   defect of the candidate `c = E + g(t, E, z)·delta` below `L` / above
//!   `U`, so `y = median(L, c, U)`.
//! * **implicit reflected**: `g` taken at the unknown `y`; the monotone map
//!   `y - g(t, y, z)·delta` is inverted by fixed-point iteration and the
//!   result is projected onto the barrier it crosses.
//! * **implicit penalization**: barrier terms `p·delta·(y-L)⁻` and
//!   `p·delta·(y-U)⁺` enter the inversion; solved region by region, since a
//!   direct iteration on the full map has modulus `(mu+p)·delta`.
//! * **implicit-explicit penalization**: `g` frozen at `E`; the penalized
//!   equation then has the closed-form solution with weight
//!   `p·delta / (1 + p·delta)`.
//!
//! Every kernel is a pure function. The sweep walks layers backward and may
//! visit the nodes of one layer in any order without changing a bit of the
//! output.

use thiserror::Error;

use crate::expr::EvalError;
use crate::lattice::{
    cond_expectation, signed_offset, z_from_children, LatticeError, NodeBarrier, NodeField,
    NodeIndex, WalkGrid,
};
use crate::lattice::{discretize_terminal, BarrierSide};
use crate::model::{GeneratorSpec, Problem, SchemeKind};

/// Relative tolerance of the implicit inversions: the iteration stops when
/// successive iterates differ by at most `PICARD_TOLERANCE_SCALE·max(1, |E|)`.
pub const PICARD_TOLERANCE_SCALE: f64 = 1e-13;

/// Iteration cap for the implicit inversions.
pub const PICARD_MAX_ITERATIONS: usize = 200;

#[inline]
fn picard_tolerance(cond_exp: f64) -> f64 {
    PICARD_TOLERANCE_SCALE * cond_exp.abs().max(1.0)
}

/// Negative part `x⁻ = max(-x, 0)`.
#[inline]
fn neg_part(x: f64) -> f64 {
    (-x).max(0.0)
}

/// Positive part `x⁺ = max(x, 0)`.
#[inline]
fn pos_part(x: f64) -> f64 {
    x.max(0.0)
}

/// Everything a kernel needs at one node.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    /// Grid time `t_j`.
    pub time: f64,
    /// Step size `delta = T/n`.
    pub delta: f64,
    /// Conditional expectation of the next layer at this node.
    pub cond_exp: f64,
    /// Integrand extracted from the children.
    pub z: f64,
    /// Lower barrier value (`-inf` when absent).
    pub lower: f64,
    /// Upper barrier value (`+inf` when absent).
    pub upper: f64,
    pub generator: &'a GeneratorSpec,
}

/// Kernel result at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub y: f64,
    /// Upward reflection increment (acts at the lower barrier), `>= 0`.
    pub a: f64,
    /// Downward reflection increment (acts at the upper barrier), `>= 0`.
    pub k: f64,
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("fixed-point iteration did not converge after {iterations} iterations (last iterate {last}, residual {residual:e})")]
    PicardDiverged {
        iterations: usize,
        last: f64,
        residual: f64,
    },
    #[error("fixed-point map is not a contraction (modulus {modulus})")]
    NotAContraction { modulus: f64 },
    #[error("no penalization region is consistent (best residual {residual:e})")]
    RegionInconsistent { residual: f64 },
    #[error("generator evaluation failed: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("barriers cross at node {node}: lower {lower} > upper {upper}")]
    BarrierCrossing {
        node: NodeIndex,
        lower: f64,
        upper: f64,
    },
    #[error("step failed at node {node}: {source}")]
    Step {
        node: NodeIndex,
        #[source]
        source: StepError,
    },
}

/// Fixed-point iteration `y ← map(y)` for a contraction.
///
/// Returns `y*` with `|map(y*) - y*| <= max(tol, a few ulps of y*)`: the
/// loop stops once successive iterates differ by at most `tol`, or by less
/// than rounding can resolve at the iterate's magnitude. Without the
/// latter, maps whose fixed point is much larger than the requested `tol`
/// scale end up in one-ulp limit cycles.
pub fn picard_solve<F>(
    mut map: F,
    guess: f64,
    contraction: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64, StepError>
where
    F: FnMut(f64) -> Result<f64, EvalError>,
{
    if contraction.is_nan() || contraction >= 1.0 {
        return Err(StepError::NotAContraction {
            modulus: contraction,
        });
    }
    let mut y = guess;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let next = map(y)?;
        residual = (next - y).abs();
        let stagnation = next.abs() * (4.0 * f64::EPSILON);
        y = next;
        if residual <= tol.max(stagnation) {
            return Ok(y);
        }
    }
    Err(StepError::PicardDiverged {
        iterations: max_iter,
        last: y,
        residual,
    })
}

/// Reflected step with the generator frozen at the conditional expectation.
///
/// `c = E + g(t, E, z)·delta`, `a = (c - L)⁻`, `k = (c - U)⁺`,
/// `y = median(L, c, U)`. Total for finite inputs.
pub fn step_explicit_reflected(input: &StepInput) -> Result<StepOutput, StepError> {
    let g = input
        .generator
        .eval(input.time, input.cond_exp, input.z)?;
    let candidate = input.cond_exp + g * input.delta;
    let a = neg_part(candidate - input.lower);
    let k = pos_part(candidate - input.upper);
    let y = candidate.max(input.lower).min(input.upper);
    Ok(StepOutput { y, a, k })
}

/// Penalized step with the generator frozen at the conditional expectation.
///
/// With `c = E + g(t, E, z)·delta` and weight `w = p·delta/(1 + p·delta)`:
/// `a = w·(c - L)⁻`, `k = w·(c - U)⁺`, `y = c + a - k`. The penalization
/// identities `a = p·delta·(y - L)⁻` and `k = p·delta·(y - U)⁺` then hold.
pub fn step_impexp_penalization(input: &StepInput, penalty: f64) -> Result<StepOutput, StepError> {
    let g = input
        .generator
        .eval(input.time, input.cond_exp, input.z)?;
    let candidate = input.cond_exp + g * input.delta;
    let pd = penalty * input.delta;
    let weight = pd / (1.0 + pd);
    let a = weight * neg_part(candidate - input.lower);
    let k = weight * pos_part(candidate - input.upper);
    let y = (candidate + a) - k;
    Ok(StepOutput { y, a, k })
}

/// Reflected step with the generator taken at the unknown value.
///
/// The unconstrained solution `w` of `y = E + g(t, y, z)·delta` decides the
/// branch: crossing a barrier pins `y` there and the increment is read off
/// the step equation with `g` evaluated at the barrier. When the barriers
/// coincide, `y = L = U` and the step imbalance
/// `I = E + g(t, L, z)·delta - L` splits into `a = I⁻`, `k = I⁺`.
pub fn step_implicit_reflected(input: &StepInput) -> Result<StepOutput, StepError> {
    let StepInput {
        time,
        delta,
        cond_exp,
        z,
        lower,
        upper,
        generator,
    } = *input;

    if lower == upper && lower.is_finite() {
        let g_at_barrier = generator.eval(time, lower, z)?;
        let imbalance = cond_exp + g_at_barrier * delta - lower;
        return Ok(StepOutput {
            y: lower,
            a: neg_part(imbalance),
            k: pos_part(imbalance),
        });
    }

    let tol = picard_tolerance(cond_exp);
    let unconstrained = picard_solve(
        |y| Ok(cond_exp + generator.eval(time, y, z)? * delta),
        cond_exp,
        generator.mu() * delta,
        tol,
        PICARD_MAX_ITERATIONS,
    )?;

    if unconstrained < lower {
        let g_low = generator.eval(time, lower, z)?;
        let a = neg_part(cond_exp + g_low * delta - lower);
        Ok(StepOutput { y: lower, a, k: 0.0 })
    } else if unconstrained > upper {
        let g_high = generator.eval(time, upper, z)?;
        let k = pos_part(cond_exp + g_high * delta - upper);
        Ok(StepOutput {
            y: upper,
            a: 0.0,
            k,
        })
    } else {
        Ok(StepOutput {
            y: unconstrained,
            a: 0.0,
            k: 0.0,
        })
    }
}

/// Penalized step with the generator taken at the unknown value: solve
/// `y - g(t, y, z)·delta - p·delta·(y-L)⁻ + p·delta·(y-U)⁺ = E`.
///
/// The map is strictly increasing for `mu·delta < 1`, so each of the three
/// penalty regions (`y < L`, `L <= y <= U`, `y > U`) is solved on its own
/// (the regional fixed-point maps have modulus `mu·delta/(1 + p·delta)` or
/// `mu·delta`) and the region-consistent candidate is kept. A candidate
/// landing exactly on a barrier counts as interior. If rounding leaves no
/// strictly consistent region, the candidate with the smallest equation
/// residual wins, provided that residual is negligible.
pub fn step_implicit_penalization(
    input: &StepInput,
    penalty: f64,
) -> Result<StepOutput, StepError> {
    let StepInput {
        time,
        delta,
        cond_exp,
        z,
        lower,
        upper,
        generator,
    } = *input;
    let pd = penalty * delta;
    let mu_delta = generator.mu() * delta;
    let tol = picard_tolerance(cond_exp);

    let interior = picard_solve(
        |y| Ok(cond_exp + generator.eval(time, y, z)? * delta),
        cond_exp,
        mu_delta,
        tol,
        PICARD_MAX_ITERATIONS,
    )?;
    let mut candidates = vec![(interior, lower <= interior && interior <= upper)];

    if lower.is_finite() {
        // The constrained iterate lives near the barrier, so scale the
        // tolerance to it as well.
        let tol = tol.max(PICARD_TOLERANCE_SCALE * lower.abs());
        let y = picard_solve(
            |y| Ok((cond_exp + generator.eval(time, y, z)? * delta + pd * lower) / (1.0 + pd)),
            lower,
            mu_delta / (1.0 + pd),
            tol,
            PICARD_MAX_ITERATIONS,
        )?;
        candidates.push((y, y < lower));
    }
    if upper.is_finite() {
        let tol = tol.max(PICARD_TOLERANCE_SCALE * upper.abs());
        let y = picard_solve(
            |y| Ok((cond_exp + generator.eval(time, y, z)? * delta + pd * upper) / (1.0 + pd)),
            upper,
            mu_delta / (1.0 + pd),
            tol,
            PICARD_MAX_ITERATIONS,
        )?;
        candidates.push((y, y > upper));
    }

    let consistent: Vec<f64> = candidates
        .iter()
        .filter(|(_, ok)| *ok)
        .map(|(y, _)| *y)
        .collect();
    let y = if consistent.len() == 1 {
        consistent[0]
    } else {
        // Rounding can strand the solution within a few ulps of a barrier;
        // fall back to the smallest residual of the full penalized equation.
        let mut best: Option<(f64, f64)> = None;
        for (y, _) in &candidates {
            let g = generator.eval(time, *y, z)?;
            let theta =
                (*y - g * delta - pd * neg_part(*y - lower)) + pd * pos_part(*y - upper);
            let residual = (theta - cond_exp).abs();
            if best.is_none_or(|(_, r)| residual < r) {
                best = Some((*y, residual));
            }
        }
        let (y, residual) = best.expect("at least the interior candidate exists");
        if residual > 1e3 * tol * (1.0 + pd) {
            return Err(StepError::RegionInconsistent { residual });
        }
        y
    };

    Ok(StepOutput {
        y,
        a: pd * neg_part(y - lower),
        k: pd * pos_part(y - upper),
    })
}

/// Dispatch on the scheme.
pub fn apply_step(scheme: &SchemeKind, input: &StepInput) -> Result<StepOutput, StepError> {
    match scheme {
        SchemeKind::ImplicitPenalization { penalty } => {
            step_implicit_penalization(input, *penalty)
        }
        SchemeKind::ImplicitExplicitPenalization { penalty } => {
            step_impexp_penalization(input, *penalty)
        }
        SchemeKind::ImplicitReflected => step_implicit_reflected(input),
        SchemeKind::ExplicitReflected => step_explicit_reflected(input),
    }
}

// ─── Backward sweep ─────────────────────────────────────────────────────────

/// Full solution on the recombining lattice: `y` on layers `0..=n`, and `z`,
/// `a`, `k` on layers `0..n`.
#[derive(Debug, Clone)]
pub struct SolutionGrid {
    grid: WalkGrid,
    scheme: SchemeKind,
    y: NodeField,
    z: NodeField,
    a: NodeField,
    k: NodeField,
}

impl SolutionGrid {
    pub fn grid(&self) -> &WalkGrid {
        &self.grid
    }

    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// Solution values; layer `n` holds the (optionally clamped) terminal.
    pub fn y(&self) -> &NodeField {
        &self.y
    }

    /// Integrand values on layers `0..n`.
    pub fn z(&self) -> &NodeField {
        &self.z
    }

    /// Upward reflection increments on layers `0..n`.
    pub fn a(&self) -> &NodeField {
        &self.a
    }

    /// Downward reflection increments on layers `0..n`.
    pub fn k(&self) -> &NodeField {
        &self.k
    }

    /// `y` at the root node: the approximation of the initial value.
    pub fn root_value(&self) -> f64 {
        self.y.value(NodeIndex::root())
    }
}

struct SweepEngine<'a> {
    problem: &'a Problem,
    grid: WalkGrid,
    scheme: SchemeKind,
    lower: NodeBarrier<'a>,
    upper: NodeBarrier<'a>,
}

impl<'a> SweepEngine<'a> {
    fn prepare(
        problem: &'a Problem,
        n: usize,
        scheme: SchemeKind,
    ) -> Result<SweepEngine<'a>, SolveError> {
        if n == 0 {
            return Err(SolveError::InvalidInput(
                "number of time steps must be positive".to_string(),
            ));
        }
        if !problem.horizon.is_finite() || problem.horizon <= 0.0 {
            return Err(SolveError::InvalidInput(format!(
                "horizon must be positive and finite, got {}",
                problem.horizon
            )));
        }
        let mu = problem.generator.mu();
        if !mu.is_finite() || mu < 0.0 {
            return Err(SolveError::InvalidInput(format!(
                "Lipschitz bound mu must be nonnegative and finite, got {mu}"
            )));
        }
        let grid = WalkGrid::new(problem.horizon, n);
        if mu * grid.delta() >= 1.0 {
            return Err(SolveError::InvalidInput(format!(
                "mu*delta = {} >= 1: the implicit step inversion is not a contraction; increase n",
                mu * grid.delta()
            )));
        }
        if let Some(p) = scheme.penalty() {
            if !p.is_finite() || p <= 0.0 {
                return Err(SolveError::InvalidInput(format!(
                    "penalization parameter must be positive and finite, got {p}"
                )));
            }
        }
        let lower = NodeBarrier::prepare(&problem.lower, BarrierSide::Lower)?;
        let upper = NodeBarrier::prepare(&problem.upper, BarrierSide::Upper)?;
        Ok(SweepEngine {
            problem,
            grid,
            scheme,
            lower,
            upper,
        })
    }

    /// Terminal layer, clamped into the barrier band when requested.
    fn terminal_layer(&self) -> Result<Vec<f64>, SolveError> {
        let mut values = discretize_terminal(&self.problem.terminal, &self.grid)?;
        if self.problem.clamp_terminal {
            let n = self.grid.steps();
            let t = self.grid.time(n);
            for (up_moves, value) in values.iter_mut().enumerate() {
                let node = NodeIndex::new(n, up_moves);
                let b = signed_offset(n, up_moves) * self.grid.sqrt_delta();
                let lo = self
                    .lower
                    .value(t, b)
                    .map_err(|source| LatticeError::Eval { node, source })?;
                let hi = self
                    .upper
                    .value(t, b)
                    .map_err(|source| LatticeError::Eval { node, source })?;
                if lo > hi {
                    return Err(SolveError::BarrierCrossing {
                        node,
                        lower: lo,
                        upper: hi,
                    });
                }
                *value = value.max(lo).min(hi);
            }
        }
        Ok(values)
    }

    /// Compute layer `layer` from layer `layer + 1`.
    fn step_layer(
        &self,
        layer: usize,
        next: &[f64],
        y_out: &mut [f64],
        z_out: &mut [f64],
        a_out: &mut [f64],
        k_out: &mut [f64],
    ) -> Result<(), SolveError> {
        debug_assert_eq!(next.len(), layer + 2);
        debug_assert_eq!(y_out.len(), layer + 1);
        let t = self.grid.time(layer);
        for up_moves in 0..=layer {
            let y_up = next[up_moves + 1];
            let y_down = next[up_moves];
            let node = NodeIndex::new(layer, up_moves);
            let b = signed_offset(layer, up_moves) * self.grid.sqrt_delta();
            let lo = self
                .lower
                .value(t, b)
                .map_err(|source| LatticeError::Eval { node, source })?;
            let hi = self
                .upper
                .value(t, b)
                .map_err(|source| LatticeError::Eval { node, source })?;
            if lo > hi {
                return Err(SolveError::BarrierCrossing {
                    node,
                    lower: lo,
                    upper: hi,
                });
            }
            let z = z_from_children(&self.grid, y_up, y_down);
            let input = StepInput {
                time: t,
                delta: self.grid.delta(),
                cond_exp: cond_expectation(y_up, y_down),
                z,
                lower: lo,
                upper: hi,
                generator: &self.problem.generator,
            };
            let out = apply_step(&self.scheme, &input)
                .map_err(|source| SolveError::Step { node, source })?;
            y_out[up_moves] = out.y;
            z_out[up_moves] = z;
            a_out[up_moves] = out.a;
            k_out[up_moves] = out.k;
        }
        Ok(())
    }
}

/// Backward sweep keeping the whole grid, as needed for trajectory sampling
/// and node-wise inspection.
///
/// Layer `n` is the discretized (optionally clamped) terminal; layers
/// `n-1..0` apply the scheme kernel node by node. Deterministic: identical
/// inputs give bit-identical output.
pub fn solve_backward(
    problem: &Problem,
    n: usize,
    scheme: SchemeKind,
) -> Result<SolutionGrid, SolveError> {
    let engine = SweepEngine::prepare(problem, n, scheme)?;
    let terminal = engine.terminal_layer()?;

    let mut y = NodeField::zeros(n);
    y.layer_mut(n).copy_from_slice(&terminal);
    let mut z = NodeField::zeros(n - 1);
    let mut a = NodeField::zeros(n - 1);
    let mut k = NodeField::zeros(n - 1);

    for layer in (0..n).rev() {
        let (y_out, next) = y.split_layers_mut(layer);
        engine.step_layer(
            layer,
            next,
            y_out,
            z.layer_mut(layer),
            a.layer_mut(layer),
            k.layer_mut(layer),
        )?;
    }

    Ok(SolutionGrid {
        grid: engine.grid,
        scheme,
        y,
        z,
        a,
        k,
    })
}

/// Backward sweep keeping only two layers; returns the root value.
///
/// Bit-identical to `solve_backward(..).root_value()` at a fraction of the
/// memory, for refinement studies at large `n`.
pub fn solve_root(problem: &Problem, n: usize, scheme: SchemeKind) -> Result<f64, SolveError> {
    let engine = SweepEngine::prepare(problem, n, scheme)?;
    let mut next = engine.terminal_layer()?;
    let mut current = vec![0.0; n + 1];
    let mut z_buf = vec![0.0; n.max(1)];
    let mut a_buf = vec![0.0; n.max(1)];
    let mut k_buf = vec![0.0; n.max(1)];

    for layer in (0..n).rev() {
        engine.step_layer(
            layer,
            &next[..layer + 2],
            &mut current[..layer + 1],
            &mut z_buf[..layer + 1],
            &mut a_buf[..layer + 1],
            &mut k_buf[..layer + 1],
        )?;
        std::mem::swap(&mut next, &mut current);
    }
    Ok(next[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BarrierSpec, GeneratorSpec, PointFn, Problem, TerminalSpec};
    use proptest::prelude::*;

    fn zero_gen() -> GeneratorSpec {
        GeneratorSpec::zero()
    }

    fn free_input(generator: &GeneratorSpec, cond_exp: f64) -> StepInput<'_> {
        StepInput {
            time: 0.0,
            delta: 0.1,
            cond_exp,
            z: 0.0,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            generator,
        }
    }

    #[test]
    fn picard_linear_fixed_point() {
        let y = picard_solve(|y| Ok(0.5 * y + 1.0), 0.0, 0.5, 1e-14, 200).unwrap();
        assert!((y - 2.0).abs() < 1e-12);
    }

    #[test]
    fn picard_constant_map() {
        let y = picard_solve(|_| Ok(3.25), 0.0, 0.0, 1e-14, 200).unwrap();
        assert_eq!(y, 3.25);
    }

    #[test]
    fn picard_reference_generator_fixed_point() {
        // y = (-5|y| - 1)/400: on the branch y < 0 this is linear,
        // 400y = 5y - 1, so the fixed point is y = -1/395.
        let delta = 1.0 / 400.0;
        let y = picard_solve(
            |y| Ok((-5.0 * y.abs() - 1.0) * delta),
            0.0,
            5.0 * delta,
            1e-15,
            200,
        )
        .unwrap();
        assert!((y - (-1.0 / 395.0)).abs() < 1e-13, "y = {y}");
    }

    #[test]
    fn picard_rejects_non_contraction() {
        assert!(matches!(
            picard_solve(|y| Ok(2.0 * y + 1.0), 0.0, 2.0, 1e-12, 100),
            Err(StepError::NotAContraction { .. })
        ));
    }

    #[test]
    fn explicit_reflected_clamps_from_below() {
        let generator = zero_gen();
        let input = StepInput {
            lower: 0.6,
            upper: f64::INFINITY,
            ..free_input(&generator, 0.5)
        };
        let out = step_explicit_reflected(&input).unwrap();
        assert_eq!(out.y, 0.6);
        assert!((out.a - 0.1).abs() < 1e-15);
        assert_eq!(out.k, 0.0);
    }

    #[test]
    fn explicit_reflected_without_barriers_is_identity() {
        let generator = zero_gen();
        let out = step_explicit_reflected(&free_input(&generator, 0.5)).unwrap();
        assert_eq!(out.y, 0.5);
        assert_eq!(out.a, 0.0);
        assert_eq!(out.k, 0.0);
    }

    #[test]
    fn explicit_reflected_equal_barriers() {
        let generator = zero_gen();
        let input = StepInput {
            lower: 0.2,
            upper: 0.2,
            ..free_input(&generator, 0.5)
        };
        let out = step_explicit_reflected(&input).unwrap();
        assert_eq!(out.y, 0.2);
        assert_eq!(out.a, 0.0);
        assert!((out.k - 0.3).abs() < 1e-15);
    }

    #[test]
    fn implicit_reflected_matches_explicit_for_zero_generator() {
        let generator = zero_gen();
        let input = StepInput {
            lower: 0.6,
            upper: 2.0,
            ..free_input(&generator, 0.5)
        };
        let implicit = step_implicit_reflected(&input).unwrap();
        let explicit = step_explicit_reflected(&input).unwrap();
        assert_eq!(implicit, explicit);
        assert_eq!(implicit.y, 0.6);
        assert!((implicit.a - 0.1).abs() < 1e-15);
    }

    #[test]
    fn implicit_reflected_linear_generator_unconstrained() {
        let generator = GeneratorSpec::new(crate::model::GeneratorFn::from_fn(|_, y, _| -y), 1.0);
        let out = step_implicit_reflected(&free_input(&generator, 0.0)).unwrap();
        assert_eq!(out.y, 0.0);
        assert_eq!(out.a, 0.0);
        assert_eq!(out.k, 0.0);
    }

    #[test]
    fn implicit_reflected_reference_generator_interior() {
        let generator = GeneratorSpec::parse("-5*abs(y+z)-1", 5.0).unwrap();
        let input = StepInput {
            time: 0.0,
            delta: 1.0 / 400.0,
            cond_exp: 0.0,
            z: 0.0,
            lower: -1.0,
            upper: 1.0,
            generator: &generator,
        };
        let out = step_implicit_reflected(&input).unwrap();
        assert!((out.y - (-1.0 / 395.0)).abs() < 1e-13);
        assert_eq!(out.a, 0.0);
        assert_eq!(out.k, 0.0);
    }

    #[test]
    fn implicit_reflected_equal_barriers_splits_imbalance() {
        let generator = zero_gen();
        // E above the coincident barriers: the step must push down.
        let input = StepInput {
            lower: 0.2,
            upper: 0.2,
            ..free_input(&generator, 0.5)
        };
        let out = step_implicit_reflected(&input).unwrap();
        assert_eq!(out.y, 0.2);
        assert_eq!(out.a, 0.0);
        assert!((out.k - 0.3).abs() < 1e-15);
        assert_eq!(out.a * out.k, 0.0);

        // E below: the step must push up.
        let input = StepInput {
            lower: 0.9,
            upper: 0.9,
            ..free_input(&generator, 0.5)
        };
        let out = step_implicit_reflected(&input).unwrap();
        assert_eq!(out.y, 0.9);
        assert!((out.a - 0.4).abs() < 1e-15);
        assert_eq!(out.k, 0.0);
    }

    #[test]
    fn implicit_penalization_lower_region() {
        let generator = zero_gen();
        // p·delta = 1: the lower-region equation is y·2 = E + L.
        let input = StepInput {
            lower: 1.0,
            upper: 2.0,
            ..free_input(&generator, 0.0)
        };
        let out = step_implicit_penalization(&input, 10.0).unwrap();
        assert!((out.y - 0.5).abs() < 1e-12);
        assert!((out.a - 0.5).abs() < 1e-12);
        assert_eq!(out.k, 0.0);
    }

    #[test]
    fn implicit_penalization_interior() {
        let generator = zero_gen();
        let input = StepInput {
            lower: 1.0,
            upper: 2.0,
            ..free_input(&generator, 1.5)
        };
        let out = step_implicit_penalization(&input, 10.0).unwrap();
        assert_eq!(out.y, 1.5);
        assert_eq!(out.a, 0.0);
        assert_eq!(out.k, 0.0);
    }

    #[test]
    fn implicit_penalization_upper_region() {
        let generator = zero_gen();
        // p·delta = 1: the upper-region equation is y·2 = E + U.
        let input = StepInput {
            lower: 1.0,
            upper: 2.0,
            ..free_input(&generator, 3.0)
        };
        let out = step_implicit_penalization(&input, 10.0).unwrap();
        assert!((out.y - 2.5).abs() < 1e-12);
        assert_eq!(out.a, 0.0);
        assert!((out.k - 0.5).abs() < 1e-12);
    }

    #[test]
    fn impexp_penalization_examples() {
        let generator = zero_gen();
        // p·delta = 1, so the weight is 1/2.
        let input = StepInput {
            lower: 0.6,
            upper: 2.0,
            ..free_input(&generator, 0.5)
        };
        let out = step_impexp_penalization(&input, 10.0).unwrap();
        assert!((out.y - 0.55).abs() < 1e-15);
        assert!((out.a - 0.05).abs() < 1e-15);
        assert_eq!(out.k, 0.0);

        // Interior: no correction at all.
        let interior = StepInput {
            lower: 0.0,
            upper: 2.0,
            ..free_input(&generator, 0.5)
        };
        let out = step_impexp_penalization(&interior, 10.0).unwrap();
        assert_eq!(out.y, 0.5);
        assert_eq!(out.a, 0.0);
        assert_eq!(out.k, 0.0);
    }

    #[test]
    fn impexp_penalization_approaches_reflected_value() {
        let generator = zero_gen();
        let input = StepInput {
            lower: 0.6,
            upper: 2.0,
            ..free_input(&generator, 0.5)
        };
        let reflected = step_explicit_reflected(&input).unwrap();
        let mut last_gap = f64::INFINITY;
        for p in [10.0, 100.0, 1000.0, 1e6, 1e9] {
            let out = step_impexp_penalization(&input, p).unwrap();
            let gap = (out.y - reflected.y).abs();
            assert!(gap <= last_gap, "gap must shrink as p grows");
            last_gap = gap;
        }
        assert!(last_gap < 1e-9);
    }

    #[test]
    fn penalization_identities_hold_for_impexp() {
        let generator = GeneratorSpec::parse("-5*abs(y+z)-1", 5.0).unwrap();
        let input = StepInput {
            time: 0.25,
            delta: 0.01,
            cond_exp: 0.7,
            z: -0.4,
            lower: 0.8,
            upper: 1.4,
            generator: &generator,
        };
        for p in [5.0, 80.0, 2000.0] {
            let out = step_impexp_penalization(&input, p).unwrap();
            let pd = p * input.delta;
            assert!((out.a - pd * neg_part(out.y - input.lower)).abs() < 1e-12);
            assert!((out.k - pd * pos_part(out.y - input.upper)).abs() < 1e-12);
        }
    }

    #[test]
    fn penalization_identities_exact_for_implicit() {
        let generator = GeneratorSpec::parse("-5*abs(y+z)-1", 5.0).unwrap();
        let input = StepInput {
            time: 0.25,
            delta: 0.01,
            cond_exp: 0.4,
            z: -0.4,
            lower: 0.8,
            upper: 1.4,
            generator: &generator,
        };
        for p in [5.0, 80.0, 2000.0] {
            let out = step_implicit_penalization(&input, p).unwrap();
            let pd = p * input.delta;
            assert_eq!(out.a, pd * neg_part(out.y - input.lower));
            assert_eq!(out.k, pd * pos_part(out.y - input.upper));
        }
    }

    fn martingale_problem() -> Problem {
        Problem::new(
            1.0,
            GeneratorSpec::zero(),
            TerminalSpec::Markovian(PointFn::from_fn(|x| x)),
        )
    }

    #[test]
    fn martingale_terminal_is_preserved_exactly() {
        // sqrt(delta) = 0.25 is a power of two, so node values, averages and
        // difference quotients are all exact.
        let n = 16;
        for scheme in [
            SchemeKind::ExplicitReflected,
            SchemeKind::ImplicitReflected,
            SchemeKind::ImplicitPenalization { penalty: 50.0 },
            SchemeKind::ImplicitExplicitPenalization { penalty: 50.0 },
        ] {
            let sol = solve_backward(&martingale_problem(), n, scheme).unwrap();
            for layer in 0..=n {
                for k in 0..=layer {
                    let node = NodeIndex::new(layer, k);
                    assert_eq!(
                        sol.y().value(node),
                        sol.grid().b_value(node),
                        "{scheme} y at {node}"
                    );
                    if layer < n {
                        assert_eq!(sol.z().value(node), 1.0, "{scheme} z at {node}");
                        assert_eq!(sol.a().value(node), 0.0);
                        assert_eq!(sol.k().value(node), 0.0);
                    }
                }
            }
            assert_eq!(sol.root_value(), 0.0);
        }
    }

    #[test]
    fn single_step_grid_works() {
        let sol = solve_backward(&martingale_problem(), 1, SchemeKind::ExplicitReflected).unwrap();
        assert_eq!(sol.root_value(), 0.0);
        assert_eq!(sol.z().value(NodeIndex::root()), 1.0);
        assert_eq!(
            solve_root(&martingale_problem(), 1, SchemeKind::ImplicitReflected).unwrap(),
            0.0
        );
    }

    #[test]
    fn constant_terminal_stays_constant() {
        let problem = Problem::new(
            1.0,
            GeneratorSpec::zero(),
            TerminalSpec::Markovian(PointFn::from_fn(|_| 2.75)),
        );
        let sol = solve_backward(&problem, 25, SchemeKind::ExplicitReflected).unwrap();
        for layer in 0..=25 {
            for k in 0..=layer {
                let node = NodeIndex::new(layer, k);
                assert_eq!(sol.y().value(node), 2.75);
                if layer < 25 {
                    assert_eq!(sol.z().value(node), 0.0);
                }
            }
        }
    }

    #[test]
    fn low_memory_root_matches_full_grid() {
        let problem = Problem::new(
            1.0,
            GeneratorSpec::parse("-5*abs(y+z)-1", 5.0).unwrap(),
            TerminalSpec::Markovian(PointFn::parse("abs(x)").unwrap()),
        )
        .with_lower(BarrierSpec::Functional(
            crate::model::SurfaceFn::parse("-3*(x-2)^2+3").unwrap(),
        ))
        .with_upper(BarrierSpec::Functional(
            crate::model::SurfaceFn::parse("(x+1)^2+3*t-2.5").unwrap(),
        ));
        for scheme in [
            SchemeKind::ExplicitReflected,
            SchemeKind::ImplicitReflected,
            SchemeKind::ImplicitPenalization { penalty: 200.0 },
            SchemeKind::ImplicitExplicitPenalization { penalty: 200.0 },
        ] {
            let full = solve_backward(&problem, 60, scheme).unwrap().root_value();
            let low = solve_root(&problem, 60, scheme).unwrap();
            assert_eq!(full.to_bits(), low.to_bits(), "{scheme}");
        }
    }

    #[test]
    fn barrier_free_kernels_collapse_to_classical_schemes() {
        // Without barriers the two explicit kernels and the two implicit
        // kernels must each agree bit for bit: the penalty terms vanish and
        // what is left is the classical explicit/implicit step.
        let problem = Problem::new(
            1.0,
            GeneratorSpec::parse("-5*abs(y+z)-1", 5.0).unwrap(),
            TerminalSpec::Markovian(PointFn::parse("abs(x)").unwrap()),
        );
        let n = 32;
        let explicit = solve_backward(&problem, n, SchemeKind::ExplicitReflected).unwrap();
        let impexp = solve_backward(
            &problem,
            n,
            SchemeKind::ImplicitExplicitPenalization { penalty: 300.0 },
        )
        .unwrap();
        let implicit = solve_backward(&problem, n, SchemeKind::ImplicitReflected).unwrap();
        let implicit_pen = solve_backward(
            &problem,
            n,
            SchemeKind::ImplicitPenalization { penalty: 300.0 },
        )
        .unwrap();
        for layer in 0..=n {
            for k in 0..=layer {
                let node = NodeIndex::new(layer, k);
                assert_eq!(
                    explicit.y().value(node).to_bits(),
                    impexp.y().value(node).to_bits(),
                    "explicit family differs at {node}"
                );
                assert_eq!(
                    implicit.y().value(node).to_bits(),
                    implicit_pen.y().value(node).to_bits(),
                    "implicit family differs at {node}"
                );
                if layer < n {
                    assert_eq!(explicit.a().value(node), 0.0);
                    assert_eq!(impexp.k().value(node), 0.0);
                    assert_eq!(implicit_pen.a().value(node), 0.0);
                }
            }
        }
    }

    #[test]
    fn crossing_barriers_name_the_node() {
        let problem = Problem::new(
            1.0,
            GeneratorSpec::zero(),
            TerminalSpec::Markovian(PointFn::from_fn(|x| x)),
        )
        .with_lower(BarrierSpec::ItoConstant {
            initial: 1.0,
            drift: 0.0,
            diffusion: 0.0,
        })
        .with_upper(BarrierSpec::ItoConstant {
            initial: -1.0,
            drift: 0.0,
            diffusion: 0.0,
        });
        let err = solve_backward(&problem, 8, SchemeKind::ExplicitReflected).unwrap_err();
        match err {
            SolveError::BarrierCrossing { node, .. } => assert_eq!(node.layer, 7),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let problem = Problem::new(
            1.0,
            GeneratorSpec::parse("-5*abs(y+z)-1", 5.0).unwrap(),
            TerminalSpec::Markovian(PointFn::from_fn(|x| x)),
        );
        assert!(matches!(
            solve_backward(&problem, 4, SchemeKind::ExplicitReflected),
            Err(SolveError::InvalidInput(_))
        ));
    }

    #[test]
    fn nonpositive_penalty_is_rejected() {
        let problem = martingale_problem();
        assert!(matches!(
            solve_backward(
                &problem,
                8,
                SchemeKind::ImplicitPenalization { penalty: 0.0 }
            ),
            Err(SolveError::InvalidInput(_))
        ));
    }

    fn generator_pool() -> Vec<GeneratorSpec> {
        vec![
            GeneratorSpec::zero(),
            GeneratorSpec::parse("-5*abs(y+z)-1", 5.0).unwrap(),
            GeneratorSpec::parse("y-z", 1.0).unwrap(),
            GeneratorSpec::parse("min(y,z)+t", 1.0).unwrap(),
        ]
    }

    proptest! {
        #[test]
        fn kernel_invariants(
            gen_idx in 0usize..4,
            cond_exp in -5.0f64..5.0,
            z in -3.0f64..3.0,
            low in -4.0f64..4.0,
            width in 0.0f64..5.0,
            delta in 1e-4f64..0.1,
            penalty in 0.5f64..5e4,
            lower_absent in proptest::bool::ANY,
            upper_absent in proptest::bool::ANY,
        ) {
            let pool = generator_pool();
            let generator = &pool[gen_idx];
            let lower = if lower_absent { f64::NEG_INFINITY } else { low };
            let upper = if upper_absent { f64::INFINITY } else { low + width };
            let input = StepInput {
                time: 0.3,
                delta,
                cond_exp,
                z,
                lower,
                upper,
                generator,
            };
            let pd = penalty * delta;
            let mut scale = 1.0 + cond_exp.abs();
            if lower.is_finite() {
                scale += lower.abs();
            }
            if upper.is_finite() {
                scale += upper.abs();
            }
            let kernels: Vec<(&str, StepOutput, bool)> = vec![
                ("explicit-reflected", step_explicit_reflected(&input).unwrap(), true),
                ("implicit-reflected", step_implicit_reflected(&input).unwrap(), true),
                ("implicit-pen", step_implicit_penalization(&input, penalty).unwrap(), false),
                ("impexp-pen", step_impexp_penalization(&input, penalty).unwrap(), false),
            ];
            for (name, out, reflected) in kernels {
                prop_assert!(out.a >= 0.0, "{}: a = {}", name, out.a);
                prop_assert!(out.k >= 0.0, "{}: k = {}", name, out.k);
                prop_assert!(out.a * out.k == 0.0, "{}: a*k != 0", name);
                if reflected {
                    prop_assert!(out.y >= lower - 1e-12 * scale, "{}: y below lower", name);
                    prop_assert!(out.y <= upper + 1e-12 * scale, "{}: y above upper", name);
                    if lower.is_finite() {
                        prop_assert!((out.y - lower).abs() * out.a <= 1e-10 * scale, "{name}");
                    } else {
                        prop_assert!(out.a == 0.0, "{name}");
                    }
                    if upper.is_finite() {
                        prop_assert!((out.y - upper).abs() * out.k <= 1e-10 * scale, "{name}");
                    } else {
                        prop_assert!(out.k == 0.0, "{name}");
                    }
                } else {
                    prop_assert!((out.a - pd * neg_part(out.y - lower)).abs() <= 1e-9 * scale * (1.0 + pd), "{name}");
                    prop_assert!((out.k - pd * pos_part(out.y - upper)).abs() <= 1e-9 * scale * (1.0 + pd), "{name}");
                }
                // Step equation with the scheme's own g-argument.
                let g_arg = match name {
                    "implicit-reflected" | "implicit-pen" => out.y,
                    _ => cond_exp,
                };
                let g = generator.eval(input.time, g_arg, z).unwrap();
                let residual = (out.y - ((cond_exp + g * delta + out.a) - out.k)).abs();
                prop_assert!(residual <= 1e-9 * scale * (1.0 + pd), "{}: residual {}", name, residual);
            }
        }
    }
}
