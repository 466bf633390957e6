//! Exhaustive solver over all `2^n` walk paths.
//!
//! Instead of recombining, every `±1`-history gets its own node. That costs
//! `Θ(2^n)` but needs no structural assumptions: path-functional terminal
//! values and barriers with state-dependent Itô coefficients are both
//! honored, and for Markovian inputs the result must match the recombining
//! lattice node for node, which makes this the correctness reference for
//! the fast solver.
//!
//! Histories are indexed by bitmask: bit `i` set means step `i + 1` moved
//! up. The children of history `h` at step `j` are `h` (down) and
//! `h | 1 << j` (up). This enumeration is deterministic, and the per-node
//! kernels are reused verbatim from [`crate::schemes`], so explicit-scheme
//! comparisons against the lattice are bit-exact.

use crate::lattice::{
    cond_expectation, signed_offset, z_from_children, BarrierSide, LatticeError, NodeBarrier,
    NodeIndex, WalkGrid,
};
use crate::model::{BarrierSpec, Problem, SchemeKind, SurfaceFn, TerminalSpec};
use crate::schemes::{apply_step, solve_backward, SolveError, StepInput};

/// Hard cap on the number of steps: the tree carries `2^(n+1)` values per
/// stored quantity.
pub const MAX_FULL_TREE_STEPS: usize = 25;

/// Cap for [`compare_with_recombining`], which additionally holds the full
/// recombining solution.
pub const MAX_COMPARE_STEPS: usize = 20;

/// Per-history solution. Step `j` holds exactly `2^j` entries.
#[derive(Debug, Clone)]
pub struct PathTree {
    grid: WalkGrid,
    scheme: SchemeKind,
    y: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
}

impl PathTree {
    pub fn grid(&self) -> &WalkGrid {
        &self.grid
    }

    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// Solution value at step `j` for history bitmask `h` (`0 <= h < 2^j`).
    pub fn y(&self, step: usize, history: usize) -> f64 {
        self.y[step][history]
    }

    pub fn z(&self, step: usize, history: usize) -> f64 {
        self.z[step][history]
    }

    pub fn a(&self, step: usize, history: usize) -> f64 {
        self.a[step][history]
    }

    pub fn k(&self, step: usize, history: usize) -> f64 {
        self.k[step][history]
    }

    pub fn root_value(&self) -> f64 {
        self.y[0][0]
    }
}

/// Walk value at step `j` along history `h`.
fn b_of(grid: &WalkGrid, step: usize, history: usize) -> f64 {
    let ups = (history & mask(step)).count_ones() as usize;
    signed_offset(step, ups) * grid.sqrt_delta()
}

fn mask(step: usize) -> usize {
    (1usize << step) - 1
}

/// Barrier values per step and history.
enum TreeBarrier<'a> {
    Node(NodeBarrier<'a>),
    /// Cumulative Itô sums, built forward before the backward sweep.
    PathSums(Vec<Vec<f64>>),
}

impl<'a> TreeBarrier<'a> {
    fn prepare(
        spec: &'a BarrierSpec,
        side: BarrierSide,
        grid: &WalkGrid,
        last_step: usize,
    ) -> Result<Self, SolveError> {
        let (initial, drift, diffusion) = match spec {
            BarrierSpec::ItoGeneral {
                initial,
                drift,
                diffusion,
            } => (*initial, drift, diffusion),
            other => {
                let node = NodeBarrier::prepare(other, side)
                    .expect("only the general Ito form is path-dependent");
                return Ok(TreeBarrier::Node(node));
            }
        };
        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(last_step + 1);
        layers.push(vec![initial]);
        for step in 0..last_step {
            let t = grid.time(step);
            let current = &layers[step];
            let mut next = vec![0.0; current.len() * 2];
            for (history, &value) in current.iter().enumerate() {
                let b = b_of(grid, step, history);
                let node = node_of(step, history);
                let eval = |f: &SurfaceFn| {
                    f.eval(t, b)
                        .map_err(|source| LatticeError::Eval { node, source })
                };
                let drift_term = eval(drift)? * grid.delta();
                let diffusion_step = eval(diffusion)? * grid.sqrt_delta();
                next[history] = value + drift_term - diffusion_step;
                next[history | 1 << step] = value + drift_term + diffusion_step;
            }
            layers.push(next);
        }
        Ok(TreeBarrier::PathSums(layers))
    }

    fn value(&self, grid: &WalkGrid, step: usize, history: usize) -> Result<f64, SolveError> {
        match self {
            TreeBarrier::Node(node) => {
                let t = grid.time(step);
                let b = b_of(grid, step, history);
                node.value(t, b).map_err(|source| {
                    SolveError::Lattice(LatticeError::Eval {
                        node: node_of(step, history),
                        source,
                    })
                })
            }
            TreeBarrier::PathSums(layers) => Ok(layers[step][history]),
        }
    }
}

/// Lattice coordinates of a history, for diagnostics.
fn node_of(step: usize, history: usize) -> NodeIndex {
    NodeIndex::new(step, (history & mask(step)).count_ones() as usize)
}

/// Solve the backward recursion on the full binary tree.
///
/// Kernel semantics are identical to the recombining sweep; only the state
/// space differs.
pub fn solve_full_tree(
    problem: &Problem,
    n: usize,
    scheme: SchemeKind,
) -> Result<PathTree, SolveError> {
    if n == 0 {
        return Err(SolveError::InvalidInput(
            "number of time steps must be positive".to_string(),
        ));
    }
    if n > MAX_FULL_TREE_STEPS {
        return Err(SolveError::InvalidInput(format!(
            "full-tree solver supports at most {MAX_FULL_TREE_STEPS} steps, got {n}"
        )));
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

    let lower = TreeBarrier::prepare(&problem.lower, BarrierSide::Lower, &grid, n)?;
    let upper = TreeBarrier::prepare(&problem.upper, BarrierSide::Upper, &grid, n)?;

    // Terminal step.
    let mut terminal = vec![0.0; 1usize << n];
    match &problem.terminal {
        TerminalSpec::Markovian(phi) => {
            for (history, slot) in terminal.iter_mut().enumerate() {
                let b = b_of(&grid, n, history);
                *slot = phi.eval(b).map_err(|source| LatticeError::Eval {
                    node: node_of(n, history),
                    source,
                })?;
            }
        }
        TerminalSpec::PathFunctional(gamma) => {
            let mut path = vec![0.0; n + 1];
            for (history, slot) in terminal.iter_mut().enumerate() {
                for (step, value) in path.iter_mut().enumerate() {
                    *value = b_of(&grid, step, history);
                }
                *slot = gamma.eval(&path);
            }
        }
    }
    if problem.clamp_terminal {
        for (history, value) in terminal.iter_mut().enumerate() {
            let lo = lower.value(&grid, n, history)?;
            let hi = upper.value(&grid, n, history)?;
            if lo > hi {
                return Err(SolveError::BarrierCrossing {
                    node: node_of(n, history),
                    lower: lo,
                    upper: hi,
                });
            }
            *value = value.max(lo).min(hi);
        }
    }

    let mut y: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let mut z: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut a: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut k: Vec<Vec<f64>> = vec![Vec::new(); n];
    y[n] = terminal;

    for step in (0..n).rev() {
        let t = grid.time(step);
        let width = 1usize << step;
        let mut y_row = vec![0.0; width];
        let mut z_row = vec![0.0; width];
        let mut a_row = vec![0.0; width];
        let mut k_row = vec![0.0; width];
        let next = &y[step + 1];
        for history in 0..width {
            let y_up = next[history | 1 << step];
            let y_down = next[history];
            let lo = lower.value(&grid, step, history)?;
            let hi = upper.value(&grid, step, history)?;
            let node = node_of(step, history);
            if lo > hi {
                return Err(SolveError::BarrierCrossing {
                    node,
                    lower: lo,
                    upper: hi,
                });
            }
            let zv = z_from_children(&grid, y_up, y_down);
            let input = StepInput {
                time: t,
                delta: grid.delta(),
                cond_exp: cond_expectation(y_up, y_down),
                z: zv,
                lower: lo,
                upper: hi,
                generator: &problem.generator,
            };
            let out = apply_step(&scheme, &input)
                .map_err(|source| SolveError::Step { node, source })?;
            y_row[history] = out.y;
            z_row[history] = zv;
            a_row[history] = out.a;
            k_row[history] = out.k;
        }
        y[step] = y_row;
        z[step] = z_row;
        a[step] = a_row;
        k[step] = k_row;
    }

    Ok(PathTree {
        grid,
        scheme,
        y,
        z,
        a,
        k,
    })
}

/// Solve both ways and return the largest absolute node discrepancy over
/// `y`, `z`, `a`, `k`.
///
/// Requires a Markovian problem (node-functional barriers, pointwise
/// terminal): only then do the two state spaces describe the same
/// recursion. Explicit kernels match bit for bit; implicit ones to within
/// the iteration tolerance.
pub fn compare_with_recombining(
    problem: &Problem,
    n: usize,
    scheme: SchemeKind,
) -> Result<f64, SolveError> {
    if n > MAX_COMPARE_STEPS {
        return Err(SolveError::InvalidInput(format!(
            "full-tree comparison supports at most {MAX_COMPARE_STEPS} steps, got {n}"
        )));
    }
    if !problem.is_markovian() {
        return Err(SolveError::InvalidInput(
            "full-tree comparison requires a Markovian problem (pointwise terminal, node-functional barriers)"
                .to_string(),
        ));
    }
    let tree = solve_full_tree(problem, n, scheme)?;
    let lattice = solve_backward(problem, n, scheme)?;

    let mut worst: f64 = 0.0;
    for step in 0..=n {
        for history in 0..(1usize << step) {
            let node = node_of(step, history);
            worst = worst.max((tree.y(step, history) - lattice.y().value(node)).abs());
            if step < n {
                worst = worst.max((tree.z(step, history) - lattice.z().value(node)).abs());
                worst = worst.max((tree.a(step, history) - lattice.a().value(node)).abs());
                worst = worst.max((tree.k(step, history) - lattice.k().value(node)).abs());
            }
        }
    }
    Ok(worst)
}
