//! The recombining binomial tree.
//!
//! A scaled random walk approximates the driving Brownian motion: with
//! `delta = T/n`, the walk takes steps `±sqrt(delta)` and layer `j` of the
//! tree carries the `j + 1` values `(2k - j)·sqrt(delta)` for `k` up-moves.
//! Conditional expectations and the martingale integrand come from the two
//! children of a node:
//!
//! ```text
//! E = (y_up + y_down) / 2          z = (y_up - y_down) / (2·sqrt(delta))
//! ```
//!
//! so children are reconstructed exactly as `y_up = E + z·sqrt(delta)` and
//! `y_down = E - z·sqrt(delta)`.

use std::fmt;

use thiserror::Error;

use crate::expr::EvalError;
use crate::model::{BarrierSpec, SurfaceFn, TerminalSpec};

/// Time discretization of the walk.
#[derive(Debug, Clone, Copy)]
pub struct WalkGrid {
    n: usize,
    horizon: f64,
    delta: f64,
    sqrt_delta: f64,
}

impl WalkGrid {
    /// # Panics
    /// Panics on `n = 0` or a non-positive horizon; run
    /// [`crate::model::validate`] first for a report instead.
    pub fn new(horizon: f64, n: usize) -> Self {
        assert!(n > 0, "need at least one time step");
        assert!(
            horizon > 0.0 && horizon.is_finite(),
            "horizon must be positive and finite"
        );
        let delta = horizon / n as f64;
        WalkGrid {
            n,
            horizon,
            delta,
            sqrt_delta: delta.sqrt(),
        }
    }

    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn sqrt_delta(&self) -> f64 {
        self.sqrt_delta
    }

    /// Grid time `t_j = j·delta`.
    pub fn time(&self, layer: usize) -> f64 {
        layer as f64 * self.delta
    }

    /// Walk value at a node: `(2k - j)·sqrt(delta)`.
    pub fn b_value(&self, node: NodeIndex) -> f64 {
        debug_assert!(node.layer <= self.n && node.up_moves <= node.layer);
        signed_offset(node.layer, node.up_moves) * self.sqrt_delta
    }
}

/// `(2k - j)` as a float; shared with the full-tree solver so both produce
/// bit-identical walk values.
pub(crate) fn signed_offset(layer: usize, up_moves: usize) -> f64 {
    (2 * up_moves as i64 - layer as i64) as f64
}

/// Position in the tree: layer `j` (time index) and number of up-moves `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeIndex {
    pub layer: usize,
    pub up_moves: usize,
}

impl NodeIndex {
    pub fn new(layer: usize, up_moves: usize) -> Self {
        debug_assert!(up_moves <= layer);
        NodeIndex { layer, up_moves }
    }

    pub fn root() -> Self {
        NodeIndex {
            layer: 0,
            up_moves: 0,
        }
    }

    /// Child reached by an up-move.
    pub fn up_child(self) -> Self {
        NodeIndex::new(self.layer + 1, self.up_moves + 1)
    }

    /// Child reached by a down-move.
    pub fn down_child(self) -> Self {
        NodeIndex::new(self.layer + 1, self.up_moves)
    }
}

impl fmt::Display for NodeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(j={}, k={})", self.layer, self.up_moves)
    }
}

/// One real value per node, for layers `0..=last_layer`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField {
    last_layer: usize,
    values: Vec<f64>,
}

fn layer_offset(layer: usize) -> usize {
    layer * (layer + 1) / 2
}

impl NodeField {
    pub fn zeros(last_layer: usize) -> Self {
        NodeField {
            last_layer,
            values: vec![0.0; layer_offset(last_layer + 1)],
        }
    }

    pub fn last_layer(&self) -> usize {
        self.last_layer
    }

    pub fn value(&self, node: NodeIndex) -> f64 {
        assert!(
            node.layer <= self.last_layer && node.up_moves <= node.layer,
            "node {node} out of range (last layer {})",
            self.last_layer
        );
        self.values[layer_offset(node.layer) + node.up_moves]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        assert!(layer <= self.last_layer);
        &self.values[layer_offset(layer)..layer_offset(layer + 1)]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [f64] {
        assert!(layer <= self.last_layer);
        &mut self.values[layer_offset(layer)..layer_offset(layer + 1)]
    }

    /// Borrow layer `j` mutably and layer `j + 1` immutably at once, as the
    /// backward sweep writes one layer from the next.
    pub(crate) fn split_layers_mut(&mut self, layer: usize) -> (&mut [f64], &[f64]) {
        assert!(layer < self.last_layer);
        let (head, tail) = self.values.split_at_mut(layer_offset(layer + 1));
        (&mut head[layer_offset(layer)..], &tail[..layer + 2])
    }
}

/// Averaging stencil: `E[y_{j+1} | node] = (y_up + y_down) / 2`.
#[inline]
pub fn cond_expectation(y_up: f64, y_down: f64) -> f64 {
    (y_up + y_down) / 2.0
}

/// Difference stencil: `z = (y_up - y_down) / (2·sqrt(delta))`.
#[inline]
pub fn z_from_children(grid: &WalkGrid, y_up: f64, y_down: f64) -> f64 {
    (y_up - y_down) / (2.0 * grid.sqrt_delta)
}

/// Which side a barrier bounds; decides the sentinel used when absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierSide {
    Lower,
    Upper,
}

impl BarrierSide {
    pub fn sentinel(self) -> f64 {
        match self {
            BarrierSide::Lower => f64::NEG_INFINITY,
            BarrierSide::Upper => f64::INFINITY,
        }
    }
}

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("barrier has state-dependent Ito coefficients; the recombining lattice cannot represent it (use the full path-tree solver)")]
    PathDependentBarrier,
    #[error("terminal value is a path functional; the recombining lattice cannot represent it (use the full path-tree solver)")]
    PathFunctionalTerminal,
    #[error("evaluation failed at node {node}: {source}")]
    Eval {
        node: NodeIndex,
        #[source]
        source: EvalError,
    },
}

/// A barrier reduced to a per-node function. Rejects the path-dependent Itô
/// form up front; both the sweep kernels and [`discretize_barrier`] go
/// through this single evaluation path.
pub(crate) enum NodeBarrier<'a> {
    Absent(f64),
    Functional(&'a SurfaceFn),
    Affine {
        initial: f64,
        drift: f64,
        diffusion: f64,
    },
}

impl<'a> NodeBarrier<'a> {
    pub(crate) fn prepare(
        spec: &'a BarrierSpec,
        side: BarrierSide,
    ) -> Result<Self, LatticeError> {
        match spec {
            BarrierSpec::Absent => Ok(NodeBarrier::Absent(side.sentinel())),
            BarrierSpec::Functional(f) => Ok(NodeBarrier::Functional(f)),
            BarrierSpec::ItoConstant {
                initial,
                drift,
                diffusion,
            } => Ok(NodeBarrier::Affine {
                initial: *initial,
                drift: *drift,
                diffusion: *diffusion,
            }),
            BarrierSpec::ItoGeneral { .. } => Err(LatticeError::PathDependentBarrier),
        }
    }

    pub(crate) fn value(&self, t: f64, b: f64) -> Result<f64, EvalError> {
        match self {
            NodeBarrier::Absent(sentinel) => Ok(*sentinel),
            NodeBarrier::Functional(f) => f.eval(t, b),
            NodeBarrier::Affine {
                initial,
                drift,
                diffusion,
            } => Ok((initial + drift * t) + diffusion * b),
        }
    }

    pub(crate) fn is_absent(&self) -> bool {
        matches!(self, NodeBarrier::Absent(_))
    }
}

/// A discretized barrier: either per-node values or an absent-side sentinel.
#[derive(Debug, Clone)]
pub struct BarrierField {
    sentinel: f64,
    values: Option<NodeField>,
}

impl BarrierField {
    pub fn is_absent(&self) -> bool {
        self.values.is_none()
    }

    /// Barrier value at a node; `∓∞` when the side is absent.
    pub fn value(&self, node: NodeIndex) -> f64 {
        match &self.values {
            Some(field) => field.value(node),
            None => self.sentinel,
        }
    }
}

/// Evaluate a barrier on every node of the grid.
///
/// The Itô form with constant coefficients collapses to the node function
/// `initial + drift·t + diffusion·b`, node-wise identical to the equivalent
/// functional form.
pub fn discretize_barrier(
    spec: &BarrierSpec,
    grid: &WalkGrid,
    side: BarrierSide,
) -> Result<BarrierField, LatticeError> {
    let barrier = NodeBarrier::prepare(spec, side)?;
    if barrier.is_absent() {
        return Ok(BarrierField {
            sentinel: side.sentinel(),
            values: None,
        });
    }
    let n = grid.steps();
    let mut field = NodeField::zeros(n);
    for layer in 0..=n {
        let t = grid.time(layer);
        let row = field.layer_mut(layer);
        for (up_moves, slot) in row.iter_mut().enumerate() {
            let node = NodeIndex::new(layer, up_moves);
            let b = signed_offset(layer, up_moves) * grid.sqrt_delta;
            *slot = barrier
                .value(t, b)
                .map_err(|source| LatticeError::Eval { node, source })?;
        }
    }
    Ok(BarrierField {
        sentinel: side.sentinel(),
        values: Some(field),
    })
}

/// Evaluate the terminal payoff on layer `n`.
pub fn discretize_terminal(
    spec: &TerminalSpec,
    grid: &WalkGrid,
) -> Result<Vec<f64>, LatticeError> {
    let phi = match spec {
        TerminalSpec::Markovian(phi) => phi,
        TerminalSpec::PathFunctional(_) => return Err(LatticeError::PathFunctionalTerminal),
    };
    let n = grid.steps();
    let mut values = Vec::with_capacity(n + 1);
    for up_moves in 0..=n {
        let node = NodeIndex::new(n, up_moves);
        let b = grid.b_value(node);
        values.push(
            phi.eval(b)
                .map_err(|source| LatticeError::Eval { node, source })?,
        );
    }
    Ok(values)
}
