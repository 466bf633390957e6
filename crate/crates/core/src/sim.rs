//! Trajectory sampling along a solved grid, refinement tables and CSV export.
//!
//! A sample draws a fair ±1 walk from a seeded ChaCha8 stream and reads the
//! solved values along it, accumulating the reflection forces
//! `A_j = a_0 + ... + a_j` and `K_j = k_0 + ... + k_j`. The generator
//! algorithm is pinned: golden files depend on it, so it must never change
//! silently. One draw is made per step and its least significant bit decides
//! the move.
//!
//! CSV output uses UTF-8, LF line endings and the shortest round-trip
//! decimal representation, so files are portable across platforms.

use std::io::{self, Write};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::lattice::NodeIndex;
use crate::model::{Problem, SchemeKind};
use crate::schemes::{solve_root, SolutionGrid, SolveError};

/// One record per visited node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub step: usize,
    pub time: f64,
    /// Walk value at the visited node.
    pub b: f64,
    pub y: f64,
    /// Integrand; `None` on the terminal step.
    pub z: Option<f64>,
    /// Cumulative upward force up to and including this step.
    pub cum_a: f64,
    /// Cumulative downward force up to and including this step.
    pub cum_k: f64,
}

/// A simulated trajectory through a solved grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub seed: u64,
    pub points: Vec<PathPoint>,
}

/// Walk one seeded trajectory through the lattice.
///
/// Identical seeds give identical samples, byte for byte.
pub fn sample_path(solution: &SolutionGrid, seed: u64) -> PathSample {
    let grid = solution.grid();
    let n = grid.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n + 1);
    let mut up_moves = 0usize;
    let mut cum_a = 0.0;
    let mut cum_k = 0.0;
    for step in 0..=n {
        let node = NodeIndex::new(step, up_moves);
        let (z, a, k) = if step < n {
            (
                Some(solution.z().value(node)),
                solution.a().value(node),
                solution.k().value(node),
            )
        } else {
            (None, 0.0, 0.0)
        };
        cum_a += a;
        cum_k += k;
        points.push(PathPoint {
            step,
            time: grid.time(step),
            b: grid.b_value(node),
            y: solution.y().value(node),
            z,
            cum_a,
            cum_k,
        });
        if step < n && rng.next_u32() & 1 == 1 {
            up_moves += 1;
        }
    }
    PathSample { seed, points }
}

/// One solved cell of a refinement study.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub steps: usize,
    pub scheme: SchemeKind,
    pub root: f64,
    pub seconds: f64,
}

/// Root values across step counts and schemes.
#[derive(Debug, Clone, Default)]
pub struct ConvergenceTable {
    pub rows: Vec<TableRow>,
}

/// Solve every `(n, scheme)` pair with the two-layer sweep and record the
/// root values. Rows are independent and appear in input order, `n` outermost.
pub fn convergence_table(
    problem: &Problem,
    n_list: &[usize],
    schemes: &[SchemeKind],
) -> Result<ConvergenceTable, SolveError> {
    let mut rows = Vec::with_capacity(n_list.len() * schemes.len());
    for &n in n_list {
        for &scheme in schemes {
            let started = Instant::now();
            let root = solve_root(problem, n, scheme)?;
            rows.push(TableRow {
                steps: n,
                scheme,
                root,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(ConvergenceTable { rows })
}

// ─── CSV export ─────────────────────────────────────────────────────────────

/// Header `j,t,b,y,z,A,K`; the terminal row leaves `z` empty.
pub fn write_path_csv<W: Write>(sample: &PathSample, mut out: W) -> io::Result<()> {
    out.write_all(b"j,t,b,y,z,A,K\n")?;
    for p in &sample.points {
        write_point(&mut out, None, p)?;
    }
    Ok(())
}

/// Several samples concatenated, with a leading `path_id` column.
pub fn write_paths_csv<W: Write>(samples: &[PathSample], mut out: W) -> io::Result<()> {
    out.write_all(b"path_id,j,t,b,y,z,A,K\n")?;
    for (id, sample) in samples.iter().enumerate() {
        for p in &sample.points {
            write_point(&mut out, Some(id), p)?;
        }
    }
    Ok(())
}

fn write_point<W: Write>(out: &mut W, path_id: Option<usize>, p: &PathPoint) -> io::Result<()> {
    if let Some(id) = path_id {
        write!(out, "{id},")?;
    }
    match p.z {
        Some(z) => writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.step, p.time, p.b, p.y, z, p.cum_a, p.cum_k
        ),
        None => writeln!(
            out,
            "{},{},{},{},,{},{}",
            p.step, p.time, p.b, p.y, p.cum_a, p.cum_k
        ),
    }
}

/// Header `n,scheme,p,y0,seconds`; the `p` column is empty for
/// non-penalization schemes.
pub fn write_table_csv<W: Write>(table: &ConvergenceTable, mut out: W) -> io::Result<()> {
    out.write_all(b"n,scheme,p,y0,seconds\n")?;
    for row in &table.rows {
        let p = row
            .scheme
            .penalty()
            .map(|p| p.to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            row.steps,
            row.scheme.cli_name(),
            p,
            row.root,
            row.seconds
        )?;
    }
    Ok(())
}

/// Header `j,k,t,b,y`, all layers, layer-major then up-move order.
pub fn write_grid_csv<W: Write>(solution: &SolutionGrid, mut out: W) -> io::Result<()> {
    out.write_all(b"j,k,t,b,y\n")?;
    for layer in 0..=solution.steps() {
        write_grid_layer_rows(solution, layer, &mut out)?;
    }
    Ok(())
}

/// Header `j,k,t,b,y`, a single layer.
pub fn write_grid_layer_csv<W: Write>(
    solution: &SolutionGrid,
    layer: usize,
    mut out: W,
) -> io::Result<()> {
    out.write_all(b"j,k,t,b,y\n")?;
    write_grid_layer_rows(solution, layer, &mut out)
}

fn write_grid_layer_rows<W: Write>(
    solution: &SolutionGrid,
    layer: usize,
    out: &mut W,
) -> io::Result<()> {
    let grid = solution.grid();
    let t = grid.time(layer);
    for up_moves in 0..=layer {
        let node = NodeIndex::new(layer, up_moves);
        writeln!(
            out,
            "{layer},{up_moves},{t},{},{}",
            grid.b_value(node),
            solution.y().value(node)
        )?;
    }
    Ok(())
}
