//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities (run with `--nocapture` to see them).
//!
//! Reference root values for the two-barrier problem with horizon 1,
//! generator `-5|y+z|-1`, payoff `|x|` and the parabolic barriers of the
//! `table5` preset are pinned below, together with the tolerances.

use std::fmt::Write as _;
use std::sync::LazyLock;

use rand_core::{RngCore, SeedableRng};
use rbsde::config::resolve_config;
use rbsde::lattice::{
    cond_expectation, discretize_barrier, z_from_children, BarrierSide, NodeIndex,
};
use rbsde::oracle::compare_with_recombining;
use rbsde::schemes::{picard_solve, PICARD_MAX_ITERATIONS, PICARD_TOLERANCE_SCALE};
use rbsde::sim::sample_path;
use rbsde::{
    solve_backward, solve_root, validate, BarrierSpec, GeneratorSpec, PointFn, Problem,
    SchemeKind, SolutionGrid, SurfaceFn, TerminalSpec,
};

/// Pinned reference: explicit reflected roots per step count.
const REFERENCE_EXPLICIT: [(usize, f64); 4] = [
    (400, -1.7312),
    (1000, -1.7142),
    (2000, -1.7084),
    (4000, -1.7055),
];

/// Pinned reference: implicit-explicit penalization roots per step count,
/// one per penalization parameter in `PENALTIES`.
const REFERENCE_PENALIZED: [(usize, [f64; 4]); 4] = [
    (400, [-1.8346, -1.7476, -1.7329, -1.7314]),
    (1000, [-1.8177, -1.7306, -1.7161, -1.7144]),
    (2000, [-1.8124, -1.7250, -1.7103, -1.7068]),
    (4000, [-1.8096, -1.7222, -1.7074, -1.7057]),
];

const PENALTIES: [f64; 4] = [20.0, 200.0, 2000.0, 2e4];

/// A reproduced cell must land within this distance of the reference value.
const CELL_TOLERANCE: f64 = 1e-3;

/// Cells between `CELL_TOLERANCE` and this bound are flagged for
/// investigation (scheme ambiguity in the reference) instead of failing.
const CELL_FLAG_LIMIT: f64 = 5e-3;

fn table5_problem() -> Problem {
    resolve_config("table5").unwrap().to_problem().unwrap()
}

fn fig1_problem() -> Problem {
    resolve_config("fig1").unwrap().to_problem().unwrap()
}

struct ComputedTable {
    /// `(n, explicit reflected root)`.
    explicit: Vec<(usize, f64)>,
    /// `(n, impexp penalization roots per penalty)`.
    penalized: Vec<(usize, [f64; 4])>,
}

static TABLE: LazyLock<ComputedTable> = LazyLock::new(|| {
    let problem = table5_problem();
    let mut explicit = Vec::new();
    let mut penalized = Vec::new();
    for (n, _) in REFERENCE_EXPLICIT {
        explicit.push((
            n,
            solve_root(&problem, n, SchemeKind::ExplicitReflected).unwrap(),
        ));
        let mut row = [0.0; 4];
        for (i, &penalty) in PENALTIES.iter().enumerate() {
            row[i] = solve_root(
                &problem,
                n,
                SchemeKind::ImplicitExplicitPenalization { penalty },
            )
            .unwrap();
        }
        penalized.push((n, row));
    }
    ComputedTable {
        explicit,
        penalized,
    }
});

#[test]
fn criterion_1_table_reproduction() {
    let table = &*TABLE;
    let mut flagged = Vec::new();
    let mut matched = 0usize;

    for ((n, computed), (_, reference)) in table.explicit.iter().zip(REFERENCE_EXPLICIT) {
        let gap = (computed - reference).abs();
        assert!(
            gap <= CELL_TOLERANCE,
            "explicit reflected n={n}: computed {computed}, reference {reference}, gap {gap:.2e}"
        );
        matched += 1;
    }

    let problem = table5_problem();
    for ((n, row), (_, reference_row)) in table.penalized.iter().zip(REFERENCE_PENALIZED) {
        for (i, (&computed, &reference)) in row.iter().zip(&reference_row).enumerate() {
            let gap = (computed - reference).abs();
            if gap <= CELL_TOLERANCE {
                matched += 1;
            } else if gap <= CELL_FLAG_LIMIT {
                // Investigate against the other penalization variant before
                // deciding the reference value is simply misprinted.
                let implicit = solve_root(
                    &problem,
                    *n,
                    SchemeKind::ImplicitPenalization {
                        penalty: PENALTIES[i],
                    },
                )
                .unwrap();
                flagged.push(format!(
                    "impexp n={n} p={}: computed {computed}, reference {reference}, gap {gap:.2e} \
                     (implicit variant gives {implicit})",
                    PENALTIES[i]
                ));
            } else {
                panic!(
                    "impexp n={n} p={}: computed {computed}, reference {reference}, gap {gap:.2e} > {CELL_FLAG_LIMIT}",
                    PENALTIES[i]
                );
            }
        }
    }

    let mut line = format!(
        "criterion 1 (table reproduction): PASS - {matched}/20 cells within {CELL_TOLERANCE:.0e}"
    );
    if !flagged.is_empty() {
        write!(line, ", {} flagged for investigation:", flagged.len()).unwrap();
        for f in &flagged {
            write!(line, "\n    flagged: {f}").unwrap();
        }
    }
    println!("{line}");
}

#[test]
fn criterion_2_monotone_approach() {
    let table = &*TABLE;
    for ((n, row), (_, explicit)) in table.penalized.iter().zip(&table.explicit) {
        for pair in row.windows(2) {
            assert!(
                pair[1] > pair[0],
                "n={n}: penalized roots not strictly increasing in p: {row:?}"
            );
        }
        for &value in row {
            assert!(
                value <= explicit + 1e-3,
                "n={n}: penalized root {value} exceeds reflected root {explicit} + 1e-3"
            );
        }
    }
    println!(
        "criterion 2 (monotone approach): PASS - penalized roots strictly increase in p and stay below the reflected root at every n"
    );
}

#[test]
fn criterion_3_penalization_rate() {
    let table = &*TABLE;
    let (_, explicit_400) = table.explicit[0];
    let (_, row_400) = table.penalized[0];
    let gaps: Vec<f64> = row_400.iter().map(|v| (v - explicit_400).abs()).collect();
    let bound = 1.0 / 10.0f64.sqrt();
    let r1 = gaps[1] / gaps[0];
    let r2 = gaps[2] / gaps[1];
    assert!(
        r1 <= bound && r2 <= bound,
        "penalization gaps at n=400 shrink too slowly: ratios {r1:.4}, {r2:.4} (bound {bound:.4})"
    );
    println!(
        "criterion 3 (penalization rate): PASS - gap ratios per p-decade at n=400: {r1:.4}, {r2:.4} <= {bound:.4}"
    );
}

// ─── Randomized problem pool ────────────────────────────────────────────────

struct PoolRng(rand_chacha::ChaCha8Rng);

impl PoolRng {
    fn new(seed: u64) -> Self {
        PoolRng(rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    fn unit(&mut self) -> f64 {
        self.0.next_u32() as f64 / u32::MAX as f64
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn pick(&mut self, len: usize) -> usize {
        (self.0.next_u32() as usize) % len
    }
}

const GENERATOR_POOL: [(&str, f64); 6] = [
    ("0", 0.0),
    ("-5*abs(y+z)-1", 5.0),
    ("y-z", 1.0),
    ("0.5*z-y+1", 1.0),
    ("min(y,z)+t", 1.0),
    ("abs(z)-abs(y)", 1.0),
];

const TERMINAL_POOL: [&str; 5] = ["abs(x)", "x", "max(x,0)", "min(abs(x),2)", "x/2+1"];

/// A problem with parabolic barriers separated by construction:
/// the lower one opens downward below `c1`, the upper one upward above
/// `c2 > c1`, and the drift terms are too small to close the gap.
fn random_problem(rng: &mut PoolRng, lower_absent: bool, upper_absent: bool) -> Problem {
    let (gen_src, mu) = GENERATOR_POOL[rng.pick(GENERATOR_POOL.len())];
    let terminal_src = TERMINAL_POOL[rng.pick(TERMINAL_POOL.len())];
    let c1 = rng.range(-3.0, -1.0);
    let c2 = c1 + rng.range(0.5, 3.0);
    let lower_src = format!(
        "{c1}+{}*t-{}*(x-{})^2",
        rng.range(-0.1, 0.1),
        rng.range(0.0, 2.0),
        rng.range(-1.0, 1.0)
    );
    let upper_src = format!(
        "{c2}+{}*t+{}*(x-{})^2",
        rng.range(-0.1, 0.1),
        rng.range(0.0, 2.0),
        rng.range(-1.0, 1.0)
    );
    let mut problem = Problem::new(
        1.0,
        GeneratorSpec::parse(gen_src, mu).unwrap(),
        TerminalSpec::Markovian(PointFn::parse(terminal_src).unwrap()),
    );
    if !lower_absent {
        problem = problem.with_lower(BarrierSpec::Functional(
            SurfaceFn::parse(&lower_src).unwrap(),
        ));
    }
    if !upper_absent {
        problem = problem.with_upper(BarrierSpec::Functional(
            SurfaceFn::parse(&upper_src).unwrap(),
        ));
    }
    problem
}

fn all_schemes(penalty: f64) -> [SchemeKind; 4] {
    [
        SchemeKind::ExplicitReflected,
        SchemeKind::ImplicitReflected,
        SchemeKind::ImplicitPenalization { penalty },
        SchemeKind::ImplicitExplicitPenalization { penalty },
    ]
}

#[test]
fn criterion_4_oracle_equivalence() {
    let mut rng = PoolRng::new(0x5eed_2024);
    let mut worst_overall: f64 = 0.0;
    for case in 0..10 {
        let n = [6, 10, 12][case % 3];
        let problem = random_problem(&mut rng, false, false);
        let report = validate(&problem, n);
        assert!(report.is_ok(), "case {case}: {report}");
        let penalty = [15.0, 150.0][case % 2];
        for scheme in all_schemes(penalty) {
            let worst = compare_with_recombining(&problem, n, scheme).unwrap();
            assert!(
                worst <= 1e-10,
                "case {case} {scheme} n={n}: discrepancy {worst:e}"
            );
            if matches!(
                scheme,
                SchemeKind::ExplicitReflected | SchemeKind::ImplicitExplicitPenalization { .. }
            ) {
                assert_eq!(
                    worst, 0.0,
                    "case {case} {scheme} n={n}: explicit kernels must match bit for bit"
                );
            }
            worst_overall = worst_overall.max(worst);
        }
    }
    println!(
        "criterion 4 (oracle equivalence): PASS - 10 problems x 4 schemes, max node discrepancy {worst_overall:e}"
    );
}

/// Check every node of a solved grid against the per-node contract.
fn check_grid_invariants(problem: &Problem, solution: &SolutionGrid, scheme: SchemeKind) {
    let grid = solution.grid();
    let n = grid.steps();
    let lower = discretize_barrier(&problem.lower, grid, BarrierSide::Lower).unwrap();
    let upper = discretize_barrier(&problem.upper, grid, BarrierSide::Upper).unwrap();
    let implicit_g = matches!(
        scheme,
        SchemeKind::ImplicitReflected | SchemeKind::ImplicitPenalization { .. }
    );
    let penalty = scheme.penalty();

    for layer in 0..n {
        let t = grid.time(layer);
        for up_moves in 0..=layer {
            let node = NodeIndex::new(layer, up_moves);
            let y = solution.y().value(node);
            let z = solution.z().value(node);
            let a = solution.a().value(node);
            let k = solution.k().value(node);
            let y_up = solution.y().value(node.up_child());
            let y_down = solution.y().value(node.down_child());
            let lo = lower.value(node);
            let hi = upper.value(node);
            let scale = 1.0f64.max(y_up.abs()).max(y_down.abs());
            let tol = 1e-10 * scale;

            assert!(a >= 0.0 && k >= 0.0, "{scheme} {node}: negative force");
            assert!(a * k == 0.0, "{scheme} {node}: both forces active");

            match penalty {
                None => {
                    assert!(lo <= y && y <= hi, "{scheme} {node}: y = {y} outside [{lo}, {hi}]");
                    if lo.is_finite() {
                        assert!((y - lo).abs() * a <= tol, "{scheme} {node}: (y-L)a != 0");
                    } else {
                        assert_eq!(a, 0.0, "{scheme} {node}: force without barrier");
                    }
                    if hi.is_finite() {
                        assert!((y - hi).abs() * k <= tol, "{scheme} {node}: (y-U)k != 0");
                    } else {
                        assert_eq!(k, 0.0, "{scheme} {node}: force without barrier");
                    }
                }
                Some(p) => {
                    let pd = p * grid.delta();
                    let a_expect = pd * (-(y - lo)).max(0.0);
                    let k_expect = pd * (y - hi).max(0.0);
                    assert!(
                        (a - a_expect).abs() <= tol,
                        "{scheme} {node}: a = {a} vs p·delta·(y-L)⁻ = {a_expect}"
                    );
                    assert!(
                        (k - k_expect).abs() <= tol,
                        "{scheme} {node}: k = {k} vs p·delta·(y-U)⁺ = {k_expect}"
                    );
                }
            }

            // Two-branch step identity with the scheme's own g-argument.
            let e = cond_expectation(y_up, y_down);
            let z_check = z_from_children(grid, y_up, y_down);
            assert_eq!(z, z_check, "{scheme} {node}: stored z differs from stencil");
            let g_arg = if implicit_g { y } else { e };
            let g = problem.generator.eval(t, g_arg, z).unwrap();
            let step = g * grid.delta() + a - k;
            let up_branch = y_up + step - z * grid.sqrt_delta();
            let down_branch = y_down + step + z * grid.sqrt_delta();
            assert!(
                (y - up_branch).abs() <= tol,
                "{scheme} {node}: up-branch residual {:e}",
                (y - up_branch).abs()
            );
            assert!(
                (y - down_branch).abs() <= tol,
                "{scheme} {node}: down-branch residual {:e}",
                (y - down_branch).abs()
            );
        }
    }
}

#[test]
fn criterion_5_invariant_suite() {
    let mut rng = PoolRng::new(0x5eed_0005);
    let mut nodes_checked = 0usize;
    for case in 0..20 {
        let n = [6, 8, 16, 31, 64][case % 5];
        let lower_absent = case % 7 == 3;
        let upper_absent = case % 5 == 4;
        let problem = random_problem(&mut rng, lower_absent, upper_absent);
        let report = validate(&problem, n);
        assert!(report.is_ok(), "case {case}: {report}");
        let penalty = [15.0, 150.0, 2000.0][case % 3];
        for scheme in all_schemes(penalty) {
            let solution = solve_backward(&problem, n, scheme).unwrap();
            check_grid_invariants(&problem, &solution, scheme);
            nodes_checked += n * (n + 1) / 2;
        }
    }
    println!(
        "criterion 5 (invariant suite): PASS - 20 problems x 4 schemes, {nodes_checked} nodes checked"
    );
}

// ─── One-barrier reference kernels (test-local) ─────────────────────────────

struct OneBarrierStep {
    y: f64,
    a: f64,
    k: f64,
}

fn one_barrier_reference(
    scheme: SchemeKind,
    generator: &GeneratorSpec,
    t: f64,
    delta: f64,
    e: f64,
    z: f64,
    lower: f64,
) -> OneBarrierStep {
    let tol = PICARD_TOLERANCE_SCALE * e.abs().max(1.0);
    match scheme {
        SchemeKind::ExplicitReflected => {
            let g = generator.eval(t, e, z).unwrap();
            let c = e + g * delta;
            OneBarrierStep {
                y: c.max(lower),
                a: (-(c - lower)).max(0.0),
                k: 0.0,
            }
        }
        SchemeKind::ImplicitExplicitPenalization { penalty } => {
            let g = generator.eval(t, e, z).unwrap();
            let c = e + g * delta;
            let pd = penalty * delta;
            let a = pd / (1.0 + pd) * (-(c - lower)).max(0.0);
            OneBarrierStep { y: c + a, a, k: 0.0 }
        }
        SchemeKind::ImplicitReflected => {
            let w = picard_solve(
                |y| Ok(e + generator.eval(t, y, z)? * delta),
                e,
                generator.mu() * delta,
                tol,
                PICARD_MAX_ITERATIONS,
            )
            .unwrap();
            if w < lower {
                let g_low = generator.eval(t, lower, z).unwrap();
                OneBarrierStep {
                    y: lower,
                    a: (-(e + g_low * delta - lower)).max(0.0),
                    k: 0.0,
                }
            } else {
                OneBarrierStep { y: w, a: 0.0, k: 0.0 }
            }
        }
        SchemeKind::ImplicitPenalization { penalty } => {
            let pd = penalty * delta;
            let interior = picard_solve(
                |y| Ok(e + generator.eval(t, y, z)? * delta),
                e,
                generator.mu() * delta,
                tol,
                PICARD_MAX_ITERATIONS,
            )
            .unwrap();
            let constrained = picard_solve(
                |y| Ok((e + generator.eval(t, y, z)? * delta + pd * lower) / (1.0 + pd)),
                lower,
                generator.mu() * delta / (1.0 + pd),
                tol,
                PICARD_MAX_ITERATIONS,
            )
            .unwrap();
            let y = if constrained < lower { constrained } else { interior };
            OneBarrierStep {
                y,
                a: pd * (-(y - lower)).max(0.0),
                k: 0.0,
            }
        }
    }
}

#[test]
fn criterion_6_degenerate_equivalence() {
    // Classical case: no barriers, payoff = walk value, zero generator.
    // With sqrt(delta) a power of two every quantity below is exact.
    let martingale = Problem::new(
        1.0,
        GeneratorSpec::zero(),
        TerminalSpec::Markovian(PointFn::from_fn(|x| x)),
    );
    for n in [16usize, 64] {
        for scheme in all_schemes(50.0) {
            let sol = solve_backward(&martingale, n, scheme).unwrap();
            for layer in 0..=n {
                for up_moves in 0..=layer {
                    let node = NodeIndex::new(layer, up_moves);
                    assert_eq!(
                        sol.y().value(node),
                        sol.grid().b_value(node),
                        "{scheme} n={n} {node}"
                    );
                    if layer < n {
                        assert_eq!(sol.z().value(node), 1.0, "{scheme} n={n} {node}");
                        assert_eq!(sol.a().value(node), 0.0);
                        assert_eq!(sol.k().value(node), 0.0);
                    }
                }
            }
        }
    }

    // One-barrier case: with the upper side absent, the two-barrier kernels
    // must reproduce the dedicated one-barrier formulas bit for bit.
    let mut rng = PoolRng::new(0x5eed_0006);
    for case in 0..4 {
        let n = 32;
        let problem = random_problem(&mut rng, false, true);
        assert!(problem.upper.is_absent());
        let penalty = [15.0, 150.0][case % 2];
        for scheme in all_schemes(penalty) {
            let sol = solve_backward(&problem, n, scheme).unwrap();
            let grid = sol.grid();
            let lower = discretize_barrier(&problem.lower, grid, BarrierSide::Lower).unwrap();
            for layer in 0..n {
                let t = grid.time(layer);
                for up_moves in 0..=layer {
                    let node = NodeIndex::new(layer, up_moves);
                    let e = cond_expectation(
                        sol.y().value(node.up_child()),
                        sol.y().value(node.down_child()),
                    );
                    let z = sol.z().value(node);
                    let reference = one_barrier_reference(
                        scheme,
                        &problem.generator,
                        t,
                        grid.delta(),
                        e,
                        z,
                        lower.value(node),
                    );
                    assert_eq!(
                        sol.y().value(node).to_bits(),
                        reference.y.to_bits(),
                        "{scheme} {node}: y differs from one-barrier kernel"
                    );
                    assert_eq!(sol.a().value(node).to_bits(), reference.a.to_bits());
                    assert_eq!(sol.k().value(node).to_bits(), reference.k.to_bits());
                }
            }
        }
    }

    println!(
        "criterion 6 (degenerate equivalence): PASS - martingale case exact for all schemes; upper-absent kernels bit-identical to one-barrier kernels"
    );
}

#[test]
fn criterion_7_scheme_gap_decay() {
    let problem = table5_problem();
    let mut gaps = Vec::new();
    for n in [400usize, 800, 1600] {
        let implicit = solve_root(&problem, n, SchemeKind::ImplicitReflected).unwrap();
        let explicit = solve_root(&problem, n, SchemeKind::ExplicitReflected).unwrap();
        gaps.push((n, (implicit - explicit).abs()));
    }
    for pair in gaps.windows(2) {
        assert!(
            pair[1].1 <= pair[0].1,
            "implicit/explicit gap grew under refinement: {gaps:?}"
        );
    }
    let last = gaps.last().unwrap().1;
    assert!(last < 5e-3, "gap at n=1600 is {last}, expected < 5e-3");
    let detail: Vec<String> = gaps.iter().map(|(n, g)| format!("n={n}: {g:.2e}")).collect();
    println!(
        "criterion 7 (scheme-gap decay): PASS - {}",
        detail.join(", ")
    );
}

#[test]
fn criterion_8_path_properties() {
    let problem = fig1_problem();
    let n = 400;
    let sol = solve_backward(&problem, n, SchemeKind::ExplicitReflected).unwrap();
    let grid = sol.grid();
    let lower = discretize_barrier(&problem.lower, grid, BarrierSide::Lower).unwrap();
    let upper = discretize_barrier(&problem.upper, grid, BarrierSide::Upper).unwrap();

    let mut touches = 0usize;
    for seed in 0..1000u64 {
        let sample = sample_path(&sol, seed);
        let mut prev_a = 0.0;
        let mut prev_k = 0.0;
        let mut ups = 0usize;
        for (step, point) in sample.points.iter().enumerate() {
            assert!(point.cum_a >= prev_a, "seed {seed}: A decreased");
            assert!(point.cum_k >= prev_k, "seed {seed}: K decreased");
            let a_inc = point.cum_a - prev_a;
            let k_inc = point.cum_k - prev_k;
            assert!(
                a_inc == 0.0 || k_inc == 0.0,
                "seed {seed} step {step}: both forces acted"
            );
            let node = NodeIndex::new(step, ups);
            if a_inc > 0.0 {
                assert!(
                    (point.y - lower.value(node)).abs() <= 1e-10,
                    "seed {seed} step {step}: upward force off the lower barrier"
                );
                touches += 1;
            }
            if k_inc > 0.0 {
                assert!(
                    (point.y - upper.value(node)).abs() <= 1e-10,
                    "seed {seed} step {step}: downward force off the upper barrier"
                );
                touches += 1;
            }
            prev_a = point.cum_a;
            prev_k = point.cum_k;
            if step < n {
                let next_b = sample.points[step + 1].b;
                if next_b > point.b {
                    ups += 1;
                }
            }
        }
    }
    assert!(touches > 0, "no barrier contact in 1000 paths; test is vacuous");
    println!(
        "criterion 8 (path properties): PASS - 1000 seeded paths, {touches} barrier contacts, forces monotone, disjoint, and on-barrier only"
    );
}
