//! Acceptance suite: eight numbered criteria, each reported as one PASS/FAIL
//! line on stdout. Oracles are computed here from closed forms or by
//! independent brute force, never through the library routine under test.

#![allow(clippy::too_many_arguments, clippy::type_complexity)]

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wkam::action::{finite_time_action, peierls_barrier, HorizonSettings, Scheme};
use wkam::barrier::{self, BarrierTolerances};
use wkam::characteristics::{integrate_generalized, minimal_selection, monotonicity_check, singular_persistence_check};
use wkam::homoclinic::{build_homoclinic, common_reachable_gradient, default_match_tol, omega_limit_distance, HomoclinicSettings};
use wkam::model::SymMat2;
use wkam::semiconcave::{energy_shell_residual, regularity_test, CovectorPolytope, EstimatorParams, SuperdiffEstimator};
use wkam::weakkam::{check_energy_condition, lift_v, solve_alpha_u, ScalarField, SolveReport, SolverSettings};
use wkam::{Covector, MechanicalSystem, Point, Result, TorusGrid};

const FLAT: &str = include_str!("../fixtures/flat2d.json");
const PENDULUM: &str = include_str!("../fixtures/pendulum.json");
const SEPARABLE: &str = include_str!("../fixtures/separable2d.json");
const DOUBLE_PENDULUM: &str = include_str!("../fixtures/double_pendulum.json");

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Outcome { passed, detail }
    }
}

fn system(json: &str) -> MechanicalSystem {
    MechanicalSystem::from_json_str(json).expect("fixture parses")
}

fn solve(sys: &MechanicalSystem, c: Covector, n: usize, dt: Option<f64>) -> Result<(ScalarField, SolveReport)> {
    let grid = TorusGrid::new(sys.dim(), n)?;
    let scheme = Scheme::for_system(sys, c, &grid, dt, None)?;
    solve_alpha_u(sys, c, grid, &scheme, &SolverSettings::default())
}

fn estimator(sys: &MechanicalSystem, u: &ScalarField) -> SuperdiffEstimator {
    let params = EstimatorParams::for_system(sys, u.alpha, &u.grid);
    SuperdiffEstimator::new(&lift_v(u, u.c), params)
}

fn torus_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn pendulum_potential(x: f64) -> f64 {
    (2.0 * PI * x).cos() - 1.0
}

/// `∫₀¹ √(2(α − V))` by composite Simpson.
fn rotation_momentum(alpha: f64) -> f64 {
    let m = 20_000;
    let f = |x: f64| (2.0 * (alpha - pendulum_potential(x))).max(0.0).sqrt();
    let h = 1.0 / m as f64;
    let mut s = f(0.0) + f(1.0);
    for k in 1..m {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
    }
    s * h / 3.0
}

/// α(c) of the pendulum above the plateau: the root of `∫√(2(α − V)) = c`.
fn pendulum_alpha_oracle(c: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 0.5 * c * c + 2.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rotation_momentum(mid) < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest shell residual over the reachable-gradient vertices of `count`
/// evenly strided nodes.
fn worst_shell_residual(sys: &MechanicalSystem, u: &ScalarField, count: usize) -> Result<(f64, usize)> {
    let est = estimator(sys, u);
    let stride = (u.grid.len() / count).max(1);
    let mut worst: f64 = 0.0;
    let mut sampled = 0;
    for i in (0..u.grid.len()).step_by(stride) {
        let x = u.grid.coord(i);
        for p in est.reachable_gradients(x)?.vertices() {
            worst = worst.max(energy_shell_residual(sys, u.alpha, x, *p));
        }
        sampled += 1;
    }
    Ok((worst, sampled))
}

fn criterion_flat() -> Result<Outcome> {
    let start = Instant::now();
    let sys = system(FLAT);
    let c = Covector::new(0.7, 0.0);
    let (u, report) = solve(&sys, c, 128, Some(0.1))?;
    let est = estimator(&sys, &u);
    let singular = est.singular_set();
    let x0 = [0.3, 0.6];
    let chi = integrate_generalized(&est, &sys, x0, 1.0, None)?;
    let h = u.grid.spacing();
    let straight = chi.nodes.iter().map(|n| ((n.x[0] - x0[0] - 0.7 * n.s).powi(2) + (n.x[1] - x0[1]).powi(2)).sqrt()).fold(0.0, f64::max);
    let mono = monotonicity_check(&chi, &sys);
    let secs = start.elapsed().as_secs_f64();
    let osc = u.max() - u.min();
    let passed = (report.alpha - 0.245).abs() <= 1e-3
        && osc <= 1e-3
        && singular.is_empty()
        && straight <= h
        && mono.steps > 0
        && (mono.mean_rate - 0.49).abs() <= 1e-3
        && (mono.min_rate - 0.49).abs() <= 1e-3
        && secs < 10.0;
    Ok(Outcome::new(
        passed,
        format!(
            "alpha {:.6}, osc(u) {osc:.2e}, singular nodes {}, max off-line {straight:.2e}, rate {:.4}..{:.4}, {secs:.1}s",
            report.alpha,
            singular.nodes.len(),
            mono.min_rate,
            mono.mean_rate
        ),
    ))
}

fn criterion_plateau() -> Result<Outcome> {
    let sys = system(PENDULUM);
    let mut worst_plateau: f64 = f64::NEG_INFINITY;
    let mut slowest: f64 = 0.0;
    for c in [0.0, 0.5, 1.0, 1.2] {
        let start = Instant::now();
        let (_, r) = solve(&sys, Covector::new(c, 0.0), 256, None)?;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        worst_plateau = worst_plateau.max(r.alpha);
    }
    let start = Instant::now();
    let (_, r) = solve(&sys, Covector::new(1.5, 0.0), 256, None)?;
    slowest = slowest.max(start.elapsed().as_secs_f64());
    let oracle = pendulum_alpha_oracle(1.5);
    let edge = rotation_momentum(0.0);
    let passed = worst_plateau <= 1e-3 && (r.alpha - oracle).abs() <= 1e-2 && (edge - 4.0 / PI).abs() < 1e-6 && slowest < 30.0;
    Ok(Outcome::new(
        passed,
        format!(
            "max plateau alpha {worst_plateau:.2e}, alpha(1.5) {:.6} vs oracle {oracle:.6}, c+ oracle {edge:.6}, slowest {slowest:.1}s",
            r.alpha
        ),
    ))
}

fn criterion_shock() -> Result<Outcome> {
    let sys = system(PENDULUM);
    let (u, _) = solve(&sys, Covector::ZERO, 256, None)?;
    let est = estimator(&sys, &u);
    let h = u.grid.spacing();
    let singular = est.singular_set();
    let nearest = singular.nodes.iter().map(|&i| torus_gap(u.grid.coord(i)[0], 0.5)).fold(f64::INFINITY, f64::min);
    let farthest = singular.nodes.iter().map(|&i| torus_gap(u.grid.coord(i)[0], 0.5)).fold(0.0, f64::max);
    let x = [0.5, 0.0];
    let reach = est.reachable_gradients(x)?;
    let verts = reach.vertices();
    let target = [-2.0, 2.0];
    let to_target = verts.iter().map(|p| target.iter().map(|t| (p.0[0] - t).abs()).fold(f64::INFINITY, f64::min));
    let from_target = target.iter().map(|t| verts.iter().map(|p| (p.0[0] - t).abs()).fold(f64::INFINITY, f64::min));
    let hausdorff = to_target.chain(from_target).fold(0.0, f64::max);
    let sel = minimal_selection(&est.superdifferential(x)?, &sys.metric_at(x));
    let passed = nearest <= h * (1.0 + 1e-9) && hausdorff <= 0.05 && sel.norm() < 0.1;
    let vs: Vec<String> = verts.iter().map(|p| format!("{:.4}", p.0[0])).collect();
    Ok(Outcome::new(
        passed,
        format!(
            "nearest singular node {nearest:.2e} from 0.5 (farthest {farthest:.2e}, h {h:.2e}), D* = {{{}}} (Hausdorff {hausdorff:.3e}), |p_sel| {:.2e}",
            vs.join(", "),
            sel.norm()
        ),
    ))
}

fn criterion_shell() -> Result<Outcome> {
    let pendulum = system(PENDULUM);
    let mut cases: Vec<(String, MechanicalSystem, Covector)> =
        vec![("flat".into(), system(FLAT), Covector::new(0.7, 0.0)), ("separable".into(), system(SEPARABLE), Covector::new(0.0, 0.8))];
    for c in [0.0, 0.5, 1.0, 1.2, 1.5] {
        cases.push((format!("pendulum c={c}"), pendulum.clone(), Covector::new(c, 0.0)));
    }
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, sys, c) in &cases {
        let mut line = Vec::new();
        for (n, tol) in [(128, 0.1), (256, 0.05)] {
            let (u, _) = solve(sys, *c, n, None)?;
            let (worst, sampled) = worst_shell_residual(sys, &u, 128)?;
            passed &= worst <= tol && sampled >= 100;
            line.push(format!("{worst:.3}@{n}"));
        }
        parts.push(format!("{name} {}", line.join("/")));
    }
    Ok(Outcome::new(passed, parts.join(", ")))
}

fn criterion_supercritical() -> Result<Outcome> {
    let start = Instant::now();
    let sys = system(SEPARABLE);
    let (u, report) = solve(&sys, Covector::new(0.0, 0.8), 128, None)?;
    let grid = u.grid;
    let h = grid.spacing();
    let energy = check_energy_condition(report.alpha, &sys, &grid, 0.0);
    let est = estimator(&sys, &u);
    let singular = est.singular_set();
    let off_line = singular.nodes.iter().map(|&i| torus_gap(grid.coord(i)[0], 0.5)).fold(0.0, f64::max);
    let chi = integrate_generalized(&est, &sys, [0.5, 0.25], 0.5, None)?;
    let drift = chi.nodes.iter().map(|n| torus_gap(n.x[0], 0.5)).fold(0.0, f64::max);
    let persistence = singular_persistence_check(&chi, est.params().tol_sing)?;
    let mono = monotonicity_check(&chi, &sys);
    let secs = start.elapsed().as_secs_f64();
    let passed = energy
        && !singular.is_empty()
        && off_line <= h * (1.0 + 1e-9)
        && drift <= h
        && persistence >= 0.95
        && (mono.mean_rate - 0.64).abs() <= 0.064
        && secs < 60.0;
    Ok(Outcome::new(
        passed,
        format!(
            "alpha {:.5}, energy condition {energy}, singular set {} nodes within {off_line:.2e} of x1=0.5, arc drift {drift:.2e}, persistence {persistence:.3}, rate {:.4}, {secs:.1}s",
            report.alpha,
            singular.nodes.len(),
            mono.mean_rate
        ),
    ))
}

fn criterion_barrier() -> Result<Outcome> {
    let sys = system(PENDULUM);
    let c = Covector::ZERO;
    let grid = TorusGrid::new(1, 256)?;
    let scheme = Scheme::for_system(&sys, c, &grid, None, None)?;
    let (u, report) = solve_alpha_u(&sys, c, grid, &scheme, &SolverSettings::default())?;
    let h = peierls_barrier(&sys, c, grid, report.alpha, &scheme, &HorizonSettings::default())?;
    let data = barrier::analyze(&h, &BarrierTolerances::default())?;
    let b = &data.barrier;
    let (arg, max_b) = b.values.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let at_zero = b.values[grid.nearest_node([0.0, 0.0])];
    let argmax = grid.coord(arg)[0];
    let pair = data.pair.as_ref().expect("single Aubry class gives a conjugate pair");
    let x: Point = [0.5, 0.0];
    let params = EstimatorParams::for_system(&sys, u.alpha, &grid);
    let common = common_reachable_gradient(&pair.minus, &pair.plus, x, params, default_match_tol(&sys, u.alpha, &grid))?;
    let mut detail = format!("min B* {:.2e}, B*(0) {at_zero:.2e}, max B* {max_b:.5} at {argmax:.4} (4/pi = {:.5})", b.min(), 4.0 / PI);
    let mut passed =
        b.min() >= -2e-2 && at_zero <= 2e-2 && (max_b - 4.0 / PI).abs() <= 2e-2 && torus_gap(argmax, 0.5) <= grid.spacing() * (1.0 + 1e-9);
    match common {
        None => {
            passed = false;
            detail.push_str(", no common reachable gradient at 0.5");
        }
        Some(p) => {
            let mut orbit = build_homoclinic(&sys, &pair.minus, &pair.plus, x, p, &HomoclinicSettings::default())?;
            let (d1, d2) = omega_limit_distance(&orbit, &grid, &data.aubry_nodes);
            orbit.endpoint_distances = Some((d1, d2));
            passed &= orbit.horizon == 20.0 && orbit.energy_drift < 1e-6 && orbit.gluing_defect < 1e-3 && d1 <= 0.05 && d2 <= 0.05;
            detail.push_str(&format!(
                ", common p {:.4}, drift {:.1e}, gluing {:.1e}, endpoints {d1:.1e}/{d2:.1e} at T={}",
                p.0[0], orbit.energy_drift, orbit.gluing_defect, orbit.horizon
            ));
        }
    }
    Ok(Outcome::new(passed, detail))
}

/// Midpoint one-step cost written out from the closed forms of each test system.
fn oracle_step_cost(
    metric: &dyn Fn(Point) -> SymMat2,
    potential: &dyn Fn(Point) -> f64,
    dim: usize,
    c: [f64; 2],
    y: Point,
    x: Point,
    t: f64,
    v_cap: f64,
) -> f64 {
    let mut d = [0.0; 2];
    for k in 0..dim {
        let raw = (x[k] - y[k]).rem_euclid(1.0);
        d[k] = if raw >= 0.5 { raw - 1.0 } else { raw };
    }
    if (d[0] * d[0] + d[1] * d[1]).sqrt() > v_cap * t * (1.0 + 1e-12) {
        return f64::INFINITY;
    }
    let m = [y[0] + 0.5 * d[0], y[1] + 0.5 * d[1]];
    let q = [d[0] / t, d[1] / t];
    let a = metric(m);
    let kinetic = if dim == 1 {
        0.5 * q[0] * q[0] / a.a11
    } else {
        let det = a.a11 * a.a22 - a.a12 * a.a12;
        0.5 * (a.a22 * q[0] * q[0] - 2.0 * a.a12 * q[0] * q[1] + a.a11 * q[1] * q[1]) / det
    };
    t * (kinetic - potential(m) - c[0] * q[0] - c[1] * q[1])
}

/// `n_steps` Bellman sweeps `w(x) ← min_y w(y) + cost(y, x)` from each source.
fn bellman_oracle(
    metric: &dyn Fn(Point) -> SymMat2,
    potential: &dyn Fn(Point) -> f64,
    dim: usize,
    n: usize,
    c: [f64; 2],
    t: f64,
    n_steps: usize,
    v_cap: f64,
) -> Vec<f64> {
    let len = n.pow(dim as u32);
    let coord = |i: usize| if dim == 1 { [i as f64 / n as f64, 0.0] } else { [(i % n) as f64 / n as f64, (i / n) as f64 / n as f64] };
    let dt = t / n_steps as f64;
    let mut step = vec![0.0; len * len];
    for y in 0..len {
        for x in 0..len {
            step[y * len + x] = oracle_step_cost(metric, potential, dim, c, coord(y), coord(x), dt, v_cap);
        }
    }
    let mut out = vec![0.0; len * len];
    for src in 0..len {
        let mut w: Vec<f64> = step[src * len..(src + 1) * len].to_vec();
        for _ in 1..n_steps {
            w = (0..len).map(|x| (0..len).map(|y| w[y] + step[y * len + x]).fold(f64::INFINITY, f64::min)).collect();
        }
        out[src * len..(src + 1) * len].copy_from_slice(&w);
    }
    out
}

/// Minimum of `⟨A p, p⟩` over the hull by dense sampling of every edge, with
/// the hull taken to contain the origin when some triangle of its points does.
fn dense_min_norm(points: &[Covector], a: &SymMat2) -> f64 {
    let q = |p: [f64; 2]| a.a11 * p[0] * p[0] + 2.0 * a.a12 * p[0] * p[1] + a.a22 * p[1] * p[1];
    let samples = 20_000;
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i..points.len() {
            let (u, v) = (points[i].0, points[j].0);
            for k in 0..=samples {
                let s = k as f64 / samples as f64;
                best = best.min(q([u[0] + s * (v[0] - u[0]), u[1] + s * (v[1] - u[1])]));
            }
        }
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            for k in j + 1..points.len() {
                let (p, r, s) = (points[i].0, points[j].0, points[k].0);
                // Degenerate triangles are covered by the edge samples.
                if cross(p, r, s).abs() < 1e-12 {
                    continue;
                }
                let signs = [cross(p, r, [0.0; 2]), cross(r, s, [0.0; 2]), cross(s, p, [0.0; 2])];
                if signs.iter().all(|&v| v >= 0.0) || signs.iter().all(|&v| v <= 0.0) {
                    best = 0.0;
                }
            }
        }
    }
    best
}

fn criterion_oracles() -> Result<Outcome> {
    let pendulum = system(PENDULUM);
    let double = system(DOUBLE_PENDULUM);
    let unit = |_: Point| SymMat2::IDENTITY;
    let pendulum_v = |x: Point| pendulum_potential(x[0]);
    let double_metric = |x: Point| SymMat2 { a11: 1.0, a12: 0.3 * (2.0 * PI * (x[0] - x[1])).cos(), a22: 1.0 };
    let double_v = |x: Point| (2.0 * PI * x[0]).cos() + 0.5 * (2.0 * PI * x[1]).cos() - 1.5;
    let mut worst_dp: f64 = 0.0;
    let cases: [(&MechanicalSystem, &dyn Fn(Point) -> SymMat2, &dyn Fn(Point) -> f64, [f64; 2], f64); 3] = [
        (&pendulum, &unit, &pendulum_v, [0.0, 0.0], 4.0),
        (&pendulum, &unit, &pendulum_v, [0.6, 0.0], 2.5),
        (&double, &double_metric, &double_v, [0.3, -0.2], 3.0),
    ];
    for (sys, metric, potential, c, v_cap) in cases {
        let grid = TorusGrid::new(sys.dim(), 16)?;
        let k = finite_time_action(sys, Covector(c), grid, 0.4, 4, v_cap)?;
        let oracle = bellman_oracle(metric, potential, sys.dim(), 16, c, 0.4, 4, v_cap);
        for src in 0..grid.len() {
            for dst in 0..grid.len() {
                let (a, b) = (k.cost(src, dst), oracle[src * grid.len() + dst]);
                let diff = if a.is_infinite() && b.is_infinite() && a == b { 0.0 } else { (a - b).abs() };
                worst_dp = worst_dp.max(diff);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst_sel: f64 = 0.0;
    for trial in 0..500 {
        let dim = if trial % 5 == 0 { 1 } else { 2 };
        let count = rng.gen_range(1..=7);
        let points: Vec<Covector> = (0..count)
            .map(|_| {
                let p = Covector::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                if dim == 1 {
                    Covector::new(p.0[0], 0.0)
                } else {
                    p
                }
            })
            .collect();
        let (l1, l2, theta) = (rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0), rng.gen_range(0.0..PI));
        let (cs, sn) = (theta.cos(), theta.sin());
        let a = if dim == 1 {
            SymMat2 { a11: l1, a12: 0.0, a22: 1.0 }
        } else {
            SymMat2 { a11: l1 * cs * cs + l2 * sn * sn, a12: (l1 - l2) * cs * sn, a22: l1 * sn * sn + l2 * cs * cs }
        };
        let poly = CovectorPolytope::from_points(&points, dim).expect("nonempty point set");
        let sel = minimal_selection(&poly, &a);
        let value = a.quad(sel);
        let oracle = dense_min_norm(&points, &a);
        let inside = poly.distance_to(sel);
        worst_sel = worst_sel.max((value - oracle).abs()).max(inside);
    }
    let passed = worst_dp <= 1e-9 && worst_sel <= 1e-6;
    Ok(Outcome::new(
        passed,
        format!("max |finite_time_action - Bellman| {worst_dp:.2e}, max |selection - dense sample| {worst_sel:.2e} over 500 polytopes"),
    ))
}

/// `v = x₁²` for `x₁ ≤ 0` and `1/(x₁+1) − 1` for `x₁ > 0`, centered at the origin.
fn kinked_example(x: Point) -> f64 {
    let s = if x[0] >= 0.5 { x[0] - 1.0 } else { x[0] };
    if s <= 0.0 {
        s * s
    } else {
        1.0 / (s + 1.0) - 1.0
    }
}

fn criterion_example() -> Result<Outcome> {
    let grid = TorusGrid::new(2, 128)?;
    let field = ScalarField::sample(grid, kinked_example)?;
    let est = SuperdiffEstimator::new(&lift_v(&field, Covector::ZERO), EstimatorParams::from_shell_scale(1.0, &grid));
    let sup = est.superdifferential([0.0, 0.0])?;
    let segment = CovectorPolytope::from_points(&[Covector::new(-1.0, 0.0), Covector::ZERO], 2).expect("segment");
    let dist = sup.hausdorff(&segment);
    let regular = regularity_test(&sup, 1e-9).regular;
    let passed = dist <= 0.05 && !regular;
    let vs: Vec<String> = sup.vertices().iter().map(|p| format!("({:.4}, {:.4})", p.0[0], p.0[1])).collect();
    Ok(Outcome::new(passed, format!("D+v(0,0) vertices [{}], Hausdorff {dist:.3e}, regular {regular}", vs.join(", "))))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Result<Outcome>); 8] = [
        ("flat exactness", criterion_flat),
        ("pendulum critical plateau", criterion_plateau),
        ("pendulum shock", criterion_shock),
        ("energy shell", criterion_shell),
        ("supercritical propagation", criterion_supercritical),
        ("barrier and homoclinic orbit", criterion_barrier),
        ("oracle equivalence", criterion_oracles),
        ("kinked 2D example", criterion_example),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let outcome = run().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        // Written past the test harness capture so the report shows on success too.
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "[{tag}] {}. {name}: {}", k + 1, outcome.detail);
        let _ = out.flush();
        if !outcome.passed {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
