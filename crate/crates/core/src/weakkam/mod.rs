//! `α(c)` and weak KAM solutions as fixed points of the discrete
//! Lax-Oleinik operator, plus the lift `v = u + ⟨c, ·⟩`.

mod field;

pub use field::{lift_v, FieldKind, LiftedField, ScalarField};

use serde::Serialize;

use crate::action::{CostMatrix, Scheme};
use crate::error::{Error, Result};
use crate::model::{min_displacement, norm, Covector, MechanicalSystem, Point, TorusGrid};

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub alpha: f64,
    pub iterations: usize,
    pub residual: f64,
    pub semiconcavity_estimate: f64,
    pub dt: f64,
    pub v_cap: f64,
    /// Some minimizing step used the outermost stencil ring, so the velocity
    /// cap may have been active.
    pub cap_saturated: bool,
}

#[derive(Clone, Debug)]
pub struct SolverSettings {
    pub tol_fp: f64,
    pub max_iter: usize,
    /// Relaxation weight of the first iterations; `None` starts undamped and
    /// switches to `0.5` when the oscillation stops decreasing, which breaks
    /// the periodic regimes of min-plus power iteration.
    pub damping: Option<f64>,
    /// Initial field (defaults to `u ≡ 0`).
    pub initial: Option<Vec<f64>>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tol_fp: 1e-9, max_iter: 20_000, damping: None, initial: None }
    }
}

/// `(Tu)(x) = min_y u(y) + K[y][x]`.
pub fn lax_oleinik_step(u: &ScalarField, k: &CostMatrix) -> Result<ScalarField> {
    u.grid.check_same(k.grid())?;
    let mut out = u.clone();
    out.values = k.min_plus_apply(&u.values);
    out.kind = FieldKind::Generic;
    out.residual = None;
    Ok(out)
}

/// Forward operator `(Ťu)(x) = max_y u(y) − K[x][y]`.
pub fn forward_lax_oleinik_step(u: &ScalarField, k: &CostMatrix) -> Result<ScalarField> {
    u.grid.check_same(k.grid())?;
    let mut out = u.clone();
    out.values = k.max_minus_apply(&u.values);
    out.kind = FieldKind::Generic;
    out.residual = None;
    Ok(out)
}

#[derive(Clone, Copy, PartialEq)]
enum Direction {
    Backward,
    Forward,
}

struct Iterate {
    values: Vec<f64>,
    shift: f64,
    oscillation: f64,
    iterations: usize,
}

fn iterate(k: &CostMatrix, direction: Direction, settings: &SolverSettings) -> Result<Iterate> {
    let len = k.grid().len();
    let mut u = match &settings.initial {
        Some(init) if init.len() == len => init.clone(),
        Some(init) => return Err(Error::GridMismatch(format!("initial field has {} values, grid has {len}", init.len()))),
        None => vec![0.0; len],
    };
    let mut theta = settings.damping.unwrap_or(1.0);
    let adaptive = settings.damping.is_none();
    let mut best = f64::INFINITY;
    let mut best_at = 0usize;
    let mut oscillation = f64::INFINITY;
    for it in 1..=settings.max_iter {
        let w = match direction {
            Direction::Backward => k.min_plus_apply(&u),
            Direction::Forward => k.max_minus_apply(&u),
        };
        let (lo, hi) = w.iter().zip(&u).map(|(a, b)| a - b).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
        oscillation = hi - lo;
        let shift = if direction == Direction::Backward { hi } else { lo };
        if !oscillation.is_finite() {
            return Err(Error::NoConvergence { iterations: it, oscillation });
        }
        if oscillation < settings.tol_fp {
            return Ok(Iterate { values: u, shift, oscillation, iterations: it });
        }
        if oscillation < 0.5 * best {
            best = oscillation;
            best_at = it;
        } else if adaptive && theta == 1.0 && it - best_at > 50 {
            theta = 0.5;
        }
        for (ui, wi) in u.iter_mut().zip(&w) {
            *ui += theta * (wi - shift - *ui);
        }
        let anchor = match direction {
            Direction::Backward => u.iter().copied().fold(f64::INFINITY, f64::min),
            Direction::Forward => u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        u.iter_mut().for_each(|x| *x -= anchor);
    }
    Err(Error::NoConvergence { iterations: settings.max_iter, oscillation })
}

fn cap_saturated(k: &CostMatrix, values: &[f64]) -> bool {
    let Some(radius) = k.stencil_radius() else {
        return false;
    };
    let grid = k.grid();
    let h = grid.spacing();
    if radius + h >= 0.5 {
        // The stencil already spans the whole torus.
        return false;
    }
    let (_, argmin) = k.min_plus_apply_argmin(values);
    argmin.iter().enumerate().any(|(x, &y)| norm(min_displacement(grid.coord(y), grid.coord(x))) > radius - h)
}

/// Backward weak KAM solution `u_c` (normalized by `min u = 0`) and `α(c)`.
pub fn solve_alpha_u(
    sys: &MechanicalSystem,
    c: Covector,
    grid: TorusGrid,
    scheme: &Scheme,
    settings: &SolverSettings,
) -> Result<(ScalarField, SolveReport)> {
    if !(scheme.dt <= 0.5) {
        return Err(Error::InvalidTimeStep(scheme.dt));
    }
    let k = CostMatrix::one_step(sys, c, grid, scheme)?;
    let it = iterate(&k, Direction::Backward, settings)?;
    let alpha = -it.shift / scheme.dt;
    let saturated = cap_saturated(&k, &it.values);
    let mut field = ScalarField::new(grid, it.values, FieldKind::BackwardSolution)?.with_meta(c, alpha);
    field.residual = Some(it.oscillation);
    let report = SolveReport {
        alpha,
        iterations: it.iterations,
        residual: it.oscillation,
        semiconcavity_estimate: field.max_second_difference(),
        dt: scheme.dt,
        v_cap: scheme.v_cap,
        cap_saturated: saturated,
    };
    Ok((field, report))
}

/// Forward solution `u⁺` (normalized by `max u⁺ = 0`). When `expected_alpha`
/// is given, the forward `α` must agree with it within `2·tol_fp/Δ`.
pub fn solve_forward(
    sys: &MechanicalSystem,
    c: Covector,
    grid: TorusGrid,
    scheme: &Scheme,
    settings: &SolverSettings,
    expected_alpha: Option<f64>,
) -> Result<(ScalarField, SolveReport)> {
    if !(scheme.dt <= 0.5) {
        return Err(Error::InvalidTimeStep(scheme.dt));
    }
    let k = CostMatrix::one_step(sys, c, grid, scheme)?;
    let it = iterate(&k, Direction::Forward, settings)?;
    let alpha = it.shift / scheme.dt;
    if let Some(backward) = expected_alpha {
        if (alpha - backward).abs() > 2.0 * settings.tol_fp / scheme.dt {
            return Err(Error::AlphaMismatch { backward, forward: alpha });
        }
    }
    let mut field = ScalarField::new(grid, it.values, FieldKind::ForwardSolution)?.with_meta(c, alpha);
    field.residual = Some(it.oscillation);
    let mut neg = field.clone();
    neg.values.iter_mut().for_each(|v| *v = -*v);
    let report = SolveReport {
        alpha,
        iterations: it.iterations,
        residual: it.oscillation,
        semiconcavity_estimate: neg.max_second_difference(),
        dt: scheme.dt,
        v_cap: scheme.v_cap,
        cap_saturated: false,
    };
    Ok((field, report))
}

/// `‖T_Δ u + αΔ − u‖_∞` for the backward operator.
pub fn fixed_point_residual(u: &ScalarField, k: &CostMatrix, alpha: f64) -> Result<f64> {
    let tu = lax_oleinik_step(u, k)?;
    Ok(tu.values.iter().zip(&u.values).map(|(t, v)| (t + alpha * k.t_step() - v).abs()).fold(0.0, f64::max))
}

/// `u(γ(b)) − u(γ(a)) − ∫ L_c(γ, γ̇) − α(b − a)` along a polyline with times,
/// by the trapezoid rule on each segment. Nonpositive (up to quadrature error)
/// for subsolutions.
pub fn check_domination(u: &ScalarField, sys: &MechanicalSystem, c: Covector, alpha: f64, arc: &[(f64, Point)]) -> Result<f64> {
    if arc.len() < 2 {
        return Err(Error::InvalidArgument("an arc needs at least two nodes".into()));
    }
    let mut action = 0.0;
    for w in arc.windows(2) {
        let ((t0, x0), (t1, x1)) = (w[0], w[1]);
        let dt = t1 - t0;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument("arc times must increase".into()));
        }
        let q = Covector([(x1[0] - x0[0]) / dt, (x1[1] - x0[1]) / dt]);
        action += 0.5 * dt * (sys.lagrangian_c(c, x0, q) + sys.lagrangian_c(c, x1, q));
    }
    let (ta, xa) = arc[0];
    let (tb, xb) = arc[arc.len() - 1];
    Ok(u.interpolate(xb) - u.interpolate(xa) - action - alpha * (tb - ta))
}

/// True iff `α` exceeds the grid maximum of `V` by more than `margin`.
pub fn check_energy_condition(alpha: f64, sys: &MechanicalSystem, grid: &TorusGrid, margin: f64) -> bool {
    alpha > sys.max_potential_on(grid) + margin
}
