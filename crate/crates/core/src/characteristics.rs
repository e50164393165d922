//! Generalized characteristics of weak KAM solutions, the Hamiltonian flow,
//! and calibration checks of backward orbits.
//!
//! Positions of arcs and orbits live on the covering space: they are never
//! wrapped, so `v = u + ⟨c, x⟩` can be read along them directly.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{wrap, Covector, MechanicalSystem, Point, SymMat2, TorusGrid};
use crate::semiconcave::{regularity_test, shell_scale, CovectorPolytope, SuperdiffEstimator};
use crate::weakkam::LiftedField;

/// Below this fraction of the shell scale a selected covector counts as zero.
pub const ZERO_SELECTION_FACTOR: f64 = 0.05;

/// Unique minimizer of `½⟨A q, q⟩` over the hull.
pub fn minimal_selection(poly: &CovectorPolytope, a: &SymMat2) -> Covector {
    poly.min_norm_point(a)
}

/// One node of a generalized characteristic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CharNode {
    pub s: f64,
    /// Position on the covering space.
    pub x: Point,
    /// Minimal selection of the superdifferential at the nearest grid node.
    pub p_sel: Covector,
    /// `v(x)`.
    pub v: f64,
    /// Diameter of the superdifferential estimate.
    pub diam: f64,
    /// Distance from the origin to the superdifferential estimate (0 when inside).
    pub margin: f64,
    /// Whether the arc moves from this node on.
    pub moving: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GeneralizedCharacteristic {
    pub nodes: Vec<CharNode>,
    pub ds: f64,
    /// Time at which the selection vanished; the arc is constant afterwards.
    pub stalled_at: Option<f64>,
}

impl GeneralizedCharacteristic {
    /// Largest distance of a node from the start, on the covering space.
    pub fn excursion(&self) -> f64 {
        let x0 = self.nodes[0].x;
        self.nodes.iter().map(|n| ((n.x[0] - x0[0]).powi(2) + (n.x[1] - x0[1]).powi(2)).sqrt()).fold(0.0, f64::max)
    }

    /// CSV rows `s,x0[,x1],p0[,p1],v,diam`.
    pub fn write_csv(&self, out: &mut impl Write, dim: usize) -> Result<()> {
        if dim == 1 {
            writeln!(out, "s,x,p,v,diam")?;
        } else {
            writeln!(out, "s,x0,x1,p0,p1,v,diam")?;
        }
        for n in &self.nodes {
            if dim == 1 {
                writeln!(out, "{},{},{},{},{}", n.s, n.x[0], n.p_sel.0[0], n.v, n.diam)?;
            } else {
                writeln!(out, "{},{},{},{},{},{},{}", n.s, n.x[0], n.x[1], n.p_sel.0[0], n.p_sel.0[1], n.v, n.diam)?;
            }
        }
        Ok(())
    }
}

/// Largest speed `|A(x)p|` on the energy shell of `α`.
pub fn shell_speed(sys: &MechanicalSystem, alpha: f64, grid: &TorusGrid) -> f64 {
    sys.speed_bound(alpha, grid)
}

/// Explicit Euler steps `x ← x + ds·A(x)p_sel(x)` from `x0` up to time `tau`,
/// with `p_sel` the minimal selection of the superdifferential at the grid
/// node nearest `x`. `ds` defaults to `h / speed` with `speed` the largest
/// shell speed, which is also its upper limit.
pub fn integrate_generalized(
    est: &SuperdiffEstimator,
    sys: &MechanicalSystem,
    x0: Point,
    tau: f64,
    ds: Option<f64>,
) -> Result<GeneralizedCharacteristic> {
    let grid = *est.grid();
    let field = est.field();
    let alpha = field.u.alpha;
    let speed = shell_speed(sys, alpha, &grid).max(1e-12);
    let ds_max = grid.spacing() / speed;
    let ds = ds.unwrap_or(ds_max);
    if !(ds > 0.0) || ds > ds_max * (1.0 + 1e-9) {
        return Err(Error::Precondition(format!("step {ds} outside (0, h/speed = {ds_max}]")));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be finite and nonnegative, got {tau}")));
    }
    let zero = ZERO_SELECTION_FACTOR * shell_scale(sys, alpha, &grid);
    let steps = (tau / ds * (1.0 + 1e-12)).floor() as usize;
    let mut x = sys.project_point(x0);
    let mut nodes = Vec::with_capacity(steps + 1);
    let mut stalled_at = None;
    let mut cached: Option<(usize, CovectorPolytope)> = None;
    for k in 0..=steps {
        let s = k as f64 * ds;
        let idx = grid.nearest_node(wrap(x));
        let poly = match &cached {
            Some((i, p)) if *i == idx => p.clone(),
            _ => est.node_superdifferential(idx)?,
        };
        let a = sys.metric_at(x);
        let p_sel = minimal_selection(&poly, &a);
        let moving = stalled_at.is_none() && p_sel.norm() >= zero;
        if !moving && stalled_at.is_none() {
            stalled_at = Some(s);
        }
        nodes.push(CharNode { s, x, p_sel, v: field.value(x), diam: poly.diameter(), margin: regularity_test(&poly, 0.0).margin, moving });
        if moving {
            let step = a.apply(p_sel);
            x = sys.project_point([x[0] + ds * step.0[0], x[1] + ds * step.0[1]]);
        }
        cached = Some((idx, poly));
    }
    Ok(GeneralizedCharacteristic { nodes, ds, stalled_at })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Monotonicity {
    /// `max(0, max_k ⟨p_k, A p_k⟩ − rate_k)` over moving steps.
    pub worst_defect: f64,
    pub mean_rate: f64,
    pub min_rate: f64,
    pub steps: usize,
}

/// Compares the growth rate of `v` along each moving step with `⟨p_sel, A p_sel⟩`.
pub fn monotonicity_check(chi: &GeneralizedCharacteristic, sys: &MechanicalSystem) -> Monotonicity {
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    let mut min_rate = f64::INFINITY;
    let mut steps = 0;
    for w in chi.nodes.windows(2) {
        if !w[0].moving {
            continue;
        }
        let rate = (w[1].v - w[0].v) / chi.ds;
        let expected = sys.metric_at(w[0].x).quad(w[0].p_sel);
        worst = worst.max(expected - rate);
        sum += rate;
        min_rate = min_rate.min(rate);
        steps += 1;
    }
    Monotonicity {
        worst_defect: worst,
        mean_rate: if steps > 0 { sum / steps as f64 } else { 0.0 },
        min_rate: if steps > 0 { min_rate } else { 0.0 },
        steps,
    }
}

/// Fraction of arc nodes whose superdifferential diameter exceeds `tol_sing`.
/// The starting node must itself be singular.
pub fn singular_persistence_check(chi: &GeneralizedCharacteristic, tol_sing: f64) -> Result<f64> {
    let first = chi.nodes.first().ok_or_else(|| Error::Precondition("empty characteristic".into()))?;
    if first.diam <= tol_sing {
        return Err(Error::Precondition(format!("starting point is not singular (diameter {} ≤ {tol_sing})", first.diam)));
    }
    let count = chi.nodes.iter().filter(|n| n.diam > tol_sing).count();
    Ok(count as f64 / chi.nodes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSettings {
    pub dt: f64,
    /// Tolerated energy deviation, both along the output and per raw step.
    pub e_tol: f64,
    /// Rescale `p` after every step so that `H` keeps its initial value.
    pub project_energy: bool,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings { dt: 1e-3, e_tol: 1e-6, project_energy: true }
    }
}

/// Samples of an orbit `(x(t), p(t))` with `x` on the covering space.
#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Point>,
    pub p: Vec<Covector>,
    /// `H(x(0), p(0))`.
    pub energy: f64,
    /// `max_t |H(x(t), p(t)) − H(x(0), p(0))|` over the output.
    pub energy_drift: f64,
    /// Largest energy error of a single Runge-Kutta step before projection.
    pub max_step_error: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn last(&self) -> (Point, Covector) {
        (*self.x.last().expect("nonempty"), *self.p.last().expect("nonempty"))
    }

    /// CSV rows `t,x0[,x1],p0[,p1],H`.
    pub fn write_csv(&self, out: &mut impl Write, sys: &MechanicalSystem) -> Result<()> {
        if sys.dim() == 1 {
            writeln!(out, "t,x,p,H")?;
        } else {
            writeln!(out, "t,x0,x1,p0,p1,H")?;
        }
        for ((t, x), p) in self.t.iter().zip(&self.x).zip(&self.p) {
            let e = sys.hamiltonian(*x, *p);
            if sys.dim() == 1 {
                writeln!(out, "{t},{},{},{e}", x[0], p.0[0])?;
            } else {
                writeln!(out, "{t},{},{},{},{},{e}", x[0], x[1], p.0[0], p.0[1])?;
            }
        }
        Ok(())
    }
}

/// `(ẋ, ṗ) = (A(x)p, −½⟨∂A p, p⟩ − DV(x))`.
pub fn hamiltonian_vector_field(sys: &MechanicalSystem, x: Point, p: Covector) -> (Covector, Covector) {
    let dx = sys.metric_at(x).apply(p);
    let da = sys.metric_grad(x);
    let dv = sys.potential_grad(x);
    let mut dp = Covector::ZERO;
    for k in 0..sys.dim() {
        dp.0[k] = -0.5 * da[k].quad(p) - dv[k];
    }
    (sys.project(dx), sys.project(dp))
}

/// Largest admissible flow step, `0.2 / ω` with `ω² = max‖A‖ · max‖D²V‖`
/// over a probe grid (capped at `0.1`).
pub fn flow_step_limit(sys: &MechanicalSystem) -> f64 {
    let probe = TorusGrid::new(sys.dim(), if sys.dim() == 1 { 256 } else { 64 }).expect("valid probe grid");
    let mut a_max: f64 = 0.0;
    let mut h_max: f64 = 0.0;
    for i in 0..probe.len() {
        let x = probe.coord(i);
        let a = sys.metric_at(x);
        let hv = sys.potential_hessian(x);
        if sys.dim() == 1 {
            a_max = a_max.max(a.a11);
            h_max = h_max.max(hv.a11.abs());
        } else {
            a_max = a_max.max(a.eigenvalues().1);
            let (lo, hi) = hv.eigenvalues();
            h_max = h_max.max(lo.abs()).max(hi.abs());
        }
    }
    let omega = (a_max * h_max).sqrt();
    if omega > 0.0 {
        (0.2 / omega).min(0.1)
    } else {
        0.1
    }
}

/// Kinetic energy (doubled) below which `2(E − V)` is rounding noise of `V`;
/// its square root would inject a spurious momentum of order √ε.
fn energy_floor(energy: f64) -> f64 {
    64.0 * f64::EPSILON * (1.0 + energy.abs())
}

/// Rescales `p` in the `A(x)`-norm onto `H(x, p) = energy`. Where the fiber
/// of the shell over `x` is `{0}` or empty up to rounding (at or beyond the
/// boundary of the Hill region) the momentum is set to zero, so orbits that
/// approach a maximum of `V` on its energy level settle there instead of
/// rolling over or back through rounding errors.
pub fn project_to_energy(sys: &MechanicalSystem, x: Point, p: Covector, energy: f64) -> Covector {
    let kinetic = sys.metric_at(x).quad(p);
    let target = 2.0 * (energy - sys.potential(x));
    if target <= energy_floor(energy) {
        Covector::ZERO
    } else if kinetic > 1e-300 {
        p * (target / kinetic).sqrt()
    } else {
        p
    }
}

fn rk4_step(sys: &MechanicalSystem, x: Point, p: Covector, h: f64) -> (Point, Covector) {
    let shift = |x: Point, d: Covector, s: f64| [x[0] + s * d.0[0], x[1] + s * d.0[1]];
    let (k1x, k1p) = hamiltonian_vector_field(sys, x, p);
    let (k2x, k2p) = hamiltonian_vector_field(sys, shift(x, k1x, 0.5 * h), p + k1p * (0.5 * h));
    let (k3x, k3p) = hamiltonian_vector_field(sys, shift(x, k2x, 0.5 * h), p + k2p * (0.5 * h));
    let (k4x, k4p) = hamiltonian_vector_field(sys, shift(x, k3x, h), p + k3p * h);
    let dx = (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (1.0 / 6.0);
    let dp = (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (1.0 / 6.0);
    (sys.project_point(shift(x, dx, h)), p + dp * h)
}

/// Classical fourth-order Runge-Kutta from `t = 0` to `t_end` (negative for
/// backward time), optionally projected back onto the initial energy after
/// every step.
pub fn hamiltonian_flow(sys: &MechanicalSystem, x0: Point, p0: Covector, t_end: f64, settings: &FlowSettings) -> Result<Trajectory> {
    if !(settings.dt > 0.0) || !settings.dt.is_finite() {
        return Err(Error::InvalidTimeStep(settings.dt));
    }
    let limit = flow_step_limit(sys);
    if settings.dt > limit {
        return Err(Error::Precondition(format!("flow step {} exceeds {limit}", settings.dt)));
    }
    if !t_end.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite flow horizon {t_end}")));
    }
    let steps = (t_end.abs() / settings.dt).ceil().max(1.0) as usize;
    let h = t_end / steps as f64;
    let mut x = sys.project_point(x0);
    let mut p = sys.project(p0);
    let energy = sys.hamiltonian(x, p);
    let mut traj = Trajectory {
        t: Vec::with_capacity(steps + 1),
        x: Vec::with_capacity(steps + 1),
        p: Vec::with_capacity(steps + 1),
        energy,
        energy_drift: 0.0,
        max_step_error: 0.0,
    };
    traj.t.push(0.0);
    traj.x.push(x);
    traj.p.push(p);
    let floor = energy_floor(energy);
    let mut at_rest = false;
    for k in 1..=steps {
        if !at_rest {
            let before = sys.hamiltonian(x, p);
            let (nx, np) = rk4_step(sys, x, p, h);
            traj.max_step_error = traj.max_step_error.max((sys.hamiltonian(nx, np) - before).abs());
            x = nx;
            p = if settings.project_energy { project_to_energy(sys, nx, np, energy) } else { np };
            // Momentum and force both below resolution over a step: the orbit
            // has reached an equilibrium to working precision. Continuing would
            // only amplify rounding away from it.
            if settings.project_energy && p == Covector::ZERO {
                let dv = sys.potential_grad(x);
                let force = (dv[0] * dv[0] + dv[1] * dv[1]).sqrt();
                at_rest = force * h.abs() <= floor.sqrt();
            }
        }
        traj.energy_drift = traj.energy_drift.max((sys.hamiltonian(x, p) - energy).abs());
        traj.t.push(k as f64 * h);
        traj.x.push(x);
        traj.p.push(p);
    }
    let drift = traj.energy_drift.max(traj.max_step_error);
    if drift > settings.e_tol {
        return Err(Error::IntegratorAccuracy { drift, tolerance: settings.e_tol });
    }
    Ok(traj)
}

/// Orbit through `(x, p)` over a time interval of length `T` and its calibration defect.
#[derive(Clone, Debug, Serialize)]
pub struct CalibratedCurve {
    pub trajectory: Trajectory,
    /// `∫ L` over the curve.
    pub action: f64,
    /// `|v(γ(t₁)) − v(γ(t₀)) − ∫L − αT|` with `[t₀, t₁]` the time interval.
    pub defect: f64,
}

/// Integrates the Hamiltonian flow backward over `[−T, 0]` from `(x, p)`,
/// with `p` a lifted reachable gradient of a backward solution `v`. `p` is
/// first rescaled onto the energy shell of `α`, on which calibrated curves live.
pub fn calibrated_backward_curve(
    v: &LiftedField,
    sys: &MechanicalSystem,
    alpha: f64,
    x: Point,
    p: Covector,
    horizon: f64,
    settings: &FlowSettings,
) -> Result<CalibratedCurve> {
    calibrated_curve(v, sys, alpha, x, p, -horizon, settings)
}

/// Forward counterpart of [`calibrated_backward_curve`] on `[0, T]`, for
/// lifted reachable gradients of a forward solution.
pub fn calibrated_forward_curve(
    v: &LiftedField,
    sys: &MechanicalSystem,
    alpha: f64,
    x: Point,
    p: Covector,
    horizon: f64,
    settings: &FlowSettings,
) -> Result<CalibratedCurve> {
    calibrated_curve(v, sys, alpha, x, p, horizon, settings)
}

fn calibrated_curve(
    v: &LiftedField,
    sys: &MechanicalSystem,
    alpha: f64,
    x: Point,
    p: Covector,
    t_end: f64,
    settings: &FlowSettings,
) -> Result<CalibratedCurve> {
    if !(t_end.abs() > 0.0) || !t_end.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {}", t_end.abs())));
    }
    let p = project_to_energy(sys, x, sys.project(p), alpha);
    let trajectory = hamiltonian_flow(sys, x, p, t_end, settings)?;
    // Trapezoid rule for ∫L with L = ½⟨Ap,p⟩ − V along the orbit (ẋ = Ap).
    let lag: Vec<f64> = trajectory.x.iter().zip(&trajectory.p).map(|(x, p)| 0.5 * sys.metric_at(*x).quad(*p) - sys.potential(*x)).collect();
    let mut action = 0.0;
    for k in 1..lag.len() {
        let dt = (trajectory.t[k] - trajectory.t[k - 1]).abs();
        action += 0.5 * dt * (lag[k - 1] + lag[k]);
    }
    let (end, _) = trajectory.last();
    let gain = if t_end > 0.0 { v.value(end) - v.value(x) } else { v.value(x) - v.value(end) };
    let defect = (gain - action - alpha * t_end.abs()).abs();
    Ok(CalibratedCurve { trajectory, action, defect })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FourierSeries;

    fn pendulum() -> MechanicalSystem {
        MechanicalSystem::from_json_str(r#"{"dim":1,"potential":{"fourier":[[1,1,0],[0,-1,0]]}}"#).unwrap()
    }

    #[test]
    fn minimal_selection_examples() {
        let id = SymMat2::IDENTITY;
        let single = CovectorPolytope::singleton(Covector::new(0.3, 0.1), 2);
        assert_eq!(minimal_selection(&single, &id), Covector::new(0.3, 0.1));
        let seg = CovectorPolytope::from_points(&[Covector::new(-1.0, 0.0), Covector::new(0.0, 0.0)], 2).unwrap();
        assert_eq!(minimal_selection(&seg, &id), Covector::ZERO);
        let lifted = CovectorPolytope::from_points(&[Covector::new(-0.4, 0.8), Covector::new(0.4, 0.8)], 2).unwrap();
        let q = minimal_selection(&lifted, &id);
        assert!(q.0[0].abs() < 1e-15 && (q.0[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn flat_flow_is_a_straight_line() {
        let flat = MechanicalSystem::with_identity_metric(2, FourierSeries::constant(0.0), "flat").unwrap();
        let p0 = Covector::new(0.7, -0.2);
        let traj = hamiltonian_flow(&flat, [0.1, 0.2], p0, 3.0, &FlowSettings::default()).unwrap();
        let (x, p) = traj.last();
        assert!((x[0] - 2.2).abs() < 1e-12 && (x[1] + 0.4).abs() < 1e-12);
        assert_eq!(p, p0);
    }

    #[test]
    fn pendulum_separatrix_reaches_the_equilibrium() {
        let traj = hamiltonian_flow(&pendulum(), [0.5, 0.0], Covector::new(2.0, 0.0), 20.0, &FlowSettings::default()).unwrap();
        let (x, _) = traj.last();
        assert!((x[0] - 1.0).abs() < 0.05, "x(20) = {}", x[0]);
        let back = hamiltonian_flow(&pendulum(), [0.5, 0.0], Covector::new(2.0, 0.0), -20.0, &FlowSettings::default()).unwrap();
        assert!(back.last().0[0].abs() < 0.05);
        assert!(traj.energy_drift < 1e-12);
    }

    #[test]
    fn small_oscillation_period() {
        // V'' = 4π² at the bottom x = 1/2, so the period is 1.
        let settings = FlowSettings { dt: 1e-4, ..FlowSettings::default() };
        let traj = hamiltonian_flow(&pendulum(), [0.5, 0.0], Covector::new(1e-3, 0.0), 3.0, &settings).unwrap();
        let mut ups = Vec::new();
        for k in 1..traj.len() {
            let (a, b) = (traj.x[k - 1][0] - 0.5, traj.x[k][0] - 0.5);
            if a < 0.0 && b >= 0.0 {
                ups.push(traj.t[k - 1] + (traj.t[k] - traj.t[k - 1]) * (-a) / (b - a));
            }
        }
        let period = (ups[ups.len() - 1] - ups[0]) / (ups.len() - 1) as f64;
        assert!((period - 1.0).abs() < 0.01, "period {period}");
    }

    #[test]
    fn step_limit_rejects_coarse_steps() {
        let settings = FlowSettings { dt: 0.5, ..FlowSettings::default() };
        assert!(matches!(hamiltonian_flow(&pendulum(), [0.5, 0.0], Covector::new(1.0, 0.0), 1.0, &settings), Err(Error::Precondition(_))));
    }

    #[test]
    fn unprojected_flow_reports_drift() {
        let settings = FlowSettings { dt: 0.03, e_tol: 1e-12, project_energy: false };
        let r = hamiltonian_flow(&pendulum(), [0.3, 0.0], Covector::new(1.5, 0.0), 5.0, &settings);
        assert!(matches!(r, Err(Error::IntegratorAccuracy { .. })));
    }

    fn pendulum_field(n: usize) -> LiftedField {
        use std::f64::consts::PI;
        let grid = TorusGrid::new(1, n).unwrap();
        let f = |x: f64| 2.0 / PI * (1.0 - (PI * x).cos());
        let u = crate::weakkam::ScalarField::sample(grid, |x| f(x[0]).min(f(1.0) - f(x[0]))).unwrap();
        crate::weakkam::lift_v(&u.with_meta(Covector::ZERO, 0.0), Covector::ZERO)
    }

    #[test]
    fn flat_characteristic_is_classical() {
        use crate::semiconcave::EstimatorParams;
        let grid = TorusGrid::new(2, 32).unwrap();
        let flat = MechanicalSystem::with_identity_metric(2, FourierSeries::constant(0.0), "flat").unwrap();
        let c = Covector::new(0.7, 0.0);
        let alpha = 0.5 * 0.49;
        let u =
            crate::weakkam::ScalarField::new(grid, vec![0.0; grid.len()], crate::weakkam::FieldKind::Generic).unwrap().with_meta(c, alpha);
        let v = crate::weakkam::lift_v(&u, c);
        let est = SuperdiffEstimator::new(&v, EstimatorParams::for_system(&flat, alpha, &grid));
        let chi = integrate_generalized(&est, &flat, [0.2, 0.3], 1.0, None).unwrap();
        assert!(chi.stalled_at.is_none());
        let last = chi.nodes.last().unwrap();
        assert!((last.x[0] - 0.2 - 0.7 * last.s).abs() < 1e-12 && (last.x[1] - 0.3).abs() < 1e-15);
        let m = monotonicity_check(&chi, &flat);
        assert!(m.worst_defect < 1e-12 && (m.mean_rate - 0.49).abs() < 1e-12);
        assert!(singular_persistence_check(&chi, 0.1).is_err());
        let again = integrate_generalized(&est, &flat, [0.2, 0.3], 1.0, None).unwrap();
        assert_eq!(chi.nodes, again.nodes);
    }

    #[test]
    fn pendulum_shock_gives_constant_arc() {
        use crate::semiconcave::EstimatorParams;
        let sys = pendulum();
        let v = pendulum_field(256);
        let est = SuperdiffEstimator::new(&v, EstimatorParams::for_system(&sys, 0.0, v.grid()));
        let chi = integrate_generalized(&est, &sys, [0.5, 0.0], 1.0, None).unwrap();
        assert_eq!(chi.stalled_at, Some(0.0));
        assert!(chi.nodes.iter().all(|n| n.x == [0.5, 0.0]));
        assert_eq!(monotonicity_check(&chi, &sys).steps, 0);
        assert_eq!(singular_persistence_check(&chi, est.params().tol_sing).unwrap(), 1.0);
        assert!(integrate_generalized(&est, &sys, [0.5, 0.0], 1.0, Some(1.0)).is_err());
    }

    #[test]
    fn separatrix_branch_is_calibrated() {
        let v = pendulum_field(256);
        let curve =
            calibrated_backward_curve(&v, &pendulum(), 0.0, [0.5, 0.0], Covector::new(2.0, 0.0), 10.0, &FlowSettings::default()).unwrap();
        assert!(curve.defect < 0.02, "defect {}", curve.defect);
        assert!(curve.trajectory.last().0[0] < 0.05);
    }
}
