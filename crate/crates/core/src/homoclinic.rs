//! Homoclinic orbits to the Aubry set, glued at a point from a backward
//! calibrated branch of `u⁻` and a forward calibrated branch of `u⁺`.

use std::io::Write;

use serde::Serialize;

use crate::characteristics::{calibrated_backward_curve, calibrated_forward_curve, project_to_energy, FlowSettings, Trajectory};
use crate::error::{Error, Result};
use crate::model::{torus_distance, wrap, Covector, MechanicalSystem, Point, TorusGrid};
use crate::semiconcave::{energy_shell_residual, shell_scale, EstimatorParams, SuperdiffEstimator};
use crate::weakkam::{lift_v, LiftedField, ScalarField};

/// Default matching tolerance as a fraction of the shell scale.
pub const MATCH_FACTOR: f64 = 0.05;

/// `0.05 · ρ` with `ρ` the shell scale at `α`.
pub fn default_match_tol(sys: &MechanicalSystem, alpha: f64, grid: &TorusGrid) -> f64 {
    MATCH_FACTOR * shell_scale(sys, alpha, grid)
}

/// Gradient cluster representatives of `u⁻` and `u⁺` at `x`, both lifted by `c`.
fn lifted_reachable(minus: &ScalarField, plus: &ScalarField, x: Point, params: EstimatorParams) -> Result<(Vec<Covector>, Vec<Covector>)> {
    minus.grid.check_same(&plus.grid)?;
    let c = minus.c;
    let upper = SuperdiffEstimator::new(&lift_v(minus, c), params).gradient_clusters(x)?;
    // u⁺ is semiconvex: its reachable gradients are those of −u⁺, negated.
    let mut neg = plus.clone();
    neg.values.iter_mut().for_each(|v| *v = -*v);
    let lower = SuperdiffEstimator::new(&lift_v(&neg, -c), params).gradient_clusters(x)?.into_iter().map(|q| -q).collect();
    Ok((upper, lower))
}

/// A covector `p` with `c + p` in both `D*v⁻(x)` and `D*v⁺(x)`: the closest
/// pair `(a, b)` of estimated lifted reachable gradients, averaged, if
/// `|a − b| ≤ match_tol`. Ties go to the pair found first, which scans the
/// gradients of `u⁻` in ascending order.
pub fn common_reachable_gradient(
    minus: &ScalarField,
    plus: &ScalarField,
    x: Point,
    params: EstimatorParams,
    match_tol: f64,
) -> Result<Option<Covector>> {
    let (mut upper, lower) = lifted_reachable(minus, plus, x, params)?;
    upper.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]).then(a.0[1].total_cmp(&b.0[1])));
    let mut best: Option<(f64, Covector)> = None;
    for a in &upper {
        for b in &lower {
            let gap = (*a - *b).norm();
            if gap <= match_tol && best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, (*a + *b) * 0.5 - minus.c));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// A pair `p₁, p₂` of estimated reachable gradients of `v` at `x` with
/// `|p₁ + p₂| ≤ anti_tol`, the most nearly antipodal one.
pub fn antipodal_detection(v: &LiftedField, x: Point, params: EstimatorParams, anti_tol: f64) -> Result<Option<(Covector, Covector)>> {
    let mut grads = SuperdiffEstimator::new(v, params).gradient_clusters(x)?;
    grads.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]).then(a.0[1].total_cmp(&b.0[1])));
    let mut best: Option<(f64, Covector, Covector)> = None;
    for (i, a) in grads.iter().enumerate() {
        for b in &grads[i + 1..] {
            let gap = (*a + *b).norm();
            if gap <= anti_tol && best.is_none_or(|(g, _, _)| gap < g) {
                best = Some((gap, *a, *b));
            }
        }
    }
    Ok(best.map(|(_, a, b)| (a, b)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomoclinicSettings {
    pub horizon: f64,
    /// Largest horizon reached by doubling in [`settle_homoclinic`].
    pub max_horizon: f64,
    pub flow: FlowSettings,
    /// Bound on the calibration defect of each branch.
    pub cal_tol: f64,
    /// Bound on the shell residual of `c + p` at the glue point.
    pub tol_shell: f64,
    /// Endpoint distance to the Aubry nodes counted as settled.
    pub settle_tol: f64,
}

impl Default for HomoclinicSettings {
    fn default() -> Self {
        HomoclinicSettings {
            horizon: 20.0,
            max_horizon: 80.0,
            flow: FlowSettings::default(),
            cal_tol: 0.05,
            tol_shell: 0.1,
            settle_tol: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HomoclinicOrbit {
    pub x: Point,
    /// `c + p` on the energy shell, the momentum at the glue point.
    pub momentum: Covector,
    /// Branch of `u⁻` on `[−T, 0]`, stored in decreasing time.
    pub backward: Trajectory,
    /// Branch of `u⁺` on `[0, T]`.
    pub forward: Trajectory,
    pub horizon: f64,
    pub backward_defect: f64,
    pub forward_defect: f64,
    /// Largest deviation of `H` from its value at the glue point on either branch.
    pub energy_drift: f64,
    /// `|γ̇₁(0⁻) − γ̇₂(0⁺)|` from one-sided second-order differences.
    pub gluing_defect: f64,
    /// `(d(γ₁(−T), 𝒜), d(γ₂(T), 𝒜))` once computed.
    pub endpoint_distances: Option<(f64, f64)>,
}

/// One-sided second-order derivative at the first sample of `x`, per unit of `t`.
fn one_sided_velocity(traj: &Trajectory) -> Point {
    let h = traj.t[1] - traj.t[0];
    let d = |k: usize| (-3.0 * traj.x[0][k] + 4.0 * traj.x[1][k] - traj.x[2][k]) / (2.0 * h);
    [d(0), d(1)]
}

/// Glues the backward calibrated branch of `u⁻` and the forward calibrated
/// branch of `u⁺` through `(x, c + p)`.
pub fn build_homoclinic(
    sys: &MechanicalSystem,
    minus: &ScalarField,
    plus: &ScalarField,
    x: Point,
    p: Covector,
    settings: &HomoclinicSettings,
) -> Result<HomoclinicOrbit> {
    minus.grid.check_same(&plus.grid)?;
    let (c, alpha) = (minus.c, minus.alpha);
    let lifted = sys.project(c + p);
    let residual = energy_shell_residual(sys, alpha, x, lifted);
    if residual > settings.tol_shell {
        return Err(Error::Precondition(format!("c + p is off the energy shell (residual {residual} > {})", settings.tol_shell)));
    }
    let t = settings.horizon;
    let back = calibrated_backward_curve(&lift_v(minus, c), sys, alpha, x, lifted, t, &settings.flow)?;
    let fwd = calibrated_forward_curve(&lift_v(plus, c), sys, alpha, x, lifted, t, &settings.flow)?;
    for defect in [back.defect, fwd.defect] {
        if defect > settings.cal_tol {
            return Err(Error::CalibrationDefect { defect, tolerance: settings.cal_tol });
        }
    }
    if back.trajectory.len() < 3 || fwd.trajectory.len() < 3 {
        return Err(Error::InvalidArgument("horizon shorter than two flow steps".into()));
    }
    let v1 = one_sided_velocity(&back.trajectory);
    let v2 = one_sided_velocity(&fwd.trajectory);
    let gluing_defect = ((v1[0] - v2[0]).powi(2) + (v1[1] - v2[1]).powi(2)).sqrt();
    let energy = sys.hamiltonian(x, project_to_energy(sys, x, lifted, alpha));
    let drift = |tr: &Trajectory| tr.x.iter().zip(&tr.p).map(|(y, q)| (sys.hamiltonian(*y, *q) - energy).abs()).fold(0.0, f64::max);
    let energy_drift = drift(&back.trajectory).max(drift(&fwd.trajectory));
    Ok(HomoclinicOrbit {
        x,
        momentum: back.trajectory.p[0],
        backward: back.trajectory,
        forward: fwd.trajectory,
        horizon: t,
        backward_defect: back.defect,
        forward_defect: fwd.defect,
        energy_drift,
        gluing_defect,
        endpoint_distances: None,
    })
}

/// Torus distances of `γ₁(−T)` and `γ₂(T)` to the nearest Aubry node.
pub fn omega_limit_distance(orbit: &HomoclinicOrbit, grid: &TorusGrid, aubry_nodes: &[usize]) -> (f64, f64) {
    let dist = |y: Point| {
        let y = wrap(y);
        aubry_nodes.iter().map(|&i| torus_distance(y, grid.coord(i))).fold(f64::INFINITY, f64::min)
    };
    (dist(orbit.backward.last().0), dist(orbit.forward.last().0))
}

impl HomoclinicOrbit {
    pub fn settled(&self, settle_tol: f64) -> bool {
        self.endpoint_distances.is_some_and(|(a, b)| a <= settle_tol && b <= settle_tol)
    }

    /// CSV rows `t,x0[,x1],p0[,p1],H` from `−T` to `T`.
    pub fn write_csv(&self, out: &mut impl Write, sys: &MechanicalSystem) -> Result<()> {
        let one = sys.dim() == 1;
        writeln!(out, "{}", if one { "t,x,p,H" } else { "t,x0,x1,p0,p1,H" })?;
        let back = (0..self.backward.len()).rev().map(|k| (self.backward.t[k], self.backward.x[k], self.backward.p[k]));
        let fwd = (1..self.forward.len()).map(|k| (self.forward.t[k], self.forward.x[k], self.forward.p[k]));
        for (t, x, p) in back.chain(fwd) {
            let e = sys.hamiltonian(x, p);
            if one {
                writeln!(out, "{t},{},{},{e}", x[0], p.0[0])?;
            } else {
                writeln!(out, "{t},{},{},{},{},{e}", x[0], x[1], p.0[0], p.0[1])?;
            }
        }
        Ok(())
    }
}

/// [`build_homoclinic`] with the horizon doubled from `settings.horizon`
/// until both endpoints are within `settle_tol` of the Aubry nodes or the
/// horizon would exceed `max_horizon`. The last orbit is returned either way;
/// check [`HomoclinicOrbit::settled`].
pub fn settle_homoclinic(
    sys: &MechanicalSystem,
    minus: &ScalarField,
    plus: &ScalarField,
    x: Point,
    p: Covector,
    aubry_nodes: &[usize],
    settings: &HomoclinicSettings,
) -> Result<HomoclinicOrbit> {
    let mut s = *settings;
    loop {
        let mut orbit = build_homoclinic(sys, minus, plus, x, p, &s)?;
        orbit.endpoint_distances = Some(omega_limit_distance(&orbit, &minus.grid, aubry_nodes));
        if orbit.settled(s.settle_tol) || 2.0 * s.horizon > s.max_horizon {
            return Ok(orbit);
        }
        s.horizon *= 2.0;
    }
}
