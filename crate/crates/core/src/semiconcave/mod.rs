//! Reachable gradients and superdifferentials of the lifted solution `v`
//! estimated from grid samples, the singular set, and the pointwise tests
//! built on them.
//!
//! Gradients come from central differences. A node counts as a point of
//! differentiability ("smooth") when its gradient differs from those of its
//! axis neighbors by less than `tol_smooth`. Gradients of smooth nodes near
//! the query point are transported back to it with a first-order Taylor
//! correction and clustered. Each cluster (one branch of the solution) is
//! represented by an affine least-squares fit of the raw gradients of its
//! branch over a wider disc, evaluated at the query point; the fit averages
//! out the cell-scale noise of discrete solutions. The representatives are
//! reduced to the extreme points of their hull.

mod hull;

pub use hull::{regularity_test, CovectorPolytope, Regularity};

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Covector, MechanicalSystem, Point, SymMat2, TorusGrid};
use crate::weakkam::LiftedField;

/// Tuning of the superdifferential estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EstimatorParams {
    /// Collection radius around the query point, in torus units.
    pub radius: f64,
    /// Radius of the per-branch gradient fit.
    pub fit_radius: f64,
    pub tol_smooth: f64,
    pub eps_cluster: f64,
    pub tol_sing: f64,
}

impl EstimatorParams {
    /// Defaults relative to the shell scale `ρ`: radius `3h`, fit radius `6h`, smoothness
    /// `0.25ρ`, clustering `0.05ρ`, singularity `0.2ρ`.
    pub fn from_shell_scale(rho: f64, grid: &TorusGrid) -> Self {
        EstimatorParams {
            radius: 3.0 * grid.spacing(),
            fit_radius: 6.0 * grid.spacing(),
            tol_smooth: 0.25 * rho,
            eps_cluster: 0.05 * rho,
            tol_sing: 0.2 * rho,
        }
    }

    pub fn for_system(sys: &MechanicalSystem, alpha: f64, grid: &TorusGrid) -> Self {
        Self::from_shell_scale(shell_scale(sys, alpha, grid), grid)
    }
}

/// Largest covector norm on the energy shell, `max_x √(2(α − V(x)) / λ_min(A(x)))`.
pub fn shell_scale(sys: &MechanicalSystem, alpha: f64, grid: &TorusGrid) -> f64 {
    let mut rho: f64 = 0.0;
    for i in 0..grid.len() {
        let x = grid.coord(i);
        let a = sys.metric_at(x);
        let lo = if sys.dim() == 1 { a.a11 } else { a.eigenvalues().0 };
        rho = rho.max((2.0 * (alpha - sys.potential(x)).max(0.0) / lo).sqrt());
    }
    rho.max(1e-6)
}

/// Gradient data of one node seen from a query point.
#[derive(Clone, Copy, Debug)]
struct Sample {
    /// Position relative to the node nearest the query point, in cells.
    offset: [i64; 2],
    /// Node minus query point.
    disp: Covector,
    raw: Covector,
    /// `raw` transported to the query point.
    moved: Covector,
}

/// Value at zero displacement of the least-squares affine model
/// `g ≈ g₀ + M·disp`, or `None` when the displacements do not determine it
/// (too few points, or all on one line in two dimensions).
fn affine_intercept(samples: &[Sample], dim: usize, h: f64) -> Option<Covector> {
    let count = samples.len();
    if count < 2 * dim + 1 {
        return None;
    }
    let inv = 1.0 / count as f64;
    let mean_d = samples.iter().fold(Covector::ZERO, |a, s| a + s.disp) * inv;
    let mean_g = samples.iter().fold(Covector::ZERO, |a, s| a + s.raw) * inv;
    // Centered second moments of the displacements and cross moments with g.
    let mut cov = SymMat2 { a11: 0.0, a12: 0.0, a22: 0.0 };
    let mut cross = [[0.0; 2]; 2];
    for s in samples {
        let d = s.disp - mean_d;
        let g = s.raw - mean_g;
        cov.a11 += d.0[0] * d.0[0];
        cov.a12 += d.0[0] * d.0[1];
        cov.a22 += d.0[1] * d.0[1];
        for k in 0..2 {
            cross[k][0] += g.0[k] * d.0[0];
            cross[k][1] += g.0[k] * d.0[1];
        }
    }
    let scale = count as f64 * h * h;
    let mut out = mean_g;
    if dim == 1 {
        if cov.a11 < 0.5 * scale {
            return None;
        }
        out.0[0] -= cross[0][0] / cov.a11 * mean_d.0[0];
        return Some(out);
    }
    if cov.det() < 0.25 * scale * scale {
        return None;
    }
    let ci = cov.inverse();
    for k in 0..2 {
        let slope = ci.apply(Covector(cross[k]));
        out.0[k] -= slope.dot(mean_d);
    }
    Some(out)
}

/// Precomputed gradient data of a lifted field.
#[derive(Clone, Debug)]
pub struct SuperdiffEstimator {
    field: LiftedField,
    params: EstimatorParams,
    grad: Vec<Covector>,
    hess: Vec<SymMat2>,
    smooth: Vec<bool>,
}

impl SuperdiffEstimator {
    pub fn new(field: &LiftedField, params: EstimatorParams) -> Self {
        let grid = *field.grid();
        let h = grid.spacing();
        let u = &field.u.values;
        let dim = grid.dim();
        let grad: Vec<Covector> = (0..grid.len())
            .map(|i| {
                let mut g = field.c;
                for axis in 0..dim {
                    let p = u[grid.neighbor(i, axis, 1)];
                    let m = u[grid.neighbor(i, axis, -1)];
                    g.0[axis] += (p - m) / (2.0 * h);
                }
                g
            })
            .collect();
        let smooth: Vec<bool> = (0..grid.len())
            .map(|i| {
                let mut osc: f64 = 0.0;
                for axis in 0..dim {
                    for step in [-1, 1] {
                        osc = osc.max((grad[grid.neighbor(i, axis, step)] - grad[i]).norm());
                    }
                }
                osc < params.tol_smooth
            })
            .collect();
        // Differences of neighboring gradients, one-sided next to
        // non-smooth nodes so that no difference straddles a kink.
        let hess = (0..grid.len())
            .map(|i| {
                let mut jac = [[0.0; 2]; 2];
                for axis in 0..dim {
                    let (p, m) = (grid.neighbor(i, axis, 1), grid.neighbor(i, axis, -1));
                    let diff = match (smooth[p], smooth[m]) {
                        (true, true) => (grad[p] - grad[m]) * (0.5 / h),
                        (true, false) => (grad[p] - grad[i]) * (1.0 / h),
                        (false, true) => (grad[i] - grad[m]) * (1.0 / h),
                        (false, false) => Covector::ZERO,
                    };
                    jac[axis] = diff.0;
                }
                SymMat2 { a11: jac[0][0], a12: 0.5 * (jac[0][1] + jac[1][0]), a22: jac[1][1] }
            })
            .collect();
        SuperdiffEstimator { field: field.clone(), params, grad, hess, smooth }
    }

    pub fn params(&self) -> &EstimatorParams {
        &self.params
    }

    pub fn field(&self) -> &LiftedField {
        &self.field
    }

    pub fn grid(&self) -> &TorusGrid {
        self.field.grid()
    }

    /// Central-difference gradient of `v` at a node.
    pub fn node_gradient(&self, idx: usize) -> Covector {
        self.grad[idx]
    }

    pub fn is_smooth_node(&self, idx: usize) -> bool {
        self.smooth[idx]
    }

    /// Smooth nodes within `r` of `x` (cover coordinates relative to the
    /// node nearest `x`), nearest first.
    fn collect(&self, x: Point, r: f64) -> Vec<Sample> {
        let grid = self.grid();
        let h = grid.spacing();
        let reach = (r / h).ceil() as i64 + 1;
        let center = [(x[0] / h).round() as i64, (x[1] / h).round() as i64];
        let (lo1, hi1) = if grid.dim() == 1 { (0, 0) } else { (-reach, reach) };
        let mut found: Vec<(f64, usize, Sample)> = Vec::new();
        for o1 in lo1..=hi1 {
            for o0 in -reach..=reach {
                let mi = [center[0] + o0, if grid.dim() == 1 { 0 } else { center[1] + o1 }];
                let disp = [mi[0] as f64 * h - x[0], if grid.dim() == 1 { 0.0 } else { mi[1] as f64 * h - x[1] }];
                let dist = (disp[0] * disp[0] + disp[1] * disp[1]).sqrt();
                if dist > r * (1.0 + 1e-9) {
                    continue;
                }
                let idx = grid.index_wrapped(mi);
                if !self.smooth[idx] {
                    continue;
                }
                let disp = Covector(disp);
                let moved = self.grad[idx] - self.hess[idx].apply(disp);
                found.push((dist, idx, Sample { offset: [o0, o1], disp, raw: self.grad[idx], moved }));
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.into_iter().map(|(_, _, s)| s).collect()
    }

    /// One representative per branch seen within the radius (before the
    /// extreme-point filter).
    ///
    /// Branches are found by nearest-first leader clustering of the
    /// transported gradients. A smooth node of the fit disc joins the branch
    /// with the nearest leader among those whose members it is connected to
    /// through smooth nodes of the disc; the branch representative is the
    /// affine fit of its raw gradients at `x`, or the mean transported
    /// gradient when the fit is undetermined.
    pub fn gradient_clusters(&self, x: Point) -> Result<Vec<Covector>> {
        let eps = self.params.eps_cluster;
        let near = self.collect(x, self.params.radius);
        let mut leaders: Vec<Covector> = Vec::new();
        let mut label: Vec<usize> = Vec::with_capacity(near.len());
        for g in &near {
            match leaders.iter().position(|l| (*l - g.moved).norm() <= eps) {
                Some(k) => label.push(k),
                None => {
                    label.push(leaders.len());
                    leaders.push(g.moved);
                }
            }
        }
        if leaders.is_empty() {
            return Err(Error::NoSmoothNeighbors { radius: self.params.radius });
        }
        let disc = self.collect(x, self.params.fit_radius.max(self.params.radius));
        let reach = disc.iter().map(|s| s.offset[0].abs().max(s.offset[1].abs())).max().unwrap_or(0);
        let side = (2 * reach + 1) as usize;
        let slot = |o: [i64; 2]| -> Option<usize> {
            if o[0].abs() > reach || o[1].abs() > reach {
                return None;
            }
            Some((o[0] + reach) as usize + side * (o[1] + reach) as usize)
        };
        let mut at_slot: Vec<Option<usize>> = vec![None; side * side];
        for (k, s) in disc.iter().enumerate() {
            at_slot[slot(s.offset).expect("inside the window")] = Some(k);
        }
        // Which branches each disc node is connected to.
        let mut reached: Vec<Vec<bool>> = vec![vec![false; leaders.len()]; disc.len()];
        for b in 0..leaders.len() {
            let mut stack: Vec<usize> = near
                .iter()
                .zip(&label)
                .filter(|(_, l)| **l == b)
                .filter_map(|(g, _)| at_slot[slot(g.offset).expect("inside the window")])
                .collect();
            while let Some(k) = stack.pop() {
                if reached[k][b] {
                    continue;
                }
                reached[k][b] = true;
                let o = disc[k].offset;
                for d in [[1, 0], [-1, 0], [0, 1], [0, -1]] {
                    if let Some(Some(j)) = slot([o[0] + d[0], o[1] + d[1]]).map(|s| at_slot[s]) {
                        if !reached[j][b] {
                            stack.push(j);
                        }
                    }
                }
            }
        }
        let mut members: Vec<Vec<Sample>> = vec![Vec::new(); leaders.len()];
        for (k, g) in disc.iter().enumerate() {
            let best = (0..leaders.len())
                .filter(|&b| reached[k][b])
                .min_by(|&a, &b| (leaders[a] - g.moved).norm().total_cmp(&(leaders[b] - g.moved).norm()));
            if let Some(b) = best {
                members[b].push(*g);
            }
        }
        let dim = self.grid().dim();
        let h = self.grid().spacing();
        Ok(members
            .iter()
            .zip(&leaders)
            .map(|(m, l)| {
                if m.is_empty() {
                    return *l;
                }
                affine_intercept(m, dim, h).unwrap_or_else(|| m.iter().fold(Covector::ZERO, |a, g| a + g.moved) * (1.0 / m.len() as f64))
            })
            .collect())
    }

    /// Estimate of `D*v(x)`: extreme cluster representatives.
    pub fn reachable_gradients(&self, x: Point) -> Result<CovectorPolytope> {
        let leaders = self.gradient_clusters(x)?;
        Ok(CovectorPolytope::from_points(&leaders, self.grid().dim()).expect("finite gradients"))
    }

    /// Estimate of `D⁺v(x) = co D*v(x)`.
    pub fn superdifferential(&self, x: Point) -> Result<CovectorPolytope> {
        self.reachable_gradients(x)
    }

    pub fn is_singular(&self, x: Point) -> Result<bool> {
        Ok(self.superdifferential(x)?.diameter() > self.params.tol_sing)
    }

    /// Superdifferential at a node, located on the fundamental domain.
    pub fn node_superdifferential(&self, idx: usize) -> Result<CovectorPolytope> {
        self.superdifferential(self.grid().coord(idx))
    }

    /// Polytope diameter at every node; nodes without smooth neighbors get `+∞`.
    pub fn singular_set(&self) -> SingularSet {
        let grid = *self.grid();
        let diameters: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map(|i| match self.node_superdifferential(i) {
                Ok(p) => p.diameter(),
                Err(_) => f64::INFINITY,
            })
            .collect();
        let nodes = (0..grid.len()).filter(|&i| diameters[i] > self.params.tol_sing).collect();
        SingularSet { grid, nodes, diameters, tol: self.params.tol_sing }
    }
}

/// Nodes flagged singular, with the estimated diameter of `D⁺v` at every node.
#[derive(Clone, Debug)]
pub struct SingularSet {
    pub grid: TorusGrid,
    pub nodes: Vec<usize>,
    pub diameters: Vec<f64>,
    pub tol: f64,
}

impl SingularSet {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.nodes.binary_search(&idx).is_ok()
    }

    /// CSV rows `index,x0[,x1],diameter` for flagged nodes.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let two = self.grid.dim() == 2;
        writeln!(out, "{}", if two { "index,x0,x1,diameter" } else { "index,x,diameter" })?;
        for &i in &self.nodes {
            let x = self.grid.coord(i);
            if two {
                writeln!(out, "{i},{},{},{}", x[0], x[1], self.diameters[i])?;
            } else {
                writeln!(out, "{i},{},{}", x[0], self.diameters[i])?;
            }
        }
        Ok(())
    }
}

/// Estimate of `D*v(x)` with explicit estimator parameters.
pub fn reachable_gradients(v: &LiftedField, x: Point, params: EstimatorParams) -> Result<CovectorPolytope> {
    SuperdiffEstimator::new(v, params).reachable_gradients(x)
}

/// Estimate of `D⁺v(x)`.
pub fn superdifferential(v: &LiftedField, x: Point, params: EstimatorParams) -> Result<CovectorPolytope> {
    SuperdiffEstimator::new(v, params).superdifferential(x)
}

/// All nodes whose superdifferential estimate has diameter above `tol_sing`.
pub fn singular_set(v: &LiftedField, params: EstimatorParams) -> SingularSet {
    SuperdiffEstimator::new(v, params).singular_set()
}

/// True iff `v(x) ≥ v(y)` for every node `y` of the cover with `|y − x| ≤ r`.
pub fn local_max_test(v: &LiftedField, x: Point, r: f64) -> bool {
    let grid = v.grid();
    let h = grid.spacing();
    let vx = v.value(x);
    let reach = (r / h).ceil() as i64 + 1;
    let center = [(x[0] / h).round() as i64, (x[1] / h).round() as i64];
    let span1 = if grid.dim() == 1 { 0 } else { reach };
    for o1 in -span1..=span1 {
        for o0 in -reach..=reach {
            let mi = [center[0] + o0, if grid.dim() == 1 { 0 } else { center[1] + o1 }];
            let d = [mi[0] as f64 * h - x[0], if grid.dim() == 1 { 0.0 } else { mi[1] as f64 * h - x[1] }];
            if (d[0] * d[0] + d[1] * d[1]).sqrt() <= r * (1.0 + 1e-9) && v.node_value(mi) > vx {
                return false;
            }
        }
    }
    true
}

/// Nodes `y` of the fundamental domain with `|v(y) − v(x)| ≤ tol_level`.
pub fn level_set_points(v: &LiftedField, x: Point, tol_level: f64) -> Vec<usize> {
    let grid = v.grid();
    let vx = v.value(x);
    (0..grid.len())
        .filter(|&i| {
            let mi = grid.multi_index(i);
            (v.node_value([mi[0] as i64, mi[1] as i64]) - vx).abs() <= tol_level
        })
        .collect()
}

/// `|⟨A(x)p, p⟩ − 2(α − V(x))|` for a lifted gradient `p`.
pub fn energy_shell_residual(sys: &MechanicalSystem, alpha: f64, x: Point, p: Covector) -> f64 {
    let p = sys.project(p);
    (sys.metric_at(x).quad(p) - 2.0 * (alpha - sys.potential(x))).abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShellCoverage {
    /// Fraction of vertices within `tol_shell` of the energy shell.
    pub fraction: f64,
    /// Vertex directions leave no angular gap of `gap_tol` or more on the shell.
    pub covers_shell: bool,
    /// Largest angular gap between vertex directions, in radians.
    pub max_gap: f64,
}

/// Compares the vertices of a reachable-gradient estimate with the energy
/// shell `⟨A(x)p, p⟩ = 2(α − V(x))`. Directions are measured after mapping
/// the shell to a circle; a one-dimensional shell has two points, so its
/// gaps are at least `π`.
pub fn shell_coverage_test(
    poly: &CovectorPolytope,
    sys: &MechanicalSystem,
    alpha: f64,
    x: Point,
    tol_shell: f64,
    gap_tol: f64,
) -> ShellCoverage {
    let verts = poly.vertices();
    let on_shell = verts.iter().filter(|p| energy_shell_residual(sys, alpha, x, **p) <= tol_shell).count();
    let a = sys.metric_at(x);
    let l11 = a.a11.sqrt();
    let (l21, l22) = if sys.dim() == 1 { (0.0, 1.0) } else { (a.a12 / l11, (a.a22 - (a.a12 / l11).powi(2)).sqrt()) };
    let mut angles: Vec<f64> = verts
        .iter()
        .map(|p| {
            let p = sys.project(*p);
            let z = [l11 * p.0[0] + l21 * p.0[1], l22 * p.0[1]];
            z[1].atan2(z[0])
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    let max_gap = if angles.len() < 2 {
        2.0 * PI
    } else {
        let mut g = angles[0] + 2.0 * PI - angles[angles.len() - 1];
        for w in angles.windows(2) {
            g = g.max(w[1] - w[0]);
        }
        g
    };
    ShellCoverage {
        fraction: if verts.is_empty() { 0.0 } else { on_shell as f64 / verts.len() as f64 },
        covers_shell: max_gap < gap_tol,
        max_gap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weakkam::{lift_v, FieldKind, ScalarField};

    fn params(rho: f64, grid: &TorusGrid) -> EstimatorParams {
        EstimatorParams::from_shell_scale(rho, grid)
    }

    #[test]
    fn linear_field_has_singleton_superdifferential() {
        let grid = TorusGrid::new(2, 32).unwrap();
        let u = ScalarField::new(grid, vec![0.0; grid.len()], FieldKind::Generic).unwrap();
        let v = lift_v(&u, Covector::new(0.7, 0.0));
        let est = SuperdiffEstimator::new(&v, params(0.7, &grid));
        let p = est.reachable_gradients([0.3, 0.6]).unwrap();
        assert_eq!(p.vertices().len(), 1);
        assert!((p.vertices()[0] - Covector::new(0.7, 0.0)).norm() < 1e-12);
        assert!(est.singular_set().is_empty());
        assert!(!local_max_test(&v, [0.5, 0.5], 3.0 * grid.spacing()));
    }

    #[test]
    fn branch_formula_shock() {
        // u = min of the two branches ∫ 2|sin πs| ds, shock at 1/2.
        let grid = TorusGrid::new(1, 256).unwrap();
        let f = |x: f64| 2.0 / PI * (1.0 - (PI * x).cos());
        let u = ScalarField::sample(grid, |x| f(x[0]).min(f(1.0) - f(x[0]))).unwrap();
        let v = lift_v(&u, Covector::ZERO);
        let est = SuperdiffEstimator::new(&v, params(2.0, &grid));
        let p = est.reachable_gradients([0.5, 0.0]).unwrap();
        let verts = p.vertices();
        assert_eq!(verts.len(), 2);
        assert!((verts[0].0[0] + 2.0).abs() < 0.05 && (verts[1].0[0] - 2.0).abs() < 0.05);
        let sing = est.singular_set();
        assert!(!sing.is_empty());
        assert!(sing.nodes.iter().all(|&i| (grid.coord(i)[0] - 0.5).abs() <= grid.spacing() + 1e-12));
        assert!(local_max_test(&v, [0.5, 0.0], 3.0 * grid.spacing()));
        let cov = shell_coverage_test(
            &p,
            &MechanicalSystem::from_json_str(r#"{"dim":1,"potential":{"fourier":[[1,1,0],[0,-1,0]]}}"#).unwrap(),
            0.0,
            [0.5, 0.0],
            0.1,
            PI / 8.0,
        );
        assert_eq!(cov.fraction, 1.0);
        assert!(!cov.covers_shell);
    }

    #[test]
    fn cone_fills_the_circle() {
        let grid = TorusGrid::new(2, 128).unwrap();
        let u = ScalarField::sample(grid, |x| {
            let d = crate::model::min_displacement([0.0, 0.0], x);
            -(d[0] * d[0] + d[1] * d[1]).sqrt()
        })
        .unwrap();
        let v = lift_v(&u, Covector::ZERO);
        let mut prm = params(1.0, &grid);
        prm.radius = 8.0 * grid.spacing();
        let p = reachable_gradients(&v, [0.0, 0.0], prm).unwrap();
        let flat = MechanicalSystem::from_json_str(r#"{"dim":2,"potential":{"fourier":[]}}"#).unwrap();
        let cov = shell_coverage_test(&p, &flat, 0.5, [0.0, 0.0], 0.1, PI / 8.0);
        assert!(cov.covers_shell, "gap {}", cov.max_gap);
        assert_eq!(cov.fraction, 1.0);
    }

    #[test]
    fn shell_residual_examples() {
        let flat = MechanicalSystem::from_json_str(r#"{"dim":2,"potential":{"fourier":[]}}"#).unwrap();
        assert!(energy_shell_residual(&flat, 0.245, [0.1, 0.2], Covector::new(0.7, 0.0)) < 1e-15);
        let pend = MechanicalSystem::from_json_str(r#"{"dim":1,"potential":{"fourier":[[1,1,0],[0,-1,0]]}}"#).unwrap();
        assert!(energy_shell_residual(&pend, 0.0, [0.5, 0.0], Covector::new(2.0, 0.0)) < 1e-12);
        assert!((energy_shell_residual(&pend, 0.0, [0.5, 0.0], Covector::ZERO) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn level_sets() {
        let grid = TorusGrid::new(2, 16).unwrap();
        let u = ScalarField::new(grid, vec![0.0; grid.len()], FieldKind::Generic).unwrap();
        let v = lift_v(&u, Covector::new(0.7, 0.0));
        let pts = level_set_points(&v, grid.coord(grid.index([3, 5])), 1e-12);
        assert_eq!(pts.len(), 16);
        assert!(pts.iter().all(|&i| grid.multi_index(i)[0] == 3));
    }
}
