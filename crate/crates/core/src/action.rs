//! Discrete action costs, the Mañé potential and the Peierls barrier as
//! min-plus dynamic programming on a torus grid.
//!
//! A one-step matrix `K[y][x]` approximates the least action of an arc from
//! `y` to `x` in time `t` by a single straight segment with midpoint
//! quadrature, optionally corrected to the next order (see [`Quadrature`]).
//! Displacements beyond the velocity cap cost `+∞`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{min_displacement, wrap, Covector, MechanicalSystem, Point, TorusGrid};

/// Default ratio between the stencil cap and the a priori speed bound.
pub const DEFAULT_CAP_FACTOR: f64 = 4.0;

/// Quadrature of the one-step action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// `t · L_c(m, d/t)` at the midpoint `m` of the segment.
    Midpoint,
    /// Midpoint value minus the leading defect of the segment against the
    /// true minimizer, `(t/24)⟨d, D²V(m) d⟩ + (t³/24)⟨DV(m), A DV(m)⟩`.
    /// Raises the consistency order from `t²` to `t⁴` per unit time. Only
    /// used for constant metrics and small enough `t` (see
    /// [`correction_applies`]); otherwise it falls back to the midpoint rule.
    Corrected,
}

/// Time step and velocity cap shared by every operator built for one solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scheme {
    pub dt: f64,
    pub v_cap: f64,
    pub quadrature: Quadrature,
}

impl Scheme {
    /// Midpoint scheme.
    pub fn new(dt: f64, v_cap: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidTimeStep(dt));
        }
        if !(v_cap > 0.0) {
            return Err(Error::InvalidArgument(format!("velocity cap must be positive, got {v_cap}")));
        }
        Ok(Scheme { dt, v_cap, quadrature: Quadrature::Midpoint })
    }

    pub fn with_quadrature(self, quadrature: Quadrature) -> Self {
        Scheme { quadrature, ..self }
    }

    /// Corrected scheme with an optional explicit time step and cap factor;
    /// missing values fall back to [`default_time_step`] and [`DEFAULT_CAP_FACTOR`].
    pub fn for_system(sys: &MechanicalSystem, c: Covector, grid: &TorusGrid, dt: Option<f64>, cap_factor: Option<f64>) -> Result<Self> {
        let speed = speed_scale(sys, c, grid);
        let dt = match dt {
            Some(dt) => dt,
            None => default_time_step(sys, c, grid),
        };
        let factor = cap_factor.unwrap_or(DEFAULT_CAP_FACTOR);
        if !(factor >= 1.0) {
            return Err(Error::InvalidArgument(format!("cap factor must be at least 1, got {factor}")));
        }
        // A stencil shorter than two cells cannot resolve any motion.
        let v_cap = (factor * speed).max(2.0 * grid.spacing() / dt);
        Ok(Scheme::new(dt, v_cap)?.with_quadrature(Quadrature::Corrected))
    }

    /// Stencil radius `v_cap · dt` in torus units.
    pub fn radius(&self) -> f64 {
        self.v_cap * self.dt
    }
}

/// Speed bound of orbits at energy `max_x H(x, c)`, an upper bound for `α(c)`.
pub fn speed_scale(sys: &MechanicalSystem, c: Covector, grid: &TorusGrid) -> f64 {
    let energy = sys.alpha_upper_bound(c, grid);
    sys.speed_bound(energy, grid).max(1e-3)
}

/// `0.2 · √n / speed`: one step covers a fifth of the diagonal of the
/// fundamental domain at the a priori speed bound. Capped at `0.5`.
pub fn default_time_step(sys: &MechanicalSystem, c: Covector, grid: &TorusGrid) -> f64 {
    (0.2 * (grid.dim() as f64).sqrt() / speed_scale(sys, c, grid)).min(0.5)
}

/// `t · L_c(m, d/t)` with `d = min_displacement(y, x)` and midpoint `m`;
/// `+∞` when `|d| > v_cap · t`.
pub fn one_step_cost(sys: &MechanicalSystem, c: Covector, y: Point, x: Point, t: f64, v_cap: f64) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidTimeStep(t));
    }
    let y = sys.project_point(y);
    let d = sys.project_point(min_displacement(y, sys.project_point(x)));
    if (d[0] * d[0] + d[1] * d[1]).sqrt() > v_cap * t * (1.0 + 1e-12) {
        return Ok(f64::INFINITY);
    }
    let m = wrap([y[0] + 0.5 * d[0], y[1] + 0.5 * d[1]]);
    let q = Covector([d[0] / t, d[1] / t]);
    Ok(t * sys.lagrangian_c(c, m, q))
}

/// Whether the corrected quadrature is used for `sys` at step `t`: the metric
/// must be constant and the correction must leave the kinetic part convex
/// with room to spare, `t²·‖A‖·‖D²V‖ / 12 ≤ ¼` on the probe grid.
pub fn correction_applies(sys: &MechanicalSystem, grid: &TorusGrid, t: f64) -> bool {
    if !sys.has_constant_metric() {
        return false;
    }
    let a = sys.metric_at([0.0, 0.0]);
    let a_norm = if sys.dim() == 1 { a.a11 } else { a.eigenvalues().1 };
    let mut hess: f64 = 0.0;
    for i in 0..grid.len() {
        let hv = sys.potential_hessian(grid.coord(i));
        let (lo, hi) = if sys.dim() == 1 { (hv.a11, hv.a11) } else { hv.eigenvalues() };
        hess = hess.max(lo.abs()).max(hi.abs());
    }
    t * t * a_norm * hess / 12.0 <= 0.25
}

/// One-step cost under `scheme`, matching the entries of [`CostMatrix::one_step`].
pub fn scheme_step_cost(sys: &MechanicalSystem, c: Covector, grid: &TorusGrid, y: Point, x: Point, scheme: &Scheme) -> Result<f64> {
    let t = scheme.dt;
    let base = one_step_cost(sys, c, y, x, t, scheme.v_cap)?;
    if scheme.quadrature == Quadrature::Midpoint || !base.is_finite() || !correction_applies(sys, grid, t) {
        return Ok(base);
    }
    let y = sys.project_point(y);
    let d = sys.project_point(min_displacement(y, sys.project_point(x)));
    let m = wrap([y[0] + 0.5 * d[0], y[1] + 0.5 * d[1]]);
    Ok(base - step_correction(sys, m, Covector(d), t))
}

/// `(t/24)⟨d, D²V(m) d⟩ + (t³/24)⟨DV(m), A DV(m)⟩`, subtracted from the midpoint value.
fn step_correction(sys: &MechanicalSystem, m: Point, d: Covector, t: f64) -> f64 {
    let g = Covector(sys.potential_grad(m));
    t / 24.0 * sys.potential_hessian(m).quad(d) + t.powi(3) / 24.0 * sys.metric_at(m).quad(g)
}

/// Offsets sharing the second component `d1`, with `d0` running over
/// `d0_lo..=d0_hi` and stored from `start` on.
#[derive(Clone, Debug)]
struct StencilRow {
    d1: i64,
    d0_lo: i64,
    d0_hi: i64,
    start: usize,
}

/// Velocity-capped one-step stencil.
///
/// Half-grid tables (node `(i, j)` sits at `(i, j) h / 2`) hold the midpoint
/// samples; each of their rows is stored three times side by side so that the
/// inner loops index without wrapping.
#[derive(Clone, Debug)]
struct Stencil {
    offsets: Vec<[i64; 2]>,
    rows: Vec<StencilRow>,
    /// Velocity-independent part of the cost per offset: kinetic energy
    /// (constant metric only) minus `⟨c, d⟩`.
    base: Vec<f64>,
    /// `base` with every stencil row reversed.
    base_rev: Vec<f64>,
    /// `t · V` (plus the gradient part of the correction) on the extended half grid.
    potential: Vec<f64>,
    /// Position-dependent quadratic part of the cost.
    quadratic: Option<Quadratic>,
    radius: f64,
}

/// Symmetric-matrix tables `Q` on the extended half grid, entering the cost
/// as `⟨Q(m) d, d⟩ / (2t)`: `A⁻¹` for variable metrics, `−(t²/12) D²V` for
/// the corrected quadrature.
#[derive(Clone, Debug)]
struct Quadratic {
    tables: [Vec<f64>; 3],
    /// Per-offset weights `(½d0², d0·d1, ½d1²) / t`, in stencil order and
    /// reversed per stencil row.
    weights: [Vec<f64>; 3],
    weights_rev: [Vec<f64>; 3],
    /// Entries whose table or weights are not identically zero.
    active: Vec<usize>,
}

impl Stencil {
    fn half_row_len(n: usize) -> usize {
        6 * n
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Repr {
    Identity,
    Stencil(Stencil),
    /// Row-major `K[src * len + dst]`.
    Dense(Vec<f64>),
}

/// One min-plus operator on the grid; `t_step` is the elapsed time it represents.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    grid: TorusGrid,
    t_step: f64,
    repr: Repr,
}

impl CostMatrix {
    /// Zero-time identity: `0` on the diagonal, `+∞` elsewhere.
    pub fn identity(grid: TorusGrid) -> Self {
        CostMatrix { grid, t_step: 0.0, repr: Repr::Identity }
    }

    /// One-step matrix on a velocity-capped stencil.
    pub fn one_step(sys: &MechanicalSystem, c: Covector, grid: TorusGrid, scheme: &Scheme) -> Result<Self> {
        if sys.dim() != grid.dim() {
            return Err(Error::GridMismatch(format!("system dim {} vs grid dim {}", sys.dim(), grid.dim())));
        }
        let t = scheme.dt;
        let n = grid.n();
        let ni = n as i64;
        let h = grid.spacing();
        let radius = scheme.radius();
        let reach = ((radius / h).floor() as i64).min(ni / 2);
        let c = sys.project(c);

        let n2 = 2 * n;
        let half_rows = if grid.dim() == 1 { 1 } else { n2 };
        let ext = Stencil::half_row_len(n);
        let extend = |f: &dyn Fn(Point) -> f64| -> Vec<f64> {
            let mut out = vec![0.0; half_rows * ext];
            for r in 0..half_rows {
                for k in 0..ext {
                    let col = k % n2;
                    out[r * ext + k] = f([col as f64 * 0.5 * h, r as f64 * 0.5 * h]);
                }
            }
            out
        };
        let constant_metric = sys.has_constant_metric();
        let corrected = scheme.quadrature == Quadrature::Corrected && correction_applies(sys, &grid, t);
        let potential = extend(&|x| {
            let mut p = t * sys.potential(x);
            if corrected {
                let g = Covector(sys.potential_grad(x));
                p += t.powi(3) / 24.0 * sys.metric_at(x).quad(g);
            }
            p
        });
        let a_inv = sys.metric_at([0.0, 0.0]).inverse();

        let d1_range: Vec<i64> =
            if grid.dim() == 2 { (-reach..=reach).filter(|d| *d > -ni / 2 && *d <= ni / 2).collect() } else { vec![0] };
        let mut offsets = Vec::new();
        let mut rows = Vec::new();
        for d1 in d1_range {
            let start = offsets.len();
            for d0 in -reach..=reach {
                if d0 <= -ni / 2 || d0 > ni / 2 {
                    continue;
                }
                let dx = [d0 as f64 * h, d1 as f64 * h];
                if (dx[0] * dx[0] + dx[1] * dx[1]).sqrt() <= radius * (1.0 + 1e-12) {
                    offsets.push([d0, d1]);
                }
            }
            if offsets.len() > start {
                rows.push(StencilRow { d1, d0_lo: offsets[start][0], d0_hi: offsets[offsets.len() - 1][0], start });
            }
        }
        let base: Vec<f64> = offsets
            .iter()
            .map(|d| {
                let dc = Covector([d[0] as f64 * h, d[1] as f64 * h]);
                let kinetic = if constant_metric { 0.5 * a_inv.quad(dc) / t } else { 0.0 };
                kinetic - c.dot(dc)
            })
            .collect();
        let reverse_rows = |v: &[f64]| {
            let mut out = v.to_vec();
            for row in &rows {
                let count = (row.d0_hi - row.d0_lo + 1) as usize;
                out[row.start..row.start + count].reverse();
            }
            out
        };
        let base_rev = reverse_rows(&base);
        let tables = if !constant_metric {
            Some([
                extend(&|x| sys.metric_at(x).inverse().a11),
                extend(&|x| sys.metric_at(x).inverse().a12),
                extend(&|x| sys.metric_at(x).inverse().a22),
            ])
        } else if corrected {
            let f = -t * t / 12.0;
            Some([
                extend(&|x| f * sys.potential_hessian(x).a11),
                extend(&|x| f * sys.potential_hessian(x).a12),
                extend(&|x| f * sys.potential_hessian(x).a22),
            ])
        } else {
            None
        };
        let quadratic = tables.map(|tables| {
            let weight = |e: usize| -> Vec<f64> {
                offsets
                    .iter()
                    .map(|d| {
                        let (d0, d1) = (d[0] as f64 * h, d[1] as f64 * h);
                        [0.5 * d0 * d0 / t, d0 * d1 / t, 0.5 * d1 * d1 / t][e]
                    })
                    .collect()
            };
            let weights = [weight(0), weight(1), weight(2)];
            let weights_rev = [reverse_rows(&weights[0]), reverse_rows(&weights[1]), reverse_rows(&weights[2])];
            let active = (0..3).filter(|&e| tables[e].iter().any(|v| *v != 0.0) && weights[e].iter().any(|v| *v != 0.0)).collect();
            Quadratic { tables, weights, weights_rev, active }
        });
        Ok(CostMatrix { grid, t_step: t, repr: Repr::Stencil(Stencil { offsets, rows, base, base_rev, potential, quadratic, radius }) })
    }

    /// Wraps an explicit row-major table `values[src * len + dst]`.
    pub fn from_dense(grid: TorusGrid, t_step: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * grid.len() {
            return Err(Error::GridMismatch(format!("dense table has {} entries, grid needs {}", values.len(), grid.len() * grid.len())));
        }
        Ok(CostMatrix { grid, t_step, repr: Repr::Dense(values) })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn t_step(&self) -> f64 {
        self.t_step
    }

    /// Stencil radius if the matrix is a one-step stencil.
    pub fn stencil_radius(&self) -> Option<f64> {
        match &self.repr {
            Repr::Stencil(s) => Some(s.radius),
            _ => None,
        }
    }

    /// Row of the half grid and position of column `2·src + d` within the extended row.
    fn midpoint(&self, src: [i64; 2], d: [i64; 2]) -> (usize, usize) {
        let n = self.grid.n() as i64;
        let row = if self.grid.dim() == 1 { 0 } else { (2 * src[1] + d[1]).rem_euclid(2 * n) as usize };
        let col = (2 * src[0] + d[0]).rem_euclid(2 * n) + 2 * n;
        (row, col as usize)
    }

    fn stencil_cost(&self, s: &Stencil, src: [i64; 2], k: usize) -> f64 {
        let ext = Stencil::half_row_len(self.grid.n());
        let (row, col) = self.midpoint(src, s.offsets[k]);
        let m = row * ext + col;
        let mut cost = s.base[k] - s.potential[m];
        if let Some(q) = &s.quadratic {
            cost += (0..3).map(|e| q.weights[e][k] * q.tables[e][m]).sum::<f64>();
        }
        cost
    }

    fn signed_index(&self, idx: usize) -> [i64; 2] {
        let mi = self.grid.multi_index(idx);
        [mi[0] as i64, mi[1] as i64]
    }

    /// Entry `K[src][dst]`.
    pub fn cost(&self, src: usize, dst: usize) -> f64 {
        match &self.repr {
            Repr::Identity => {
                if src == dst {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Repr::Dense(v) => v[src * self.grid.len() + dst],
            Repr::Stencil(s) => {
                let n = self.grid.n() as i64;
                let a = self.signed_index(src);
                let b = self.signed_index(dst);
                let reduce = |d: i64| {
                    let r = d.rem_euclid(n);
                    if r > n / 2 {
                        r - n
                    } else {
                        r
                    }
                };
                let d = [reduce(b[0] - a[0]), reduce(b[1] - a[1])];
                match s.offsets.iter().position(|o| *o == d) {
                    Some(k) => self.stencil_cost(s, a, k),
                    None => f64::INFINITY,
                }
            }
        }
    }

    /// Materializes the full table (row = source, column = target).
    pub fn to_dense(&self) -> CostMatrix {
        let len = self.grid.len();
        let values = match &self.repr {
            Repr::Dense(v) => v.clone(),
            Repr::Identity => {
                let mut v = vec![f64::INFINITY; len * len];
                for i in 0..len {
                    v[i * len + i] = 0.0;
                }
                v
            }
            Repr::Stencil(s) => {
                let mut v = vec![f64::INFINITY; len * len];
                v.par_chunks_mut(len).enumerate().for_each(|(src, row)| {
                    let a = self.signed_index(src);
                    for (k, d) in s.offsets.iter().enumerate() {
                        let dst = self.grid.index_wrapped([a[0] + d[0], a[1] + d[1]]);
                        row[dst] = self.stencil_cost(s, a, k);
                    }
                });
                v
            }
        };
        CostMatrix { grid: self.grid, t_step: self.t_step, repr: Repr::Dense(values) }
    }

    /// Row-major entries; materializes stencils.
    pub fn dense_values(&self) -> Vec<f64> {
        match self.to_dense().repr {
            Repr::Dense(v) => v,
            _ => unreachable!("to_dense returns a dense table"),
        }
    }

    /// Copies each grid row of `u` three times side by side (sign applied).
    fn extend_field(&self, u: &[f64], sign: f64) -> Vec<f64> {
        let n = self.grid.n();
        let rows = if self.grid.dim() == 1 { 1 } else { n };
        let mut out = vec![0.0; rows * 3 * n];
        for r in 0..rows {
            for k in 0..3 * n {
                out[r * 3 * n + k] = sign * u[r * n + k % n];
            }
        }
        out
    }

    /// Best `sign·u(x ∓ d) + K` over the stencil for target/source `x`, with the
    /// stencil index attaining it. `forward` walks `x + d` with midpoint
    /// `2x + d`; otherwise `x − d` with midpoint `2x − d`.
    fn stencil_best<const TRACK: bool>(&self, s: &Stencil, ue: &[f64], x: usize, forward: bool) -> (f64, usize) {
        let n = self.grid.n();
        let ni = n as i64;
        let ext = Stencil::half_row_len(n);
        let [i0, i1] = self.signed_index(x);
        let mut best = f64::INFINITY;
        let mut best_k = 0usize;
        let dir = if forward { 1 } else { -1 };
        for row in &s.rows {
            let (src_row, mid_row) = if self.grid.dim() == 1 {
                (0, 0)
            } else {
                ((i1 + dir * row.d1).rem_euclid(ni) as usize, (2 * i1 + dir * row.d1).rem_euclid(2 * ni) as usize)
            };
            let count = (row.d0_hi - row.d0_lo + 1) as usize;
            let base = &s.base[row.start..row.start + count];
            // Index of the first stencil entry (d0 = d0_lo) in the extended rows.
            let u0 = (src_row * 3 * n) as i64 + ni + i0 + dir * row.d0_lo;
            let m0 = (mid_row * ext) as i64 + 2 * ni + 2 * i0 + dir * row.d0_lo;
            if !TRACK {
                // Contiguous slices, no bounds checks in the loop.
                let (us, ms) = if forward { (u0 as usize, m0 as usize) } else { (u0 as usize + 1 - count, m0 as usize + 1 - count) };
                let bs = if forward { base } else { &s.base_rev[row.start..row.start + count] };
                let us = &ue[us..us + count];
                let ps = &s.potential[ms..ms + count];
                best = best.min(match &s.quadratic {
                    None => min_of_sums(bs, us, ps),
                    Some(q) => {
                        let w = if forward { &q.weights } else { &q.weights_rev };
                        let w = |e: usize| &w[q.active[e]][row.start..];
                        let t = |e: usize| &q.tables[q.active[e]][ms..];
                        match q.active.len() {
                            0 => min_of_sums(bs, us, ps),
                            1 => min_of_quadratic_sums::<1>(bs, us, ps, [w(0)], [t(0)]),
                            2 => min_of_quadratic_sums::<2>(bs, us, ps, [w(0), w(1)], [t(0), t(1)]),
                            _ => min_of_quadratic_sums::<3>(bs, us, ps, [w(0), w(1), w(2)], [t(0), t(1), t(2)]),
                        }
                    }
                });
                continue;
            }
            for j in 0..count {
                let ju = (u0 + dir * j as i64) as usize;
                let jm = (m0 + dir * j as i64) as usize;
                let mut v = ue[ju] + base[j] - s.potential[jm];
                if let Some(q) = &s.quadratic {
                    v += (0..3).map(|e| q.weights[e][row.start + j] * q.tables[e][jm]).sum::<f64>();
                }
                if v < best {
                    best = v;
                    best_k = row.start + j;
                }
            }
        }
        (best, best_k)
    }

    /// `(Tu)(x) = min_y u(y) + K[y][x]`.
    pub fn min_plus_apply(&self, u: &[f64]) -> Vec<f64> {
        let len = self.grid.len();
        assert_eq!(u.len(), len, "field length does not match grid");
        match &self.repr {
            Repr::Stencil(s) => {
                let ue = self.extend_field(u, 1.0);
                (0..len).into_par_iter().map(|x| self.stencil_best::<false>(s, &ue, x, false).0).collect()
            }
            _ => self.min_plus_apply_argmin(u).0,
        }
    }

    /// Like [`Self::min_plus_apply`], also returning the minimizing source per target.
    pub fn min_plus_apply_argmin(&self, u: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let len = self.grid.len();
        assert_eq!(u.len(), len, "field length does not match grid");
        match &self.repr {
            Repr::Identity => (u.to_vec(), (0..len).collect()),
            Repr::Dense(k) => {
                let out: Vec<(f64, usize)> = (0..len)
                    .into_par_iter()
                    .map(|x| {
                        let mut best = (f64::INFINITY, x);
                        for (y, uy) in u.iter().enumerate() {
                            let v = uy + k[y * len + x];
                            if v < best.0 {
                                best = (v, y);
                            }
                        }
                        best
                    })
                    .collect();
                out.into_iter().unzip()
            }
            Repr::Stencil(s) => {
                let ue = self.extend_field(u, 1.0);
                let out: Vec<(f64, usize)> = (0..len)
                    .into_par_iter()
                    .map(|x| {
                        let (v, k) = self.stencil_best::<true>(s, &ue, x, false);
                        let a = self.signed_index(x);
                        let d = s.offsets[k];
                        (v, self.grid.index_wrapped([a[0] - d[0], a[1] - d[1]]))
                    })
                    .collect();
                out.into_iter().unzip()
            }
        }
    }

    /// `(Ťu)(x) = max_y u(y) − K[x][y]`, the forward operator.
    pub fn max_minus_apply(&self, u: &[f64]) -> Vec<f64> {
        let len = self.grid.len();
        assert_eq!(u.len(), len, "field length does not match grid");
        match &self.repr {
            Repr::Identity => u.to_vec(),
            Repr::Dense(k) => (0..len)
                .into_par_iter()
                .map(|x| {
                    let row = &k[x * len..(x + 1) * len];
                    row.iter().zip(u).map(|(kxy, uy)| uy - kxy).fold(f64::NEG_INFINITY, f64::max)
                })
                .collect(),
            Repr::Stencil(s) => {
                // max_y u(y) − K = −min_y (−u(y) + K)
                let ue = self.extend_field(u, -1.0);
                (0..len).into_par_iter().map(|x| -self.stencil_best::<false>(s, &ue, x, true).0).collect()
            }
        }
    }

    /// Min-plus product `K[y][x] = min_z self[y][z] + other[z][x]`; times add.
    pub fn compose(&self, other: &CostMatrix) -> Result<CostMatrix> {
        self.grid.check_same(&other.grid)?;
        if matches!(other.repr, Repr::Identity) {
            return Ok(CostMatrix { t_step: self.t_step + other.t_step, ..self.clone() });
        }
        if matches!(self.repr, Repr::Identity) {
            return Ok(CostMatrix { t_step: self.t_step + other.t_step, ..other.clone() });
        }
        let len = self.grid.len();
        let a = self.dense_values();
        let b = other.dense_values();
        let mut out = vec![f64::INFINITY; len * len];
        out.par_chunks_mut(len).enumerate().for_each(|(y, row)| {
            for z in 0..len {
                let ayz = a[y * len + z];
                if ayz == f64::INFINITY {
                    continue;
                }
                let bz = &b[z * len..(z + 1) * len];
                for (r, bzx) in row.iter_mut().zip(bz) {
                    let v = ayz + bzx;
                    if v < *r {
                        *r = v;
                    }
                }
            }
        });
        Ok(CostMatrix { grid: self.grid, t_step: self.t_step + other.t_step, repr: Repr::Dense(out) })
    }

    /// Entrywise `min(self, other)`; the result keeps `self`'s time.
    fn entrywise_min(&self, other: &CostMatrix) -> CostMatrix {
        let mut a = self.dense_values();
        for (x, y) in a.iter_mut().zip(other.dense_values()) {
            *x = x.min(y);
        }
        CostMatrix { grid: self.grid, t_step: self.t_step, repr: Repr::Dense(a) }
    }

    /// Adds a constant to every entry.
    fn offset(&self, shift: f64) -> CostMatrix {
        let v = self.dense_values().into_iter().map(|x| x + shift).collect();
        CostMatrix { grid: self.grid, t_step: self.t_step, repr: Repr::Dense(v) }
    }

    /// CSV with a header row `n,dim,t_step` followed by one row per source.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "n,dim,t_step")?;
        writeln!(out, "{},{},{}", self.grid.n(), self.grid.dim(), self.t_step)?;
        let len = self.grid.len();
        let v = self.dense_values();
        for row in v.chunks(len) {
            let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// `min_j b[j] + u[j] − p[j]` with independent lanes so the loop vectorizes.
fn min_of_sums(b: &[f64], u: &[f64], p: &[f64]) -> f64 {
    const LANES: usize = 8;
    let n = b.len().min(u.len()).min(p.len());
    let (b, u, p) = (&b[..n], &u[..n], &p[..n]);
    let mut acc = [f64::INFINITY; LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let (bc, uc, pc) = (&b[c * LANES..][..LANES], &u[c * LANES..][..LANES], &p[c * LANES..][..LANES]);
        for l in 0..LANES {
            let v = bc[l] + uc[l] - pc[l];
            acc[l] = if v < acc[l] { v } else { acc[l] };
        }
    }
    let mut best = f64::INFINITY;
    for j in chunks * LANES..n {
        best = best.min(b[j] + u[j] - p[j]);
    }
    acc.iter().fold(best, |a, &v| a.min(v))
}

/// `min_j b[j] + u[j] − p[j] + Σ_e w[e][j]·q[e][j]` over the length of `b`.
fn min_of_quadratic_sums<const E: usize>(b: &[f64], u: &[f64], p: &[f64], w: [&[f64]; E], q: [&[f64]; E]) -> f64 {
    const LANES: usize = 8;
    let n = b.len();
    let (u, p) = (&u[..n], &p[..n]);
    let w: [&[f64]; E] = std::array::from_fn(|e| &w[e][..n]);
    let q: [&[f64]; E] = std::array::from_fn(|e| &q[e][..n]);
    let term = |j: usize| {
        let mut v = b[j] + u[j] - p[j];
        for e in 0..E {
            v += w[e][j] * q[e][j];
        }
        v
    };
    let mut acc = [f64::INFINITY; LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        for l in 0..LANES {
            let v = term(c * LANES + l);
            acc[l] = if v < acc[l] { v } else { acc[l] };
        }
    }
    let mut best = f64::INFINITY;
    for j in chunks * LANES..n {
        best = best.min(term(j));
    }
    acc.iter().fold(best, |a, &v| a.min(v))
}

/// Free-function form of [`CostMatrix::compose`].
pub fn compose(k1: &CostMatrix, k2: &CostMatrix) -> Result<CostMatrix> {
    k1.compose(k2)
}

/// `n_steps`-fold composition of the one-step matrix with step `t / n_steps`.
pub fn finite_time_action(sys: &MechanicalSystem, c: Covector, grid: TorusGrid, t: f64, n_steps: usize, v_cap: f64) -> Result<CostMatrix> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let scheme = Scheme::new(t / n_steps as f64, v_cap)?;
    let step = CostMatrix::one_step(sys, c, grid, &scheme)?.to_dense();
    let mut acc = step.clone();
    for _ in 1..n_steps {
        acc = acc.compose(&step)?;
    }
    Ok(acc)
}

/// Pairwise table `values[src * len + dst]` of an action-derived quantity.
#[derive(Clone, Debug)]
pub struct PairTable {
    pub grid: TorusGrid,
    pub c: Covector,
    pub alpha: f64,
    pub values: Vec<f64>,
    /// Longest horizon that entered the table.
    pub horizon: f64,
    /// Largest change between the last two horizon windows.
    pub disagreement: f64,
}

impl PairTable {
    pub fn get(&self, src: usize, dst: usize) -> f64 {
        self.values[src * self.grid.len() + dst]
    }

    pub fn row(&self, src: usize) -> Vec<f64> {
        let len = self.grid.len();
        self.values[src * len..(src + 1) * len].to_vec()
    }

    pub fn column(&self, dst: usize) -> Vec<f64> {
        let len = self.grid.len();
        (0..len).map(|src| self.values[src * len + dst]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.grid.len()).map(|i| self.get(i, i)).collect()
    }
}

/// Horizons used by [`mane_potential`] and [`peierls_barrier`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonSettings {
    /// Longest horizon of the Mañé potential.
    pub t_max: f64,
    /// Window length and first horizon of the Peierls barrier.
    pub t_lo: f64,
    /// Longest horizon tried for the Peierls barrier.
    pub t_hi: f64,
    pub tol_h: f64,
}

impl Default for HorizonSettings {
    fn default() -> Self {
        HorizonSettings { t_max: 20.0, t_lo: 5.0, t_hi: 160.0, tol_h: 1e-4 }
    }
}

/// `(I ⊕ K̃)^(2^m)` with the smallest `m` covering `span` time; returns the
/// matrix (min over `0..=2^m` steps) and the number of steps covered.
fn window(step: &CostMatrix, span: f64) -> Result<(CostMatrix, usize)> {
    let mut acc = step.entrywise_min(&CostMatrix::identity(*step.grid()));
    let mut steps = 1usize;
    while (steps as f64) * step.t_step() < span {
        acc = acc.compose(&acc)?;
        steps *= 2;
    }
    Ok((acc, steps))
}

/// `φ_c(x, y) = min_{Δ ≤ t ≤ T_max} h^c_t(x, y) + α t` over every multiple of the step.
pub fn mane_potential(
    sys: &MechanicalSystem,
    c: Covector,
    grid: TorusGrid,
    alpha: f64,
    scheme: &Scheme,
    settings: &HorizonSettings,
) -> Result<PairTable> {
    let step = CostMatrix::one_step(sys, c, grid, scheme)?.to_dense().offset(alpha * scheme.dt);
    let (w, steps) = window(&step, settings.t_max - scheme.dt)?;
    let phi = step.compose(&w)?;
    Ok(PairTable { grid, c, alpha, values: phi.dense_values(), horizon: (steps + 1) as f64 * scheme.dt, disagreement: 0.0 })
}

/// `h_c(x, y) ≈ min_{T ≤ t ≤ T + T_lo} h^c_t(x, y) + α t`, with `T` doubling
/// from `T_lo` until two successive windows agree within `tol_h`.
pub fn peierls_barrier(
    sys: &MechanicalSystem,
    c: Covector,
    grid: TorusGrid,
    alpha: f64,
    scheme: &Scheme,
    settings: &HorizonSettings,
) -> Result<PairTable> {
    let step = CostMatrix::one_step(sys, c, grid, scheme)?.to_dense().offset(alpha * scheme.dt);
    let (w, w_steps) = window(&step, settings.t_lo)?;

    let mut power = step.clone();
    let mut power_steps = 1usize;
    while (power_steps as f64) * scheme.dt < settings.t_lo {
        power = power.compose(&power)?;
        power_steps *= 2;
    }
    let mut previous = power.compose(&w)?.dense_values();
    loop {
        power = power.compose(&power)?;
        power_steps *= 2;
        let current = power.compose(&w)?.dense_values();
        let disagreement = previous.iter().zip(&current).map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() }).fold(0.0, f64::max);
        let horizon = (power_steps + w_steps) as f64 * scheme.dt;
        if disagreement < settings.tol_h {
            return Ok(PairTable { grid, c, alpha, values: current, horizon, disagreement });
        }
        if horizon >= settings.t_hi {
            return Err(Error::BarrierNotConverged { disagreement, horizon });
        }
        previous = current;
    }
}
