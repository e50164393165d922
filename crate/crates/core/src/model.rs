//! Mechanical systems `H(x, p) = ½⟨A(x)p, p⟩ + V(x)` on the flat torus,
//! torus geometry and grid discretization.
//!
//! Points and covectors always carry two components; in one dimension the
//! second component is zero and ignored.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// A point of the torus or of its universal cover.
pub type Point = [f64; 2];

/// Highest Fourier mode accepted per axis.
pub const MAX_DEGREE: i32 = 8;

/// Momentum / gradient vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Covector(pub [f64; 2]);

impl Covector {
    pub const ZERO: Covector = Covector([0.0, 0.0]);

    pub fn new(p0: f64, p1: f64) -> Self {
        Covector([p0, p1])
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Covector([s.first().copied().unwrap_or(0.0), s.get(1).copied().unwrap_or(0.0)])
    }

    pub fn dot(self, other: Covector) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1]
    }

    pub fn dot_point(self, x: Point) -> f64 {
        self.0[0] * x[0] + self.0[1] * x[1]
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.0[0].is_finite() && self.0[1].is_finite()
    }
}

impl Add for Covector {
    type Output = Covector;
    fn add(self, o: Covector) -> Covector {
        Covector([self.0[0] + o.0[0], self.0[1] + o.0[1]])
    }
}

impl Sub for Covector {
    type Output = Covector;
    fn sub(self, o: Covector) -> Covector {
        Covector([self.0[0] - o.0[0], self.0[1] - o.0[1]])
    }
}

impl Mul<f64> for Covector {
    type Output = Covector;
    fn mul(self, s: f64) -> Covector {
        Covector([self.0[0] * s, self.0[1] * s])
    }
}

impl Neg for Covector {
    type Output = Covector;
    fn neg(self) -> Covector {
        Covector([-self.0[0], -self.0[1]])
    }
}

/// Symmetric 2x2 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymMat2 {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl SymMat2 {
    pub const IDENTITY: SymMat2 = SymMat2 { a11: 1.0, a12: 0.0, a22: 1.0 };

    pub fn apply(&self, p: Covector) -> Covector {
        Covector([self.a11 * p.0[0] + self.a12 * p.0[1], self.a12 * p.0[0] + self.a22 * p.0[1]])
    }

    /// `⟨M p, p⟩`
    pub fn quad(&self, p: Covector) -> f64 {
        self.a11 * p.0[0] * p.0[0] + 2.0 * self.a12 * p.0[0] * p.0[1] + self.a22 * p.0[1] * p.0[1]
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a12
    }

    pub fn inverse(&self) -> SymMat2 {
        let d = self.det();
        SymMat2 { a11: self.a22 / d, a12: -self.a12 / d, a22: self.a11 / d }
    }

    /// Eigenvalues in increasing order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.a11 + self.a22);
        let r = (0.25 * (self.a11 - self.a22).powi(2) + self.a12 * self.a12).sqrt();
        (mean - r, mean + r)
    }
}

/// One term `a cos(2π k·x) + b sin(2π k·x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FourierTerm {
    pub k: [i32; 2],
    pub cos: f64,
    pub sin: f64,
}

/// Truncated real Fourier series on the torus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FourierSeries {
    pub terms: Vec<FourierTerm>,
}

impl FourierSeries {
    pub fn constant(value: f64) -> Self {
        FourierSeries { terms: vec![FourierTerm { k: [0, 0], cos: value, sin: 0.0 }] }
    }

    pub fn eval(&self, x: Point) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let phase = 2.0 * PI * (t.k[0] as f64 * x[0] + t.k[1] as f64 * x[1]);
                t.cos * phase.cos() + t.sin * phase.sin()
            })
            .sum()
    }

    pub fn grad(&self, x: Point) -> [f64; 2] {
        let mut g = [0.0; 2];
        for t in &self.terms {
            let phase = 2.0 * PI * (t.k[0] as f64 * x[0] + t.k[1] as f64 * x[1]);
            let d = 2.0 * PI * (-t.cos * phase.sin() + t.sin * phase.cos());
            g[0] += d * t.k[0] as f64;
            g[1] += d * t.k[1] as f64;
        }
        g
    }

    pub fn hessian(&self, x: Point) -> SymMat2 {
        let mut h = SymMat2 { a11: 0.0, a12: 0.0, a22: 0.0 };
        for t in &self.terms {
            let phase = 2.0 * PI * (t.k[0] as f64 * x[0] + t.k[1] as f64 * x[1]);
            let d = -4.0 * PI * PI * (t.cos * phase.cos() + t.sin * phase.sin());
            let (k0, k1) = (t.k[0] as f64, t.k[1] as f64);
            h.a11 += d * k0 * k0;
            h.a12 += d * k0 * k1;
            h.a22 += d * k1 * k1;
        }
        h
    }

    fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.k == [0, 0] || (t.cos == 0.0 && t.sin == 0.0))
    }

    fn parse(rows: &Value, dim: usize, what: &str) -> Result<Self> {
        let rows = rows.as_array().ok_or_else(|| Error::InvalidSystem(format!("{what}: expected an array of rows")))?;
        let mut terms = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let row: Vec<f64> = serde_json::from_value(row.clone()).map_err(|e| Error::InvalidSystem(format!("{what}[{i}]: {e}")))?;
            if row.len() != dim + 2 {
                return Err(Error::InvalidSystem(format!(
                    "{what}[{i}]: expected {} numbers (modes, cos, sin), got {}",
                    dim + 2,
                    row.len()
                )));
            }
            let mut k = [0i32; 2];
            for a in 0..dim {
                if row[a].fract() != 0.0 || row[a].abs() > MAX_DEGREE as f64 {
                    return Err(Error::InvalidSystem(format!("{what}[{i}]: mode {} must be an integer with |k| <= {MAX_DEGREE}", row[a])));
                }
                k[a] = row[a] as i32;
            }
            let (cos, sin) = (row[dim], row[dim + 1]);
            if !cos.is_finite() || !sin.is_finite() {
                return Err(Error::InvalidSystem(format!("{what}[{i}]: non-finite coefficient")));
            }
            terms.push(FourierTerm { k, cos, sin });
        }
        Ok(FourierSeries { terms })
    }

    fn to_rows(&self, dim: usize) -> Value {
        let rows: Vec<Vec<f64>> = self
            .terms
            .iter()
            .map(|t| {
                let mut r: Vec<f64> = t.k[..dim].iter().map(|&k| k as f64).collect();
                r.push(t.cos);
                r.push(t.sin);
                r
            })
            .collect();
        serde_json::to_value(rows).expect("rows serialize")
    }
}

/// The metric field `A(x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Metric {
    Identity,
    Fourier { a11: FourierSeries, a12: FourierSeries, a22: FourierSeries },
}

/// `H(x,p) = ½⟨A(x)p,p⟩ + V(x)` on `Tⁿ`, `n ∈ {1, 2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MechanicalSystem {
    dim: usize,
    metric: Metric,
    potential: FourierSeries,
    pub label: String,
}

impl MechanicalSystem {
    pub fn new(dim: usize, metric: Metric, potential: FourierSeries, label: &str) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidSystem(format!("dim must be 1 or 2, got {dim}")));
        }
        for t in &potential.terms {
            if dim == 1 && t.k[1] != 0 {
                return Err(Error::InvalidSystem("1D potential with a second mode index".into()));
            }
            if t.k[0].abs() > MAX_DEGREE || t.k[1].abs() > MAX_DEGREE {
                return Err(Error::InvalidSystem(format!("mode {:?} exceeds degree {MAX_DEGREE}", t.k)));
            }
        }
        let sys = MechanicalSystem { dim, metric, potential, label: label.to_string() };
        sys.check_positive_definite()?;
        Ok(sys)
    }

    /// Flat metric `A = I`.
    pub fn with_identity_metric(dim: usize, potential: FourierSeries, label: &str) -> Result<Self> {
        Self::new(dim, Metric::Identity, potential, label)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub fn potential_series(&self) -> &FourierSeries {
        &self.potential
    }

    pub fn has_constant_metric(&self) -> bool {
        match &self.metric {
            Metric::Identity => true,
            Metric::Fourier { a11, a12, a22 } => a11.is_constant() && a12.is_constant() && a22.is_constant(),
        }
    }

    pub fn metric_at(&self, x: Point) -> SymMat2 {
        match &self.metric {
            Metric::Identity => SymMat2::IDENTITY,
            Metric::Fourier { a11, a12, a22 } => {
                if self.dim == 1 {
                    SymMat2 { a11: a11.eval(x), a12: 0.0, a22: 1.0 }
                } else {
                    SymMat2 { a11: a11.eval(x), a12: a12.eval(x), a22: a22.eval(x) }
                }
            }
        }
    }

    /// Partial derivatives `∂A/∂x_i`.
    pub fn metric_grad(&self, x: Point) -> [SymMat2; 2] {
        let zero = SymMat2 { a11: 0.0, a12: 0.0, a22: 0.0 };
        match &self.metric {
            Metric::Identity => [zero, zero],
            Metric::Fourier { a11, a12, a22 } => {
                let (g11, g12, g22) = (a11.grad(x), a12.grad(x), a22.grad(x));
                let mut out = [zero, zero];
                for i in 0..self.dim {
                    out[i] = if self.dim == 1 {
                        SymMat2 { a11: g11[i], a12: 0.0, a22: 0.0 }
                    } else {
                        SymMat2 { a11: g11[i], a12: g12[i], a22: g22[i] }
                    };
                }
                out
            }
        }
    }

    pub fn potential(&self, x: Point) -> f64 {
        self.potential.eval(x)
    }

    pub fn potential_grad(&self, x: Point) -> [f64; 2] {
        let mut g = self.potential.grad(x);
        if self.dim == 1 {
            g[1] = 0.0;
        }
        g
    }

    pub fn potential_hessian(&self, x: Point) -> SymMat2 {
        let h = self.potential.hessian(x);
        if self.dim == 1 {
            return SymMat2 { a11: h.a11, a12: 0.0, a22: 0.0 };
        }
        h
    }

    /// `½⟨A(x)p,p⟩ + V(x)`.
    pub fn hamiltonian(&self, x: Point, p: Covector) -> f64 {
        let p = self.project(p);
        0.5 * self.metric_at(x).quad(p) + self.potential(x)
    }

    /// `½⟨A⁻¹(x)q,q⟩ − V(x)`, the Legendre dual of [`Self::hamiltonian`].
    pub fn lagrangian(&self, x: Point, q: Covector) -> f64 {
        let q = self.project(q);
        0.5 * self.metric_at(x).inverse().quad(q) - self.potential(x)
    }

    /// `L(x,q) − ⟨c,q⟩`.
    pub fn lagrangian_c(&self, c: Covector, x: Point, q: Covector) -> f64 {
        self.lagrangian(x, q) - self.project(c).dot(self.project(q))
    }

    /// Zeroes the unused component in one dimension.
    pub fn project(&self, p: Covector) -> Covector {
        if self.dim == 1 {
            Covector([p.0[0], 0.0])
        } else {
            p
        }
    }

    pub fn project_point(&self, x: Point) -> Point {
        if self.dim == 1 {
            [x[0], 0.0]
        } else {
            x
        }
    }

    fn probe_grid(&self) -> TorusGrid {
        TorusGrid::new(self.dim, if self.dim == 1 { 256 } else { 64 }).expect("probe grid")
    }

    fn check_positive_definite(&self) -> Result<()> {
        if matches!(self.metric, Metric::Identity) {
            return Ok(());
        }
        let probe = self.probe_grid();
        for i in 0..probe.len() {
            let x = probe.coord(i);
            let a = self.metric_at(x);
            let (lo, _) = a.eigenvalues();
            if !(lo > 0.0) {
                return Err(Error::InvalidSystem(format!("metric not positive definite at {x:?} (smallest eigenvalue {lo})")));
            }
        }
        Ok(())
    }

    pub fn max_potential_on(&self, grid: &TorusGrid) -> f64 {
        (0..grid.len()).map(|i| self.potential(grid.coord(i))).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Upper bound for `α(c)`: the constant function is a subsolution at level `max_x H(x, c)`.
    pub fn alpha_upper_bound(&self, c: Covector, grid: &TorusGrid) -> f64 {
        (0..grid.len()).map(|i| self.hamiltonian(grid.coord(i), c)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_x sqrt(2(E − V(x)) λ_max(A(x)))`, the speed of any orbit at energy `E`.
    pub fn speed_bound(&self, energy: f64, grid: &TorusGrid) -> f64 {
        (0..grid.len())
            .map(|i| {
                let x = grid.coord(i);
                let (_, hi) = self.metric_at(x).eigenvalues();
                let hi = if self.dim == 1 { self.metric_at(x).a11 } else { hi };
                (2.0 * (energy - self.potential(x)).max(0.0) * hi).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s)?;
        Self::from_json_value(&v)
    }

    pub fn from_json_value(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::InvalidSystem("expected a JSON object".into()))?;
        let dim =
            obj.get("dim").and_then(Value::as_u64).ok_or_else(|| Error::InvalidSystem("missing integer field \"dim\"".into()))? as usize;
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidSystem(format!("dim must be 1 or 2, got {dim}")));
        }
        let label = obj.get("label").and_then(Value::as_str).unwrap_or("system");

        let metric = match obj.get("metric") {
            None => Metric::Identity,
            Some(m) => {
                let ty = m.get("type").and_then(Value::as_str).ok_or_else(|| Error::InvalidSystem("metric: missing \"type\"".into()))?;
                match ty {
                    "identity" => Metric::Identity,
                    "fourier" => parse_fourier_metric(m, dim)?,
                    other => return Err(Error::InvalidSystem(format!("metric: unknown type \"{other}\""))),
                }
            }
        };

        let rows = obj
            .get("potential")
            .and_then(|p| p.get("fourier"))
            .ok_or_else(|| Error::InvalidSystem("missing \"potential\".\"fourier\"".into()))?;
        let potential = FourierSeries::parse(rows, dim, "potential.fourier")?;
        Self::new(dim, metric, potential, label)
    }

    pub fn to_json_value(&self) -> Value {
        let metric = match &self.metric {
            Metric::Identity => serde_json::json!({"type": "identity"}),
            Metric::Fourier { a11, a12, a22 } => {
                let mut entries = vec![serde_json::json!({"entry": [0, 0], "fourier": a11.to_rows(self.dim)})];
                if self.dim == 2 {
                    entries.push(serde_json::json!({"entry": [0, 1], "fourier": a12.to_rows(self.dim)}));
                    entries.push(serde_json::json!({"entry": [1, 1], "fourier": a22.to_rows(self.dim)}));
                }
                serde_json::json!({"type": "fourier", "entries": entries})
            }
        };
        serde_json::json!({
            "dim": self.dim,
            "label": self.label,
            "metric": metric,
            "potential": {"fourier": self.potential.to_rows(self.dim)},
        })
    }
}

fn parse_fourier_metric(m: &Value, dim: usize) -> Result<Metric> {
    let entries =
        m.get("entries").and_then(Value::as_array).ok_or_else(|| Error::InvalidSystem("metric: missing \"entries\" array".into()))?;
    let mut a11 = None;
    let mut a12 = FourierSeries::default();
    let mut a22 = None;
    for (i, e) in entries.iter().enumerate() {
        let idx: Vec<usize> = e
            .get("entry")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()
            .map_err(|err| Error::InvalidSystem(format!("metric.entries[{i}].entry: {err}")))?
            .ok_or_else(|| Error::InvalidSystem(format!("metric.entries[{i}]: missing \"entry\"")))?;
        let rows = e.get("fourier").ok_or_else(|| Error::InvalidSystem(format!("metric.entries[{i}]: missing \"fourier\"")))?;
        let series = FourierSeries::parse(rows, dim, &format!("metric.entries[{i}].fourier"))?;
        match idx.as_slice() {
            [0, 0] => a11 = Some(series),
            [0, 1] | [1, 0] if dim == 2 => a12 = series,
            [1, 1] if dim == 2 => a22 = Some(series),
            other => return Err(Error::InvalidSystem(format!("metric.entries[{i}]: entry {other:?} out of range for dim {dim}"))),
        }
    }
    let a11 = a11.ok_or_else(|| Error::InvalidSystem("metric: entry [0,0] missing".into()))?;
    let a22 = match (dim, a22) {
        (1, _) => FourierSeries::constant(1.0),
        (_, Some(s)) => s,
        (_, None) => return Err(Error::InvalidSystem("metric: entry [1,1] missing".into())),
    };
    Ok(Metric::Fourier { a11, a12, a22 })
}

/// Reduce a point to the fundamental domain `[0,1)ⁿ`.
pub fn wrap(x: Point) -> Point {
    [wrap1(x[0]), wrap1(x[1])]
}

fn wrap1(t: f64) -> f64 {
    let r = t.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Representative of `y − x` modulo `Zⁿ` with the smallest norm; ties go to `+½`.
pub fn min_displacement(x: Point, y: Point) -> Point {
    [min_disp1(y[0] - x[0]), min_disp1(y[1] - x[1])]
}

fn min_disp1(d: f64) -> f64 {
    let r = d.rem_euclid(1.0);
    if r > 0.5 {
        r - 1.0
    } else {
        r
    }
}

pub fn norm(x: Point) -> f64 {
    (x[0] * x[0] + x[1] * x[1]).sqrt()
}

/// Torus distance between two points.
pub fn torus_distance(x: Point, y: Point) -> f64 {
    norm(min_displacement(x, y))
}

/// Uniform grid on `Tⁿ` with `n` points per axis; node `(i, j)` has index `i + n·j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    n: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidArgument(format!("grid dim must be 1 or 2, got {dim}")));
        }
        if n < 8 {
            return Err(Error::InvalidArgument(format!("grid needs at least 8 points per axis, got {n}")));
        }
        Ok(TorusGrid { dim, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Number of nodes, `nᵈⁱᵐ`.
    pub fn len(&self) -> usize {
        if self.dim == 1 {
            self.n
        } else {
            self.n * self.n
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        [idx % self.n, idx / self.n]
    }

    pub fn index(&self, mi: [usize; 2]) -> usize {
        mi[0] + self.n * mi[1]
    }

    /// Index of the node at integer position `mi` reduced modulo `n`.
    pub fn index_wrapped(&self, mi: [i64; 2]) -> usize {
        let n = self.n as i64;
        let i0 = mi[0].rem_euclid(n) as usize;
        let i1 = if self.dim == 1 { 0 } else { mi[1].rem_euclid(n) as usize };
        self.index([i0, i1])
    }

    pub fn coord(&self, idx: usize) -> Point {
        let [i0, i1] = self.multi_index(idx);
        let h = self.spacing();
        [i0 as f64 * h, i1 as f64 * h]
    }

    pub fn nearest_node(&self, x: Point) -> usize {
        let n = self.n as f64;
        let i0 = (wrap1(x[0]) * n).round() as i64;
        let i1 = if self.dim == 1 { 0 } else { (wrap1(x[1]) * n).round() as i64 };
        self.index_wrapped([i0, i1])
    }

    /// Neighbor of `idx` shifted by `step` cells along `axis`.
    pub fn neighbor(&self, idx: usize, axis: usize, step: i64) -> usize {
        let [i0, i1] = self.multi_index(idx);
        let mut mi = [i0 as i64, i1 as i64];
        mi[axis] += step;
        self.index_wrapped(mi)
    }

    /// Diameter of the torus `√n / 2`.
    pub fn torus_diameter(&self) -> f64 {
        (self.dim as f64).sqrt() / 2.0
    }

    /// Fields sampled at every node.
    pub fn sample(&self, f: impl Fn(Point) -> f64) -> Vec<f64> {
        (0..self.len()).map(|i| f(self.coord(i))).collect()
    }

    pub fn check_same(&self, other: &TorusGrid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}
