use serde::Serialize;

use crate::model::{Covector, SymMat2};

/// Convex hull of finitely many covectors, stored by its extreme points.
///
/// In one dimension the vertices are the interval endpoints; in two
/// dimensions they are in counterclockwise order with collinear points removed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovectorPolytope {
    vertices: Vec<Covector>,
    dim: usize,
}

fn cross(o: Covector, a: Covector, b: Covector) -> f64 {
    (a.0[0] - o.0[0]) * (b.0[1] - o.0[1]) - (a.0[1] - o.0[1]) * (b.0[0] - o.0[0])
}

/// Andrew's monotone chain; strict turns only.
fn convex_hull(points: &[Covector]) -> Vec<Covector> {
    let mut pts: Vec<Covector> = points.to_vec();
    pts.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]).then(a.0[1].total_cmp(&b.0[1])));
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<Covector> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Covector> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Closest point to `p` on the segment `[a, b]`.
fn project_on_segment(p: Covector, a: Covector, b: Covector) -> Covector {
    let e = b - a;
    let ee = e.dot(e);
    if ee == 0.0 {
        return a;
    }
    let s = ((p - a).dot(e) / ee).clamp(0.0, 1.0);
    a + e * s
}

impl CovectorPolytope {
    /// Hull of `points`; `None` if `points` is empty or contains non-finite entries.
    pub fn from_points(points: &[Covector], dim: usize) -> Option<Self> {
        if points.is_empty() || points.iter().any(|p| !p.is_finite()) {
            return None;
        }
        let vertices = if dim == 1 {
            let lo = points.iter().map(|p| p.0[0]).fold(f64::INFINITY, f64::min);
            let hi = points.iter().map(|p| p.0[0]).fold(f64::NEG_INFINITY, f64::max);
            if lo == hi {
                vec![Covector([lo, 0.0])]
            } else {
                vec![Covector([lo, 0.0]), Covector([hi, 0.0])]
            }
        } else {
            convex_hull(points)
        };
        Some(CovectorPolytope { vertices, dim })
    }

    pub fn singleton(p: Covector, dim: usize) -> Self {
        Self::from_points(&[p], dim).expect("finite point")
    }

    pub fn vertices(&self) -> &[Covector] {
        &self.vertices
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                d = d.max((*a - *b).norm());
            }
        }
        d
    }

    /// Edges of the boundary; a segment has one edge, a point none.
    pub fn edges(&self) -> Vec<(Covector, Covector)> {
        match self.vertices.len() {
            0 | 1 => Vec::new(),
            2 => vec![(self.vertices[0], self.vertices[1])],
            n => (0..n).map(|i| (self.vertices[i], self.vertices[(i + 1) % n])).collect(),
        }
    }

    /// Exact membership test (boundary counts as inside).
    pub fn contains(&self, p: Covector) -> bool {
        match self.vertices.len() {
            1 => self.vertices[0] == p,
            2 => {
                let (a, b) = (self.vertices[0], self.vertices[1]);
                if self.dim == 1 {
                    return a.0[0] <= p.0[0] && p.0[0] <= b.0[0];
                }
                cross(a, b, p) == 0.0
                    && a.0[0].min(b.0[0]) <= p.0[0]
                    && p.0[0] <= a.0[0].max(b.0[0])
                    && a.0[1].min(b.0[1]) <= p.0[1]
                    && p.0[1] <= a.0[1].max(b.0[1])
            }
            _ => self.edges().iter().all(|(a, b)| cross(*a, *b, p) >= 0.0),
        }
    }

    /// Closest point of the hull to `p` in the Euclidean norm.
    pub fn closest_point(&self, p: Covector) -> Covector {
        if self.contains(p) {
            return p;
        }
        if self.vertices.len() == 1 {
            return self.vertices[0];
        }
        self.edges()
            .iter()
            .map(|(a, b)| project_on_segment(p, *a, *b))
            .min_by(|x, y| (*x - p).norm().total_cmp(&(*y - p).norm()))
            .expect("at least one edge")
    }

    pub fn distance_to(&self, p: Covector) -> f64 {
        (self.closest_point(p) - p).norm()
    }

    /// Hausdorff distance between the two hulls.
    pub fn hausdorff(&self, other: &CovectorPolytope) -> f64 {
        let a = self.vertices.iter().map(|v| other.distance_to(*v)).fold(0.0, f64::max);
        let b = other.vertices.iter().map(|v| self.distance_to(*v)).fold(0.0, f64::max);
        a.max(b)
    }

    /// Unique minimizer of `½⟨A q, q⟩` over the hull: the origin when it is
    /// inside, otherwise the best vertex or clamped A-orthogonal projection
    /// of the origin onto an edge.
    pub fn min_norm_point(&self, a: &SymMat2) -> Covector {
        let a = if self.dim == 1 { SymMat2 { a11: a.a11, a12: 0.0, a22: 1.0 } } else { *a };
        if self.contains(Covector::ZERO) {
            return Covector::ZERO;
        }
        let mut best = self.vertices[0];
        let mut best_val = a.quad(best);
        let mut consider = |q: Covector| {
            let v = a.quad(q);
            if v < best_val {
                best_val = v;
                best = q;
            }
        };
        for v in &self.vertices {
            consider(*v);
        }
        for (p, q) in self.edges() {
            let e = q - p;
            let ee = a.quad(e);
            if ee > 0.0 {
                let s = (-a.apply(p).dot(e) / ee).clamp(0.0, 1.0);
                consider(p + e * s);
            }
        }
        best
    }

    /// Minkowski difference hull `{a − b}` over the vertices of both.
    pub fn minkowski_difference(&self, other: &CovectorPolytope) -> CovectorPolytope {
        let mut pts = Vec::with_capacity(self.vertices.len() * other.vertices.len());
        for a in &self.vertices {
            for b in &other.vertices {
                pts.push(*a - *b);
            }
        }
        CovectorPolytope::from_points(&pts, self.dim).expect("nonempty finite")
    }

    /// Polytope with every vertex shifted by `p`.
    pub fn translate(&self, p: Covector) -> CovectorPolytope {
        let pts: Vec<Covector> = self.vertices.iter().map(|v| *v + p).collect();
        CovectorPolytope::from_points(&pts, self.dim).expect("nonempty finite")
    }

    pub fn negate(&self) -> CovectorPolytope {
        let pts: Vec<Covector> = self.vertices.iter().map(|v| -*v).collect();
        CovectorPolytope::from_points(&pts, self.dim).expect("nonempty finite")
    }
}

/// Outcome of the regularity test `0 ∉ hull`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Regularity {
    pub regular: bool,
    /// Euclidean distance from the origin to the hull (0 when inside).
    pub margin: f64,
}

/// `0 ∉ hull`, decided by exact orientation tests; `tol` additionally
/// treats hulls closer than `tol` to the origin as containing it.
pub fn regularity_test(poly: &CovectorPolytope, tol: f64) -> Regularity {
    let inside = poly.contains(Covector::ZERO);
    let margin = if inside { 0.0 } else { poly.distance_to(Covector::ZERO) };
    Regularity { regular: !inside && margin > tol, margin }
}
