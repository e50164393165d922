use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{wrap, Covector, Point, TorusGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    BackwardSolution,
    ForwardSolution,
    Lift,
    Barrier,
    Generic,
}

/// Periodic function sampled at the nodes of a grid.
#[derive(Clone, Debug)]
pub struct ScalarField {
    pub grid: TorusGrid,
    pub values: Vec<f64>,
    pub c: Covector,
    pub alpha: f64,
    pub kind: FieldKind,
    /// Fixed-point residual of accepted solves.
    pub residual: Option<f64>,
}

impl ScalarField {
    pub fn new(grid: TorusGrid, values: Vec<f64>, kind: FieldKind) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!("{} values for a grid of {} nodes", values.len(), grid.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite field value at node {i}")));
        }
        Ok(ScalarField { grid, values, c: Covector::ZERO, alpha: 0.0, kind, residual: None })
    }

    pub fn sample(grid: TorusGrid, f: impl Fn(Point) -> f64) -> Result<Self> {
        Self::new(grid, grid.sample(f), FieldKind::Generic)
    }

    pub fn with_meta(mut self, c: Covector, alpha: f64) -> Self {
        self.c = c;
        self.alpha = alpha;
        self
    }

    pub fn at(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    /// Periodic multilinear interpolation.
    pub fn interpolate(&self, x: Point) -> f64 {
        let n = self.grid.n() as f64;
        let w = wrap(x);
        let s0 = w[0] * n;
        let i0 = s0.floor();
        let f0 = s0 - i0;
        if self.grid.dim() == 1 {
            let a = self.values[self.grid.index_wrapped([i0 as i64, 0])];
            let b = self.values[self.grid.index_wrapped([i0 as i64 + 1, 0])];
            return a + f0 * (b - a);
        }
        let s1 = w[1] * n;
        let i1 = s1.floor();
        let f1 = s1 - i1;
        let (i0, i1) = (i0 as i64, i1 as i64);
        let v = |a: i64, b: i64| self.values[self.grid.index_wrapped([a, b])];
        let bottom = v(i0, i1) + f0 * (v(i0 + 1, i1) - v(i0, i1));
        let top = v(i0, i1 + 1) + f0 * (v(i0 + 1, i1 + 1) - v(i0, i1 + 1));
        bottom + f1 * (top - bottom)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn oscillation(&self) -> f64 {
        self.max() - self.min()
    }

    /// Largest second difference `(f(x+h) + f(x−h) − 2f(x)) / h²` over nodes and axes.
    pub fn max_second_difference(&self) -> f64 {
        let h = self.grid.spacing();
        let mut best = f64::NEG_INFINITY;
        for i in 0..self.grid.len() {
            for axis in 0..self.grid.dim() {
                let p = self.values[self.grid.neighbor(i, axis, 1)];
                let m = self.values[self.grid.neighbor(i, axis, -1)];
                best = best.max((p + m - 2.0 * self.values[i]) / (h * h));
            }
        }
        best
    }

    /// CSV rows `index,x0[,x1],value`.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        if self.grid.dim() == 1 {
            writeln!(out, "index,x,value")?;
        } else {
            writeln!(out, "index,x0,x1,value")?;
        }
        for (i, v) in self.values.iter().enumerate() {
            let x = self.grid.coord(i);
            if self.grid.dim() == 1 {
                writeln!(out, "{i},{},{v}", x[0])?;
            } else {
                writeln!(out, "{i},{},{},{v}", x[0], x[1])?;
            }
        }
        Ok(())
    }
}

/// `v(x) = u(x) + ⟨c, x⟩` on the covering space.
#[derive(Clone, Debug)]
pub struct LiftedField {
    pub u: ScalarField,
    pub c: Covector,
}

impl LiftedField {
    pub fn grid(&self) -> &TorusGrid {
        &self.u.grid
    }

    /// Value at an arbitrary point of the cover.
    pub fn value(&self, x: Point) -> f64 {
        self.u.interpolate(x) + self.c.dot_point(x)
    }

    /// Value at the cover node with integer coordinates `mi` (in cells).
    pub fn node_value(&self, mi: [i64; 2]) -> f64 {
        let g = self.grid();
        let h = g.spacing();
        let x = [mi[0] as f64 * h, if g.dim() == 1 { 0.0 } else { mi[1] as f64 * h }];
        self.u.values[g.index_wrapped(mi)] + self.c.dot_point(x)
    }
}

/// Builds the lift `v = u + ⟨c, ·⟩`.
pub fn lift_v(u: &ScalarField, c: Covector) -> LiftedField {
    let c = if u.grid.dim() == 1 { Covector([c.0[0], 0.0]) } else { c };
    LiftedField { u: u.clone(), c }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_reproduces_nodes_and_linear_data() {
        let g = TorusGrid::new(2, 16).unwrap();
        let f = ScalarField::sample(g, |x| (2.0 * std::f64::consts::PI * x[0]).cos() + x[1]).unwrap();
        for i in [0, 17, 100, 255] {
            assert!((f.interpolate(g.coord(i)) - f.at(i)).abs() < 1e-12);
        }
        let lin = ScalarField::sample(g, |x| 3.0 * x[0]).unwrap();
        assert!((lin.interpolate([0.3, 0.4]) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn lift_periodicity() {
        let g = TorusGrid::new(2, 16).unwrap();
        let u = ScalarField::sample(g, |x| (2.0 * std::f64::consts::PI * x[1]).sin()).unwrap();
        let v = lift_v(&u, Covector::new(0.7, -0.2));
        for x in [[0.13, 0.77], [0.5, 0.5], [-0.3, 2.1]] {
            assert!((v.value([x[0] + 1.0, x[1]]) - v.value(x) - 0.7).abs() < 1e-12);
            assert!((v.value([x[0], x[1] + 1.0]) - v.value(x) + 0.2).abs() < 1e-12);
        }
        assert!((v.node_value([16 + 3, 5]) - v.node_value([3, 5]) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_values() {
        let g = TorusGrid::new(1, 8).unwrap();
        let mut vals = vec![0.0; 8];
        vals[3] = f64::NAN;
        assert!(ScalarField::new(g, vals, FieldKind::Generic).is_err());
    }
}
