//! Aubry set, Mather's pseudometric, Aubry classes, the barrier function
//! `B*_c` and conjugate pairs, all read off a Peierls barrier table.

use rayon::prelude::*;
use serde::Serialize;

use crate::action::{CostMatrix, PairTable};
use crate::error::{Error, Result};
use crate::model::{MechanicalSystem, Point};
use crate::semiconcave::{CovectorPolytope, EstimatorParams, SuperdiffEstimator};
use crate::weakkam::{fixed_point_residual, lift_v, FieldKind, ScalarField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BarrierTolerances {
    /// `h_c(x, x)` at or below this marks an Aubry node.
    pub tol_aubry: f64,
    /// Aubry nodes with `d_c` at or below this share a class.
    pub tol_class: f64,
    /// Tolerance on the sign and on the vanishing of `B*_c`.
    pub tol_b: f64,
}

impl Default for BarrierTolerances {
    fn default() -> Self {
        BarrierTolerances { tol_aubry: 1e-6, tol_class: 1e-3, tol_b: 2e-2 }
    }
}

/// Nodes with `h_c(x, x) ≤ tol_aubry`.
pub fn aubry_set(h: &PairTable, tol_aubry: f64) -> Result<Vec<usize>> {
    let nodes: Vec<usize> = (0..h.grid.len()).filter(|&i| h.get(i, i) <= tol_aubry).collect();
    if nodes.is_empty() {
        return Err(Error::EmptyAubrySet);
    }
    Ok(nodes)
}

/// [`aubry_set`] with the supercritical case told apart: when `α` exceeds
/// `max V` by more than `margin` and no node passes, the detection belongs
/// to the critical pathway and is refused.
pub fn detect_aubry_set(h: &PairTable, sys: &MechanicalSystem, tol_aubry: f64, margin: f64) -> Result<Vec<usize>> {
    match aubry_set(h, tol_aubry) {
        Err(Error::EmptyAubrySet) if h.alpha > sys.max_potential_on(&h.grid) + margin => Err(Error::SupercriticalAubry),
        r => r,
    }
}

/// `d_c(x, y) = h_c(x, y) + h_c(y, x)`.
pub fn mather_pseudometric(h: &PairTable, x: usize, y: usize) -> f64 {
    h.get(x, y) + h.get(y, x)
}

/// `d_c` restricted to `nodes`, row-major.
pub fn pseudometric_table(h: &PairTable, nodes: &[usize]) -> Vec<f64> {
    let mut d = Vec::with_capacity(nodes.len() * nodes.len());
    for &x in nodes {
        for &y in nodes {
            d.push(mather_pseudometric(h, x, y));
        }
    }
    d
}

/// Connected components of the graph `d_c ≤ tol_class` on `nodes`; `d` is
/// the table from [`pseudometric_table`]. Classes are listed by their
/// smallest node, each sorted.
pub fn aubry_classes(nodes: &[usize], d: &[f64], tol_class: f64) -> Vec<Vec<usize>> {
    let k = nodes.len();
    let mut label = vec![usize::MAX; k];
    let mut classes = Vec::new();
    for start in 0..k {
        if label[start] != usize::MAX {
            continue;
        }
        let id = classes.len();
        label[start] = id;
        let mut members = vec![start];
        let mut stack = vec![start];
        while let Some(a) = stack.pop() {
            for b in 0..k {
                if label[b] == usize::MAX && d[a * k + b] <= tol_class {
                    label[b] = id;
                    members.push(b);
                    stack.push(b);
                }
            }
        }
        let mut class: Vec<usize> = members.into_iter().map(|i| nodes[i]).collect();
        class.sort_unstable();
        classes.push(class);
    }
    classes.sort_by_key(|c| c[0]);
    classes
}

/// `B*_c(x) = min_{y,z} h_c(y, x) + h_c(x, z) − h_c(y, z)` over Aubry nodes
/// `y, z`, standing in for the projected Mather set.
pub fn barrier_function(h: &PairTable, aubry_nodes: &[usize]) -> Result<ScalarField> {
    if aubry_nodes.is_empty() {
        return Err(Error::EmptyAubrySet);
    }
    let values: Vec<f64> = (0..h.grid.len())
        .into_par_iter()
        .map(|x| {
            let mut best = f64::INFINITY;
            for &y in aubry_nodes {
                let hyx = h.get(y, x);
                for &z in aubry_nodes {
                    best = best.min(hyx + h.get(x, z) - h.get(y, z));
                }
            }
            best
        })
        .collect();
    Ok(ScalarField::new(h.grid, values, FieldKind::Barrier)?.with_meta(h.c, h.alpha))
}

/// Backward and forward solutions built from one Aubry base node.
#[derive(Clone, Debug)]
pub struct ConjugatePair {
    pub base: usize,
    /// `u⁻(x) = h_c(y, x)`.
    pub minus: ScalarField,
    /// `u⁺(x) = −h_c(x, y)`.
    pub plus: ScalarField,
}

impl ConjugatePair {
    /// `u⁻ − u⁺`, which is `B*_c` when the Aubry set is a single class.
    pub fn difference(&self) -> ScalarField {
        let values = self.minus.values.iter().zip(&self.plus.values).map(|(a, b)| a - b).collect();
        ScalarField::new(self.minus.grid, values, FieldKind::Barrier).expect("finite").with_meta(self.minus.c, self.minus.alpha)
    }
}

pub fn conjugate_pair(h: &PairTable, base: usize) -> Result<ConjugatePair> {
    if base >= h.grid.len() {
        return Err(Error::InvalidArgument(format!("base node {base} outside the grid")));
    }
    let minus = ScalarField::new(h.grid, h.row(base), FieldKind::BackwardSolution)?.with_meta(h.c, h.alpha);
    let plus_values = h.column(base).into_iter().map(|v| -v).collect();
    let plus = ScalarField::new(h.grid, plus_values, FieldKind::ForwardSolution)?.with_meta(h.c, h.alpha);
    Ok(ConjugatePair { base, minus, plus })
}

/// `‖T_Δ u⁻ + αΔ − u⁻‖_∞` of the backward member under the one-step operator `k`.
pub fn pair_residual(pair: &ConjugatePair, k: &CostMatrix) -> Result<f64> {
    fixed_point_residual(&pair.minus, k, pair.minus.alpha)
}

/// `sup_z |h_c(x, z) − h_c(y, z) − h_c(x, y)|`. It vanishes when `x` and `y`
/// are in one Aubry class, and is at least `d_c(x, y) − h_c(x, x)` (the value
/// at `z = x`) otherwise.
pub fn class_constancy_check(h: &PairTable, x: usize, y: usize) -> f64 {
    let shift = h.get(x, y);
    (0..h.grid.len()).map(|z| (h.get(x, z) - h.get(y, z) - shift).abs()).fold(0.0, f64::max)
}

/// `D⁺B*_c(x) = D⁺u⁻(x) − D⁻u⁺(x)`, with `D⁻u⁺ = −D⁺(−u⁺)` estimated on the
/// semiconcave function `−u⁺`.
pub fn barrier_superdifferential(minus: &ScalarField, plus: &ScalarField, x: Point, params: EstimatorParams) -> Result<CovectorPolytope> {
    minus.grid.check_same(&plus.grid)?;
    let zero = crate::model::Covector::ZERO;
    let upper = SuperdiffEstimator::new(&lift_v(minus, zero), params).superdifferential(x)?;
    let mut neg = plus.clone();
    neg.values.iter_mut().for_each(|v| *v = -*v);
    let lower = SuperdiffEstimator::new(&lift_v(&neg, zero), params).superdifferential(x)?.negate();
    Ok(upper.minkowski_difference(&lower))
}

/// Everything the barrier pipeline extracts from one Peierls table.
#[derive(Clone, Debug)]
pub struct BarrierData {
    pub alpha: f64,
    pub aubry_nodes: Vec<usize>,
    /// `h_c(x, x)` on the Aubry nodes.
    pub aubry_values: Vec<f64>,
    /// `d_c` on the Aubry nodes, row-major.
    pub pseudometric: Vec<f64>,
    pub classes: Vec<Vec<usize>>,
    pub barrier: ScalarField,
    /// Present when the Aubry set is a single class; based at its first node.
    pub pair: Option<ConjugatePair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BarrierReport {
    pub aubry_count: usize,
    pub class_count: usize,
    pub min_barrier: f64,
    pub max_barrier: f64,
    /// `max B*_c` over the Aubry nodes.
    pub barrier_on_aubry: f64,
    /// Smallest entry of `d_c` on the Aubry nodes.
    pub min_pseudometric: f64,
    /// `‖B*_c − (u⁻ − u⁺)‖_∞`, single-class case only.
    pub pair_gap: Option<f64>,
}

impl BarrierData {
    pub fn report(&self) -> BarrierReport {
        BarrierReport {
            aubry_count: self.aubry_nodes.len(),
            class_count: self.classes.len(),
            min_barrier: self.barrier.min(),
            max_barrier: self.barrier.max(),
            barrier_on_aubry: self.aubry_nodes.iter().map(|&i| self.barrier.at(i)).fold(f64::NEG_INFINITY, f64::max),
            min_pseudometric: self.pseudometric.iter().copied().fold(f64::INFINITY, f64::min),
            pair_gap: self.pair.as_ref().map(|p| {
                let diff = p.difference();
                diff.values.iter().zip(&self.barrier.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            }),
        }
    }

    /// Checks `B*_c ≥ −tol_b` everywhere and `B*_c ≤ tol_b` on the Aubry nodes.
    pub fn check(&self, tol_b: f64) -> Result<()> {
        let r = self.report();
        if r.min_barrier < -tol_b || r.barrier_on_aubry > tol_b {
            return Err(Error::Precondition(format!(
                "barrier out of range: min {} (≥ −{tol_b}), on Aubry set {} (≤ {tol_b})",
                r.min_barrier, r.barrier_on_aubry
            )));
        }
        Ok(())
    }
}

/// Aubry set, `d_c`, classes, `B*_c` and, for a single class, the conjugate pair.
pub fn analyze(h: &PairTable, tols: &BarrierTolerances) -> Result<BarrierData> {
    let aubry_nodes = aubry_set(h, tols.tol_aubry)?;
    let aubry_values = aubry_nodes.iter().map(|&i| h.get(i, i)).collect();
    let pseudometric = pseudometric_table(h, &aubry_nodes);
    let classes = aubry_classes(&aubry_nodes, &pseudometric, tols.tol_class);
    let barrier = barrier_function(h, &aubry_nodes)?;
    let pair = if classes.len() == 1 { Some(conjugate_pair(h, aubry_nodes[0])?) } else { None };
    Ok(BarrierData { alpha: h.alpha, aubry_nodes, aubry_values, pseudometric, classes, barrier, pair })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Covector, TorusGrid};

    fn table(grid: TorusGrid, f: impl Fn(usize, usize) -> f64) -> PairTable {
        let n = grid.len();
        let values = (0..n * n).map(|k| f(k / n, k % n)).collect();
        PairTable { grid, c: Covector::ZERO, alpha: 0.0, values, horizon: 0.0, disagreement: 0.0 }
    }

    #[test]
    fn classes_are_components() {
        let nodes = [2, 5, 9, 11];
        #[rustfmt::skip]
        let d = [
            0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 1.0, 1.0,
            1.0, 1.0, 0.0, 0.5,
            1.0, 1.0, 0.5, 0.0,
        ];
        assert_eq!(aubry_classes(&nodes, &d, 1e-3), vec![vec![2, 5], vec![9], vec![11]]);
        assert_eq!(aubry_classes(&nodes, &d, 0.6), vec![vec![2, 5], vec![9, 11]]);
    }

    #[test]
    fn distance_table_on_a_circle() {
        // h(x, y) = one-way distance around a directed circle: every node is
        // an Aubry node, d ≡ 1 off the diagonal.
        let grid = TorusGrid::new(1, 8).unwrap();
        let h = table(grid, |x, y| ((y + 8 - x) % 8) as f64 / 8.0);
        let nodes = aubry_set(&h, 1e-12).unwrap();
        assert_eq!(nodes.len(), 8);
        assert_eq!(mather_pseudometric(&h, 1, 4), 1.0);
        assert_eq!(aubry_classes(&nodes, &pseudometric_table(&h, &nodes), 1e-3).len(), 8);
        let b = barrier_function(&h, &nodes).unwrap();
        assert!(b.values.iter().all(|v| v.abs() < 1e-15));
        assert!((class_constancy_check(&h, 1, 4) - 1.0).abs() < 1e-15);
        assert_eq!(class_constancy_check(&h, 3, 3), 0.0);
    }

    #[test]
    fn empty_aubry_set_is_an_error() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let h = table(grid, |_, _| 1.0);
        assert!(matches!(aubry_set(&h, 1e-6), Err(Error::EmptyAubrySet)));
        assert!(matches!(barrier_function(&h, &[]), Err(Error::EmptyAubrySet)));
        let flat = MechanicalSystem::from_json_str(r#"{"dim":1,"potential":{"fourier":[]}}"#).unwrap();
        let mut high = h.clone();
        high.alpha = 1.0;
        assert!(matches!(detect_aubry_set(&high, &flat, 1e-6, 0.1), Err(Error::SupercriticalAubry)));
    }
}
