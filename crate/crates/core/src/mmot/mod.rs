//! Discrete multi-marginal transport: cost tensors, primal solvers, dual
//! potentials and the structural checks built on them.

mod cost;
mod dual;
mod entropic;
mod simplex;

pub use cost::{assemble_cost_tensor, pairwise_cost_tensor, AssemblyOptions, CostTensor};
pub use dual::{
    c_conjugate_update, check_cyclical_monotonicity, dual_objective, duality_gap, gamma_u,
    strict_potentials, MonotonicityReport,
};
pub use entropic::{solve_entropic, EntropicOptions, EntropicSolution};
pub use simplex::{solve_exact_lp, LpOptions, LpSolution};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heis::HPoint;

/// Tolerance on marginal constraints of returned couplings.
pub const MARG_TOL: f64 = 1e-9;

/// `gap_tol = 1e-8 (1 + |primal|)`.
pub fn gap_tolerance(primal: f64) -> f64 {
    1e-8 * (1.0 + primal.abs())
}

/// A finitely supported probability measure on `H^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCloud", into = "RawCloud")]
pub struct WeightedCloud {
    points: Vec<HPoint>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawCloud {
    n: usize,
    points: Vec<HPoint>,
    weights: Vec<f64>,
}

impl TryFrom<RawCloud> for WeightedCloud {
    type Error = Error;

    fn try_from(raw: RawCloud) -> Result<Self> {
        if let Some(p) = raw.points.iter().find(|p| p.n() != raw.n) {
            return Err(Error::DimensionMismatch {
                expected: raw.n,
                found: p.n(),
            });
        }
        WeightedCloud::new(raw.points, raw.weights)
    }
}

impl From<WeightedCloud> for RawCloud {
    fn from(c: WeightedCloud) -> Self {
        RawCloud {
            n: c.n(),
            points: c.points,
            weights: c.weights,
        }
    }
}

impl WeightedCloud {
    /// Weights must be nonnegative and sum to 1 within `1e-12`.
    pub fn new(points: Vec<HPoint>, weights: Vec<f64>) -> Result<Self> {
        let cloud = Self::unnormalized(points, weights)?;
        let sum: f64 = cloud.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::WeightSum { sum });
        }
        Ok(cloud)
    }

    /// Validates everything but the total mass, then rescales to mass 1.
    pub fn normalized(points: Vec<HPoint>, weights: Vec<f64>) -> Result<Self> {
        let mut cloud = Self::unnormalized(points, weights)?;
        let sum: f64 = cloud.weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::WeightSum { sum });
        }
        cloud.weights.iter_mut().for_each(|w| *w /= sum);
        Ok(cloud)
    }

    fn unnormalized(points: Vec<HPoint>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument(
                "a cloud needs at least one point".into(),
            ));
        }
        if points.len() != weights.len() {
            return Err(Error::Format(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        for p in &points[1..] {
            points[0].check_same_dim(p)?;
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid weight {w}")));
        }
        Ok(Self { points, weights })
    }

    pub fn dirac(x: HPoint) -> Self {
        Self {
            points: vec![x],
            weights: vec![1.0],
        }
    }

    /// Equal weights `1/k`.
    pub fn uniform(points: Vec<HPoint>) -> Result<Self> {
        let k = points.len().max(1);
        Self::normalized(points, vec![1.0 / k as f64; k])
    }

    pub fn points(&self) -> &[HPoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    pub fn n(&self) -> usize {
        self.points[0].n()
    }

    /// Largest coordinate-wise spread of the support, at least `1e-12`.
    pub fn extent(&self) -> f64 {
        let d = self.points[0].coords().len();
        let mut spread = 0.0f64;
        for k in 0..d {
            let (lo, hi) = self
                .points
                .iter()
                .map(|p| p.coords()[k])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                    (lo.min(c), hi.max(c))
                });
            spread = spread.max(hi - lo);
        }
        spread.max(1e-12)
    }

    /// The same measure with the listed points appended at zero weight.
    pub fn padded(&self, extra: &[HPoint]) -> Result<Self> {
        let mut points = self.points.clone();
        points.extend_from_slice(extra);
        let mut weights = self.weights.clone();
        weights.resize(points.len(), 0.0);
        Self::unnormalized(points, weights)
    }

    /// Reorder atoms: new atom `a` is old atom `order[a]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.k()];
        for &o in order {
            if o >= self.k() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
        }
        if order.len() != self.k() {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        Ok(Self {
            points: order.iter().map(|&o| self.points[o].clone()).collect(),
            weights: order.iter().map(|&o| self.weights[o]).collect(),
        })
    }
}

/// Validate a marginal family: at least two clouds of a shared dimension.
pub(crate) fn check_clouds(clouds: &[WeightedCloud]) -> Result<()> {
    if clouds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 marginals, got {}",
            clouds.len()
        )));
    }
    for c in &clouds[1..] {
        clouds[0].points[0].check_same_dim(&c.points[0])?;
    }
    Ok(())
}

/// Row-major multi-index arithmetic, last index fastest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Self {
        Self { dims }
    }

    pub fn of(clouds: &[WeightedCloud]) -> Self {
        Self::new(clouds.iter().map(WeightedCloud::k).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn m(&self) -> usize {
        self.dims.len()
    }

    /// Number of cells, saturating.
    pub fn len(&self) -> usize {
        self.dims.iter().fold(1usize, |a, &k| a.saturating_mul(k))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &k)| acc * k + i)
    }

    pub fn unrank_into(&self, mut c: usize, idx: &mut [usize]) {
        for (slot, &k) in idx.iter_mut().zip(&self.dims).rev() {
            *slot = c % k;
            c /= k;
        }
    }

    pub fn unrank(&self, c: usize) -> Vec<usize> {
        let mut idx = vec![0; self.m()];
        self.unrank_into(c, &mut idx);
        idx
    }

    pub fn contains(&self, idx: &[usize]) -> bool {
        idx.len() == self.m() && idx.iter().zip(&self.dims).all(|(&i, &k)| i < k)
    }

    /// Advance `idx` to the next cell; false after the last one.
    pub fn advance(&self, idx: &mut [usize]) -> bool {
        for (slot, &k) in idx.iter_mut().zip(&self.dims).rev() {
            *slot += 1;
            if *slot < k {
                return true;
            }
            *slot = 0;
        }
        false
    }
}

/// One atom of a coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub idx: Vec<usize>,
    pub mass: f64,
}

/// A sparse coupling of `m` marginals, entries sorted by multi-index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingTensor {
    pub shape: Shape,
    pub support: Vec<SupportEntry>,
}

impl CouplingTensor {
    /// Drops nonpositive masses and sorts by multi-index.
    pub fn new(shape: Shape, entries: Vec<SupportEntry>) -> Result<Self> {
        let mut support = Vec::with_capacity(entries.len());
        for e in entries {
            if !shape.contains(&e.idx) {
                return Err(Error::InvalidArgument(format!(
                    "multi-index {:?} outside shape {:?}",
                    e.idx,
                    shape.dims()
                )));
            }
            if !e.mass.is_finite() || e.mass < 0.0 {
                return Err(Error::InvalidArgument(format!("invalid mass {}", e.mass)));
            }
            if e.mass > 0.0 {
                support.push(e);
            }
        }
        support.sort_by(|a, b| a.idx.cmp(&b.idx));
        Ok(Self { shape, support })
    }

    pub fn total_mass(&self) -> f64 {
        self.support.iter().map(|e| e.mass).sum()
    }

    /// `sum_x c(x) gamma(x)`.
    pub fn value(&self, cost: &CostTensor) -> f64 {
        self.support.iter().map(|e| e.mass * cost.at(&e.idx)).sum()
    }

    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.shape.dims().iter().map(|&k| vec![0.0; k]).collect();
        for e in &self.support {
            for (i, &a) in e.idx.iter().enumerate() {
                out[i][a] += e.mass;
            }
        }
        out
    }

    /// Largest absolute marginal residual against the clouds.
    pub fn marginal_residual(&self, clouds: &[WeightedCloud]) -> Result<f64> {
        if Shape::of(clouds) != self.shape {
            return Err(Error::InvalidArgument(
                "coupling shape does not match the clouds".into(),
            ));
        }
        let mut worst = 0.0f64;
        for (got, cloud) in self.marginals().iter().zip(clouds) {
            for (g, w) in got.iter().zip(cloud.weights()) {
                worst = worst.max((g - w).abs());
            }
        }
        Ok(worst)
    }

    pub fn is_feasible(&self, clouds: &[WeightedCloud], tol: f64) -> Result<bool> {
        Ok(self.marginal_residual(clouds)? <= tol && (self.total_mass() - 1.0).abs() <= tol)
    }

    /// The product coupling of the clouds.
    pub fn product(clouds: &[WeightedCloud]) -> Result<Self> {
        let shape = Shape::of(clouds);
        let mut idx = vec![0; shape.m()];
        let mut entries = Vec::with_capacity(shape.len());
        loop {
            let mass = idx
                .iter()
                .zip(clouds)
                .map(|(&a, c)| c.weights()[a])
                .product();
            entries.push(SupportEntry {
                idx: idx.clone(),
                mass,
            });
            if !shape.advance(&mut idx) {
                break;
            }
        }
        Self::new(shape, entries)
    }

    /// Total-variation distance `sum |gamma - gamma'|`, over the union of supports.
    pub fn total_variation(&self, other: &CouplingTensor) -> f64 {
        let (mut i, mut j, mut tv) = (0, 0, 0.0);
        let (a, b) = (&self.support, &other.support);
        while i < a.len() || j < b.len() {
            match (a.get(i), b.get(j)) {
                (Some(x), Some(y)) if x.idx == y.idx => {
                    tv += (x.mass - y.mass).abs();
                    i += 1;
                    j += 1;
                }
                (Some(x), Some(y)) if x.idx < y.idx => {
                    tv += x.mass;
                    i += 1;
                }
                (Some(x), None) => {
                    tv += x.mass;
                    i += 1;
                }
                (_, Some(y)) => {
                    tv += y.mass;
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        tv
    }

    /// Relabel atoms: marginal `i`'s index `a` becomes `maps[i][a]`.
    pub fn relabeled(&self, maps: &[Vec<usize>]) -> Result<Self> {
        let entries = self
            .support
            .iter()
            .map(|e| SupportEntry {
                idx: e.idx.iter().zip(maps).map(|(&a, map)| map[a]).collect(),
                mass: e.mass,
            })
            .collect();
        let dims = maps.iter().map(Vec::len).collect();
        Self::new(Shape::new(dims), entries)
    }
}

/// Dual potentials `u_i` on the atoms of each marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSet {
    pub u: Vec<Vec<f64>>,
}

impl PotentialSet {
    pub fn zeros(shape: &Shape) -> Self {
        Self {
            u: shape.dims().iter().map(|&k| vec![0.0; k]).collect(),
        }
    }

    /// `sum_i u_i(x_i)` at a multi-index.
    pub fn sum_at(&self, idx: &[usize]) -> f64 {
        idx.iter().zip(&self.u).map(|(&a, ui)| ui[a]).sum()
    }

    /// Shift `u_i`, `i >= 2`, to zero mean under `mu_i`, absorbing the shifts into `u_1`.
    pub fn fix_gauge(&mut self, clouds: &[WeightedCloud]) {
        for i in 1..self.u.len() {
            let mean: f64 = self.u[i]
                .iter()
                .zip(clouds[i].weights())
                .map(|(u, w)| u * w)
                .sum();
            self.u[i].iter_mut().for_each(|v| *v -= mean);
            self.u[0].iter_mut().for_each(|v| *v += mean);
        }
    }
}

/// Multi-indices into a family of clouds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleSet {
    pub tuples: Vec<Vec<usize>>,
}

impl TupleSet {
    pub fn from_plan(plan: &CouplingTensor) -> Self {
        Self {
            tuples: plan.support.iter().map(|e| e.idx.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn contains(&self, idx: &[usize]) -> bool {
        self.tuples.iter().any(|t| t == idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(c: &[f64]) -> HPoint {
        HPoint::from_coords(c.to_vec()).unwrap()
    }

    #[test]
    fn cloud_validation() {
        let p = vec![pt(&[0.0, 0.0, 0.0]), pt(&[1.0, 0.0, 0.0])];
        assert!(WeightedCloud::new(p.clone(), vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            WeightedCloud::new(p.clone(), vec![0.5, 0.4]),
            Err(Error::WeightSum { .. })
        ));
        assert!(WeightedCloud::new(p.clone(), vec![1.5, -0.5]).is_err());
        assert!(WeightedCloud::new(p.clone(), vec![1.0]).is_err());
        let c = WeightedCloud::normalized(p, vec![2.0, 2.0]).unwrap();
        assert_eq!(c.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn cloud_json_checks_n() {
        let ok: WeightedCloud =
            serde_json::from_str(r#"{"n":1,"points":[[0,0,0]],"weights":[1]}"#).unwrap();
        assert_eq!(ok.k(), 1);
        assert!(serde_json::from_str::<WeightedCloud>(
            r#"{"n":2,"points":[[0,0,0]],"weights":[1]}"#
        )
        .is_err());
    }

    #[test]
    fn shape_rank_round_trip() {
        let s = Shape::new(vec![2, 3, 4]);
        let mut idx = vec![0; 3];
        let mut c = 0;
        loop {
            assert_eq!(s.rank(&idx), c);
            assert_eq!(s.unrank(c), idx);
            c += 1;
            if !s.advance(&mut idx) {
                break;
            }
        }
        assert_eq!(c, s.len());
    }

    #[test]
    fn product_coupling_is_feasible() {
        let a = WeightedCloud::new(
            vec![pt(&[0.0, 0.0, 0.0]), pt(&[1.0, 0.0, 0.0])],
            vec![0.25, 0.75],
        )
        .unwrap();
        let b = WeightedCloud::uniform(vec![
            pt(&[0.0, 1.0, 0.0]),
            pt(&[0.0, 2.0, 0.0]),
            pt(&[0.0, 3.0, 0.0]),
        ])
        .unwrap();
        let clouds = vec![a, b];
        let p = CouplingTensor::product(&clouds).unwrap();
        assert!(p.is_feasible(&clouds, 1e-15).unwrap());
        assert_eq!(p.total_variation(&p), 0.0);
        let q = CouplingTensor::new(p.shape.clone(), vec![]).unwrap();
        assert!((p.total_variation(&q) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gauge_fix_preserves_tuple_sums() {
        let clouds = vec![
            WeightedCloud::uniform(vec![pt(&[0.0, 0.0, 0.0]), pt(&[1.0, 0.0, 0.0])]).unwrap(),
            WeightedCloud::uniform(vec![pt(&[0.0, 0.0, 1.0]), pt(&[1.0, 0.0, 1.0])]).unwrap(),
        ];
        let mut u = PotentialSet {
            u: vec![vec![1.0, 2.0], vec![3.0, 7.0]],
        };
        let before = u.sum_at(&[1, 0]);
        u.fix_gauge(&clouds);
        assert_eq!(u.u[1], vec![-2.0, 2.0]);
        assert!((u.sum_at(&[1, 0]) - before).abs() < 1e-15);
    }
}
