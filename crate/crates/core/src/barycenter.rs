//! Barycentric cost `c(x_1, ..., x_m) = min_y sum_i d(x_i, y)^p` and the
//! (possibly multivalued) barycenter map.
//!
//! The minimum is located by a coarse grid over a region known to contain every
//! minimizer, followed by Nelder-Mead descent from the best grid basins.
//! Derivatives are never used: the landscape has kinks along vertical
//! directions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heis::{self, HPoint};
use crate::metric::MetricKind;
use crate::optim::{self, SimplexOptions};

/// An ordered m-tuple of points of a common Heisenberg group, `m >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<HPoint>", into = "Vec<HPoint>")]
pub struct Tuple {
    points: Vec<HPoint>,
}

impl Tuple {
    pub fn new(points: Vec<HPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a tuple needs at least 2 points, got {}",
                points.len()
            )));
        }
        for p in &points[1..] {
            points[0].check_same_dim(p)?;
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[HPoint] {
        &self.points
    }

    pub fn m(&self) -> usize {
        self.points.len()
    }

    pub fn n(&self) -> usize {
        self.points[0].n()
    }

    /// Left translate every entry by `g`.
    pub fn translate(&self, g: &HPoint) -> Result<Tuple> {
        let points = self
            .points
            .iter()
            .map(|x| g.mul(x))
            .collect::<Result<Vec<_>>>()?;
        Tuple::new(points)
    }

    pub fn dilate(&self, lambda: f64) -> Result<Tuple> {
        let points = self
            .points
            .iter()
            .map(|x| x.dilate(lambda))
            .collect::<Result<Vec<_>>>()?;
        Tuple::new(points)
    }
}

impl TryFrom<Vec<HPoint>> for Tuple {
    type Error = Error;

    fn try_from(points: Vec<HPoint>) -> Result<Self> {
        Tuple::new(points)
    }
}

impl From<Tuple> for Vec<HPoint> {
    fn from(t: Tuple) -> Self {
        t.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarycenterOptions {
    /// Grid points per coordinate axis of the search region.
    pub grid: usize,
    /// Number of grid basins refined by simplex descent.
    pub starts: usize,
    /// Simplex convergence tolerance, relative to the search radius.
    pub xtol: f64,
    /// Candidates closer than this (relative to the search radius) are merged.
    pub merge_tol: f64,
    /// Relative tie tolerance: values within `tie_rel (1 + cost)` of the best tie.
    pub tie_rel: f64,
    pub max_evals: usize,
}

impl Default for BarycenterOptions {
    fn default() -> Self {
        Self {
            grid: 9,
            starts: 5,
            xtol: 1e-10,
            merge_tol: 1e-5,
            tie_rel: 1e-6,
            max_evals: 6000,
        }
    }
}

impl BarycenterOptions {
    pub fn tie_tolerance(&self, cost: f64) -> f64 {
        self.tie_rel * (1.0 + cost)
    }

    fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.starts == 0 || !(self.xtol > 0.0) || !(self.merge_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "barycenter options out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarycenterResult {
    pub minimizers: Vec<HPoint>,
    pub cost: f64,
    pub certified_unique: bool,
}

/// `{ center . w : |z_w|_inf <= horizontal, |t_w| <= vertical }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion {
    pub center: HPoint,
    pub horizontal: f64,
    pub vertical: f64,
}

impl SearchRegion {
    pub fn contains(&self, y: &HPoint) -> Result<bool> {
        let w = self.center.delta_to(y)?;
        let slack = 1e-12 * (1.0 + self.horizontal);
        let h_ok = w
            .zeta()
            .iter()
            .chain(w.eta())
            .all(|c| c.abs() <= self.horizontal + slack);
        let v_ok = w.t().abs() <= self.vertical + 1e-12 * (1.0 + self.vertical);
        Ok(h_ok && v_ok)
    }
}

/// `sum_i d(x_i, y)^p`.
pub fn cost_at(xx: &Tuple, y: &HPoint, kind: &MetricKind) -> Result<f64> {
    xx.points[0].check_same_dim(y)?;
    Ok(raw_cost(xx, y.coords(), kind))
}

fn raw_cost(xx: &Tuple, y: &[f64], kind: &MetricKind) -> f64 {
    xx.points.iter().map(|x| kind.cost_raw(x.coords(), y)).sum()
}

/// A box around `x_1` containing every `y` with `cost_at(xx, y) <= cost_at(xx, x_1)`.
///
/// Such `y` satisfy `d(x_1, y) <= R = M^{1/p}`, hence `|z_w| <= R` and
/// `|t_w| <= R^2 / kappa` where `d(0, [z, t])^2 >= kappa |t|`.
pub fn search_region(xx: &Tuple, kind: &MetricKind) -> SearchRegion {
    let center = xx.points[0].clone();
    let m_bound = raw_cost(xx, center.coords(), kind);
    let r = m_bound.powf(1.0 / kind.p);
    SearchRegion {
        center,
        horizontal: r,
        vertical: r * r / kind.vertical_constant(),
    }
}

/// Maps normalized coordinates `q in [-1, 1]^{2n+1}` into the search region.
struct Chart<'a> {
    xx: &'a Tuple,
    kind: &'a MetricKind,
    center: &'a [f64],
    horizontal: f64,
    vertical: f64,
}

impl Chart<'_> {
    fn point(&self, q: &[f64], w: &mut [f64], y: &mut [f64]) {
        let d = q.len() - 1;
        for k in 0..d {
            w[k] = self.horizontal * q[k];
        }
        w[d] = self.vertical * q[d];
        heis::mul_into(self.center, w, y);
    }

    fn value(&self, q: &[f64]) -> f64 {
        let mut w = vec![0.0; q.len()];
        let mut y = vec![0.0; q.len()];
        self.point(q, &mut w, &mut y);
        raw_cost(self.xx, &y, self.kind)
    }

    fn to_point(&self, q: &[f64]) -> HPoint {
        let mut w = vec![0.0; q.len()];
        let mut y = vec![0.0; q.len()];
        self.point(q, &mut w, &mut y);
        HPoint::from_coords_unchecked(y)
    }

    /// Normalized coordinates of `y`.
    fn coords_of(&self, y: &HPoint) -> Vec<f64> {
        let mut w = vec![0.0; y.coords().len()];
        heis::inv_mul_into(self.center, y.coords(), &mut w);
        let d = w.len() - 1;
        for k in 0..d {
            w[k] /= self.horizontal;
        }
        w[d] /= self.vertical;
        w
    }

    /// Homogeneous separation of two points, relative to the search radius.
    fn gap(&self, a: &HPoint, b: &HPoint) -> f64 {
        let (rho2, t) = heis::displacement_invariants(a.coords(), b.coords());
        (rho2.sqrt() / self.horizontal).max(t.abs() / self.vertical)
    }
}

pub fn compute_barycenter(
    xx: &Tuple,
    kind: &MetricKind,
    opts: &BarycenterOptions,
) -> Result<BarycenterResult> {
    opts.validate()?;
    let region = search_region(xx, kind);
    if region.horizontal == 0.0 {
        return Ok(BarycenterResult {
            minimizers: vec![region.center],
            cost: 0.0,
            certified_unique: true,
        });
    }
    if !region.horizontal.is_finite() {
        return Err(Error::Numeric(
            "non-finite cost at the first tuple entry".into(),
        ));
    }
    let chart = Chart {
        xx,
        kind,
        center: region.center.coords(),
        horizontal: region.horizontal,
        vertical: region.vertical,
    };

    let dim = xx.points[0].coords().len();
    let g = opts.grid;
    let cells = g.pow(dim as u32);
    let node = |i: usize| -1.0 + 2.0 * i as f64 / (g - 1) as f64;
    let unrank = |mut c: usize, q: &mut [f64]| {
        for qk in q.iter_mut() {
            *qk = node(c % g);
            c /= g;
        }
    };
    let values: Vec<f64> = (0..cells)
        .into_par_iter()
        .with_min_len(256)
        .map_init(
            || (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]),
            |(q, w, y), c| {
                unrank(c, q);
                chart.point(q, w, y);
                raw_cost(xx, y, kind)
            },
        )
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite barycentric cost on the search grid".into(),
        ));
    }

    // discrete local minima, best first, ties by cell index
    let mut basins: Vec<usize> = (0..cells)
        .filter(|&c| {
            let mut stride = 1;
            let mut rest = c;
            for _ in 0..dim {
                let i = rest % g;
                rest /= g;
                if i > 0 && values[c - stride] < values[c] {
                    return false;
                }
                if i + 1 < g && values[c + stride] < values[c] {
                    return false;
                }
                stride *= g;
            }
            true
        })
        .collect();
    basins.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    basins.truncate(opts.starts);

    let simplex = SimplexOptions {
        step: 2.0 / (g - 1) as f64,
        xtol: opts.xtol,
        ftol: 1e-15,
        max_evals: opts.max_evals,
        restarts: 3,
    };
    let mut found = Vec::with_capacity(basins.len());
    for &c in &basins {
        let mut q0 = vec![0.0; dim];
        unrank(c, &mut q0);
        let m = optim::minimize(|q| chart.value(q), &q0, &simplex);
        found.push((m.x, m.f));
    }
    collect_candidates(&chart, found, opts)
}

/// Local refinement from known approximate minimizers, skipping the grid.
pub fn refine_barycenter(
    xx: &Tuple,
    kind: &MetricKind,
    seeds: &[HPoint],
    opts: &BarycenterOptions,
) -> Result<BarycenterResult> {
    opts.validate()?;
    if seeds.is_empty() {
        return compute_barycenter(xx, kind, opts);
    }
    for s in seeds {
        xx.points[0].check_same_dim(s)?;
    }
    let region = search_region(xx, kind);
    if region.horizontal == 0.0 {
        return compute_barycenter(xx, kind, opts);
    }
    let chart = Chart {
        xx,
        kind,
        center: region.center.coords(),
        horizontal: region.horizontal,
        vertical: region.vertical,
    };
    let simplex = SimplexOptions {
        step: 0.05,
        xtol: opts.xtol,
        ftol: 1e-15,
        max_evals: opts.max_evals,
        restarts: 3,
    };
    let mut found = Vec::with_capacity(seeds.len());
    for s in seeds {
        let m = optim::minimize(|q| chart.value(q), &chart.coords_of(s), &simplex);
        found.push((m.x, m.f));
    }
    collect_candidates(&chart, found, opts)
}

fn collect_candidates(
    chart: &Chart<'_>,
    mut found: Vec<(Vec<f64>, f64)>,
    opts: &BarycenterOptions,
) -> Result<BarycenterResult> {
    found.sort_by(|a, b| a.1.total_cmp(&b.1));
    let best = found[0].1;
    if !best.is_finite() {
        return Err(Error::Numeric(
            "non-finite barycentric cost after refinement".into(),
        ));
    }
    let tie = opts.tie_tolerance(best);
    let mut minimizers: Vec<HPoint> = Vec::new();
    for (q, f) in &found {
        if *f > best + tie {
            break;
        }
        let y = chart.to_point(q);
        if minimizers.iter().all(|z| chart.gap(z, &y) > opts.merge_tol) {
            minimizers.push(y);
        }
    }
    Ok(BarycenterResult {
        certified_unique: minimizers.len() == 1,
        minimizers,
        cost: best.max(0.0),
    })
}
