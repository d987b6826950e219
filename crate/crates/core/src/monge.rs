//! Monge structure of optimal multi-marginal plans: graph extraction, the
//! transport map built from the first potential, inversion of the barycenter
//! map, the Wasserstein barycenter as a pushforward, and empirical checks of
//! the injectivity and negligibility conditions.

use std::f64::consts::FRAC_PI_2;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{
    compute_barycenter, cost_at, refine_barycenter, BarycenterOptions, BarycenterResult, Tuple,
};
use crate::error::{Error, Result};
use crate::heis::{Direction, HPoint};
use crate::metric::{exp_h, Metric, MetricKind};
use crate::mmot::{
    pairwise_cost_tensor, solve_exact_lp, CostTensor, CouplingTensor, LpOptions, PotentialSet,
    Shape, WeightedCloud,
};

/// Positional accuracy of computed barycenters, relative to the problem scale.
///
/// Value-based minimization resolves the vertical coordinate only to about
/// `sqrt(machine epsilon)`, which in the CC metric is a distance of order `1e-4`.
pub const BARYCENTER_RESOLUTION: f64 = 1e-4;

/// Largest coordinate spread over the union of the supports.
pub fn problem_scale(clouds: &[WeightedCloud]) -> f64 {
    let d = clouds[0].points()[0].coords().len();
    let mut spread = 0.0f64;
    for k in 0..d {
        let (lo, hi) = clouds
            .iter()
            .flat_map(|c| c.points().iter().map(move |p| p.coords()[k]))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c), hi.max(c))
            });
        spread = spread.max(hi - lo);
    }
    spread.max(1e-12)
}

/// `3 * BARYCENTER_RESOLUTION * scale`.
pub fn default_merge_tolerance(clouds: &[WeightedCloud]) -> f64 {
    3.0 * BARYCENTER_RESOLUTION * problem_scale(clouds)
}

// ---------------------------------------------------------------------------
// graph extraction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Atom of the first marginal.
    pub first: usize,
    pub idx: Vec<usize>,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MongeExtraction {
    pub assignments: Vec<Assignment>,
    pub graph_fraction: f64,
    /// First-marginal atoms whose mass is split over several tuples.
    pub conflicts: Vec<usize>,
}

pub fn extract_monge(plan: &CouplingTensor) -> MongeExtraction {
    let k1 = plan.shape.dims()[0];
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k1];
    for (e, entry) in plan.support.iter().enumerate() {
        groups[entry.idx[0]].push(e);
    }
    let mut assignments = Vec::new();
    let mut conflicts = Vec::new();
    let mut single = 0.0;
    for (first, g) in groups.iter().enumerate() {
        match g.as_slice() {
            [] => {}
            [e] => {
                let entry = &plan.support[*e];
                single += entry.mass;
                assignments.push(Assignment {
                    first,
                    idx: entry.idx.clone(),
                    mass: entry.mass,
                });
            }
            _ => conflicts.push(first),
        }
    }
    let total = plan.total_mass();
    MongeExtraction {
        assignments,
        graph_fraction: if total > 0.0 { single / total } else { 0.0 },
        conflicts,
    }
}

// ---------------------------------------------------------------------------
// barycenter index

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub y: HPoint,
    pub tuples: Vec<Vec<usize>>,
}

/// Cached barycenters of a tuple set, with entries closer than `merge_tol` merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarycenterIndex {
    pub entries: Vec<IndexEntry>,
    pub merge_tol: f64,
    pub metric: MetricKind,
}

impl BarycenterIndex {
    /// Index every candidate barycenter of the given tuples; needs a cost
    /// tensor carrying its barycenter cache.
    pub fn build(
        cost: &CostTensor,
        tuples: &[Vec<usize>],
        kind: &MetricKind,
        merge_tol: f64,
    ) -> Result<Self> {
        if cost.barycenters().is_none() {
            return Err(Error::InvalidArgument(
                "cost tensor has no barycenter cache".into(),
            ));
        }
        let mut entries: Vec<IndexEntry> = Vec::new();
        for t in tuples {
            if !cost.shape().contains(t) {
                return Err(Error::InvalidArgument(format!("tuple {t:?} out of range")));
            }
            let found = cost.barycenter(t).expect("cache checked above");
            for y in &found.minimizers {
                let hit = entries
                    .par_iter()
                    .position_first(|e| kind.dist(&e.y, y).is_ok_and(|d| d <= merge_tol));
                match hit {
                    Some(h) => {
                        if !entries[h].tuples.contains(t) {
                            entries[h].tuples.push(t.clone());
                        }
                    }
                    None => entries.push(IndexEntry {
                        y: y.clone(),
                        tuples: vec![t.clone()],
                    }),
                }
            }
        }
        Ok(Self {
            entries,
            merge_tol,
            metric: *kind,
        })
    }

    /// Entries shared by more than one tuple.
    pub fn collisions(&self) -> Vec<&IndexEntry> {
        self.entries.iter().filter(|e| e.tuples.len() > 1).collect()
    }
}

/// The unique indexed tuple whose barycenter lies within the merge tolerance of `y`.
pub fn invert_barycenter(idx: &BarycenterIndex, y: &HPoint) -> Result<Vec<usize>> {
    let mut tuples: Vec<Vec<usize>> = Vec::new();
    for e in &idx.entries {
        if idx.metric.dist(&e.y, y)? <= idx.merge_tol {
            for t in &e.tuples {
                if !tuples.contains(t) {
                    tuples.push(t.clone());
                }
            }
        }
    }
    match tuples.len() {
        0 => Err(Error::NotFound),
        1 => Ok(tuples.pop().expect("one element")),
        _ => {
            tuples.sort();
            Err(Error::C1Violation { witnesses: tuples })
        }
    }
}

// ---------------------------------------------------------------------------
// first potential off the grid and the transport map

/// Everything needed to evaluate the first potential away from its grid.
pub struct PotentialField<'a> {
    clouds: &'a [WeightedCloud],
    cost: &'a CostTensor,
    u: &'a PotentialSet,
    kind: MetricKind,
    opts: BarycenterOptions,
    rest_shape: Shape,
}

impl<'a> PotentialField<'a> {
    pub fn new(
        clouds: &'a [WeightedCloud],
        cost: &'a CostTensor,
        u: &'a PotentialSet,
        kind: &MetricKind,
        opts: &BarycenterOptions,
    ) -> Result<Self> {
        let shape = Shape::of(clouds);
        if &shape != cost.shape() || u.u.len() != shape.m() {
            return Err(Error::InvalidArgument(
                "potentials, cost and marginals disagree".into(),
            ));
        }
        for (ui, &k) in u.u.iter().zip(shape.dims()) {
            if ui.len() != k {
                return Err(Error::InvalidArgument(
                    "potential length differs from its marginal".into(),
                ));
            }
        }
        Ok(Self {
            clouds,
            cost,
            u,
            kind: *kind,
            opts: *opts,
            rest_shape: Shape::new(shape.dims()[1..].to_vec()),
        })
    }

    pub fn kind(&self) -> &MetricKind {
        &self.kind
    }

    fn nearest_atom(&self, x: &HPoint) -> Result<(usize, f64)> {
        let mut best = (0, f64::INFINITY);
        for (a, p) in self.clouds[0].points().iter().enumerate() {
            let d = self.kind.dist(p, x)?;
            if d < best.1 {
                best = (a, d);
            }
        }
        Ok(best)
    }

    fn rest_sum(&self, rest: &[usize]) -> f64 {
        rest.iter().zip(&self.u.u[1..]).map(|(&a, uj)| uj[a]).sum()
    }

    fn full_index(a: usize, rest: &[usize]) -> Vec<usize> {
        let mut idx = Vec::with_capacity(rest.len() + 1);
        idx.push(a);
        idx.extend_from_slice(rest);
        idx
    }

    /// `u_1(x) = min over grid tuples of c(x, x_2, ..., x_m) - sum_{j >= 2} u_j(x_j)`.
    ///
    /// Candidate tuples are pruned with the Lipschitz bound of the cost around
    /// the nearest grid atom; survivors are re-solved with warm starts from the
    /// cached barycenters.
    pub fn evaluate(&self, x: &HPoint) -> Result<f64> {
        self.clouds[0].points()[0].check_same_dim(x)?;
        let (a, delta) = self.nearest_atom(x)?;
        let p = self.kind.p;
        let mut rest = vec![0; self.rest_shape.m()];
        let mut cands: Vec<(f64, f64, usize)> = Vec::with_capacity(self.rest_shape.len());
        for r in 0..self.rest_shape.len() {
            self.rest_shape.unrank_into(r, &mut rest);
            let base = self.cost.at(&Self::full_index(a, &rest)) - self.rest_sum(&rest);
            let c1 = base + self.rest_sum(&rest);
            let slack = if delta == 0.0 {
                0.0
            } else {
                let reach = c1.powf(1.0 / p) + delta;
                let d = (c1 + p * reach.powf(p - 1.0) * delta).powf(1.0 / p) + delta;
                2.0 * p * d.powf(p - 1.0) * delta
            };
            cands.push((base - slack, base + slack, r));
        }
        if delta == 0.0 {
            return Ok(cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min));
        }
        cands.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.2.cmp(&r.2)));
        let mut best = cands.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let mut exact_best = f64::INFINITY;
        for &(lower, _, r) in &cands {
            if lower > best {
                break;
            }
            self.rest_shape.unrank_into(r, &mut rest);
            let value = self.exact(x, a, &rest)? - self.rest_sum(&rest);
            exact_best = exact_best.min(value);
            best = best.min(value);
        }
        Ok(exact_best)
    }

    fn exact(&self, x: &HPoint, a: usize, rest: &[usize]) -> Result<f64> {
        let mut points = Vec::with_capacity(rest.len() + 1);
        points.push(x.clone());
        for (j, &b) in rest.iter().enumerate() {
            points.push(self.clouds[j + 1].points()[b].clone());
        }
        let tuple = Tuple::new(points)?;
        let seeds = self
            .cost
            .barycenter(&Self::full_index(a, rest))
            .map(|r| r.minimizers.clone())
            .unwrap_or_default();
        Ok(refine_barycenter(&tuple, &self.kind, &seeds, &self.opts)?.cost)
    }

    /// Frame gradient `(X_1..X_n, Y_1..Y_n, Z) u_1` at `x` by central differences,
    /// rejecting points where the one-sided quotients disagree or halving the
    /// step moves the estimate.
    pub fn gradient(&self, x: &HPoint, h: f64) -> Result<Vec<f64>> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step must be positive, got {h}"
            )));
        }
        let n = x.n();
        let center = self.evaluate(x)?;
        let mut grad = Vec::with_capacity(2 * n + 1);
        for dir in Direction::frame(n) {
            let at = |s: f64| -> Result<f64> { self.evaluate(&x.mul(&HPoint::along(n, dir, s))?) };
            let (fp, fm) = (at(h)?, at(-h)?);
            let (fp2, fm2) = (at(h / 2.0)?, at(-h / 2.0)?);
            let central = (fp - fm) / (2.0 * h);
            let half = (fp2 - fm2) / h;
            let forward = (fp - center) / h;
            let backward = (center - fm) / h;
            let scale = 1.0 + central.abs();
            if (central - half).abs() > 1e-3 * scale {
                return Err(Error::NonDifferentiable(format!(
                    "{dir:?}: step halving moves the quotient from {central} to {half}"
                )));
            }
            if (forward - backward).abs() > 0.1 * scale {
                return Err(Error::NonDifferentiable(format!(
                    "{dir:?}: one-sided quotients {backward} and {forward} disagree"
                )));
            }
            grad.push(half + (half - central) / 3.0);
        }
        Ok(grad)
    }
}

/// `u_1` at an arbitrary point.
pub fn evaluate_u1(field: &PotentialField<'_>, x: &HPoint) -> Result<f64> {
    field.evaluate(x)
}

/// Tolerance for clamping the vertical exponential parameter into its domain.
const EXP_CLAMP: f64 = 1e-6;

/// Transport map of the first marginal: the barycenter `y` whose cost gradient
/// at `x_1` matches the gradient of `u_1`.
///
/// For the CC metric this is `x_1 . exp_H(-s (Xu_1 + i Yu_1), -s Zu_1)`, where
/// `s = 1 / (p d^{p-2})` converts the gradient of `d^p` into that of `d^2 / 2`
/// and `d = (|grad_H u_1| / p)^{1/(p-1)}`.
pub fn psi_map(field: &PotentialField<'_>, x1: &HPoint, h: f64) -> Result<HPoint> {
    let grad = field.gradient(x1, h)?;
    psi_from_gradient(&grad, field.kind(), x1)
}

pub fn psi_from_gradient(grad: &[f64], kind: &MetricKind, x1: &HPoint) -> Result<HPoint> {
    let n = x1.n();
    let p = kind.p;
    let horizontal = grad[..2 * n].iter().map(|g| g * g).sum::<f64>().sqrt();
    let vertical = grad[2 * n];
    let tiny = 1e-9 * (1.0 + horizontal + vertical.abs());
    if horizontal <= tiny {
        if vertical.abs() <= tiny {
            return Ok(x1.clone());
        }
        return Err(Error::Excluded(format!(
            "horizontal gradient vanishes while Zu = {vertical}"
        )));
    }
    match kind.metric {
        Metric::CarnotCaratheodory => {
            let d = (horizontal / p).powf(1.0 / (p - 1.0));
            let s = 1.0 / (p * d.powf(p - 2.0));
            let ab: Vec<f64> = grad[..2 * n].iter().map(|g| -s * g).collect();
            let mut w = -s * vertical;
            if w.abs() > FRAC_PI_2 {
                if w.abs() <= FRAC_PI_2 + EXP_CLAMP {
                    w = FRAC_PI_2.copysign(w);
                } else {
                    return Err(Error::Domain(format!(
                        "vertical parameter {w} exceeds the exponential domain"
                    )));
                }
            }
            x1.mul(&exp_h(&ab, w)?)
        }
        Metric::Gauge => x1.mul(&solve_gauge_displacement(grad, p)?),
    }
}

/// Frame gradient at the origin of `x -> N(x^{-1} w)^p`, `N` the gauge norm.
pub fn gauge_cost_gradient(w: &[f64], p: f64) -> Vec<f64> {
    let n = w.len() / 2;
    let rho2: f64 = w[..2 * n].iter().map(|c| c * c).sum();
    let t = w[2 * n];
    let norm4 = rho2 * rho2 + t * t;
    if norm4 == 0.0 {
        return vec![0.0; w.len()];
    }
    let np4 = norm4.powf((p - 4.0) / 4.0);
    let ft = 0.5 * p * np4 * t;
    let mut g = vec![0.0; w.len()];
    for j in 0..n {
        let fz = p * np4 * rho2 * w[j];
        let fe = p * np4 * rho2 * w[n + j];
        g[j] = -fz + 2.0 * w[n + j] * ft;
        g[n + j] = -fe - 2.0 * w[j] * ft;
    }
    g[2 * n] = -ft;
    g
}

/// Damped Newton solve of `gauge_cost_gradient(w) = target`.
fn solve_gauge_displacement(target: &[f64], p: f64) -> Result<HPoint> {
    let dim = target.len();
    let n = dim / 2;
    let gh = target[..2 * n].iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = 1.0 + target.iter().map(|g| g.abs()).fold(0.0, f64::max);
    // horizontal displacement with the same horizontal gradient norm
    let radius = (gh / p).powf(1.0 / (p - 1.0));
    let mut w: Vec<f64> = target[..2 * n].iter().map(|g| -g / gh * radius).collect();
    w.push(0.0);
    let residual = |w: &[f64]| -> (Vec<f64>, f64) {
        let r: Vec<f64> = gauge_cost_gradient(w, p)
            .iter()
            .zip(target)
            .map(|(a, b)| a - b)
            .collect();
        let norm = r.iter().map(|c| c * c).sum::<f64>().sqrt();
        (r, norm)
    };
    let (mut r, mut norm) = residual(&w);
    for _ in 0..200 {
        if norm <= 1e-12 * scale {
            return HPoint::from_coords(w);
        }
        let mut jac = vec![0.0; dim * dim];
        for k in 0..dim {
            let step = 1e-7 * (1.0 + w[k].abs());
            let mut wp = w.clone();
            wp[k] += step;
            let mut wm = w.clone();
            wm[k] -= step;
            let gp = gauge_cost_gradient(&wp, p);
            let gm = gauge_cost_gradient(&wm, p);
            for q in 0..dim {
                jac[q * dim + k] = (gp[q] - gm[q]) / (2.0 * step);
            }
        }
        let Some(dw) = solve_linear(jac, r.iter().map(|c| -c).collect()) else {
            break;
        };
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let trial: Vec<f64> = w.iter().zip(&dw).map(|(a, b)| a + lambda * b).collect();
            let (rt, nt) = residual(&trial);
            if nt < norm {
                w = trial;
                r = rt;
                norm = nt;
                improved = true;
                break;
            }
            lambda *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if norm <= 1e-8 * scale {
        return HPoint::from_coords(w);
    }
    Err(Error::Numeric(format!(
        "gauge map inversion stalled with residual {norm:e}"
    )))
}

fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv =
            (col..n).max_by(|&p, &q| a[p * n + col].abs().total_cmp(&a[q * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}

/// Default derivative step: `1e-3` times the largest single-marginal diameter,
/// measured with the left-invariant gauge distance.
///
/// Kinks of the first potential are spaced like the atoms within a marginal,
/// not like the distance between marginals, so the union spread is only the
/// fallback for all-Dirac problems.
pub fn default_psi_step(clouds: &[WeightedCloud]) -> f64 {
    let gauge = MetricKind::gauge();
    let mut diameter = 0.0f64;
    for c in clouds {
        for (i, a) in c.points().iter().enumerate() {
            for b in &c.points()[i + 1..] {
                diameter = diameter.max(gauge.dist(a, b).unwrap_or(0.0));
            }
        }
    }
    if diameter > 1e-9 {
        1e-3 * diameter
    } else {
        1e-3 * problem_scale(clouds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiRecord {
    pub first: usize,
    pub mass: f64,
    pub psi: Option<HPoint>,
    /// Distance from `psi` to the nearest cached barycenter of the assigned tuple.
    pub distance: Option<f64>,
    pub excluded: Option<String>,
}

/// Evaluate the map on every single-valued atom and compare with the cached
/// barycenter of its assigned tuple.
pub fn psi_coherence(
    field: &PotentialField<'_>,
    extraction: &MongeExtraction,
    h: f64,
) -> Result<Vec<PsiRecord>> {
    extraction
        .assignments
        .par_iter()
        .map(|asg| {
            let x1 = &field.clouds[0].points()[asg.first];
            let mut record = PsiRecord {
                first: asg.first,
                mass: asg.mass,
                psi: None,
                distance: None,
                excluded: None,
            };
            match psi_map(field, x1, h) {
                Ok(y) => {
                    if let Some(cached) = field.cost.barycenter(&asg.idx) {
                        let mut best = f64::INFINITY;
                        for z in &cached.minimizers {
                            best = best.min(field.kind.dist(&y, z)?);
                        }
                        record.distance = Some(best);
                    }
                    record.psi = Some(y);
                }
                Err(
                    e @ (Error::NonDifferentiable(_)
                    | Error::Excluded(_)
                    | Error::Domain(_)
                    | Error::Numeric(_)),
                ) => record.excluded = Some(e.to_string()),
                Err(e) => return Err(e),
            }
            Ok(record)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Wasserstein barycenter

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PushforwardOptions {
    /// Use the first candidate when a charged tuple has several barycenters.
    pub select_first: bool,
    /// Atoms closer than this (sup norm on coordinates) are merged.
    pub merge_tol: f64,
}

impl Default for PushforwardOptions {
    fn default() -> Self {
        Self {
            select_first: false,
            merge_tol: 1e-9,
        }
    }
}

/// `b_# gamma`: each charged tuple sends its mass to its barycenter.
pub fn wasserstein_barycenter(
    plan: &CouplingTensor,
    cost: &CostTensor,
    opts: &PushforwardOptions,
) -> Result<WeightedCloud> {
    let Some(cache) = cost.barycenters() else {
        return Err(Error::InvalidArgument(
            "cost tensor has no barycenter cache".into(),
        ));
    };
    let results: Vec<BarycenterResult> = plan
        .support
        .iter()
        .map(|e| cache[cost.shape().rank(&e.idx)].clone())
        .collect();
    pushforward(plan, &results, opts)
}

/// Pushforward given the barycenter result of each support entry, in order.
pub fn pushforward(
    plan: &CouplingTensor,
    barycenters: &[BarycenterResult],
    opts: &PushforwardOptions,
) -> Result<WeightedCloud> {
    if barycenters.len() != plan.support.len() {
        return Err(Error::InvalidArgument(format!(
            "{} barycenters for {} support entries",
            barycenters.len(),
            plan.support.len()
        )));
    }
    let mut points: Vec<HPoint> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (e, r) in plan.support.iter().zip(barycenters) {
        if !r.certified_unique && !opts.select_first {
            return Err(Error::Ambiguity {
                tuple: e.idx.clone(),
                candidates: r.minimizers.len(),
            });
        }
        let y = &r.minimizers[0];
        let tol = opts.merge_tol * (1.0 + y.max_abs());
        let hit = points.iter().position(|q| {
            q.coords()
                .iter()
                .zip(y.coords())
                .all(|(a, b)| (a - b).abs() <= tol)
        });
        match hit {
            Some(h) => weights[h] += e.mass,
            None => {
                points.push(y.clone());
                weights.push(e.mass);
            }
        }
    }
    WeightedCloud::normalized(points, weights)
}

/// Optimal two-marginal transport cost with ground cost `d^p`.
pub fn transport_cost(a: &WeightedCloud, b: &WeightedCloud, kind: &MetricKind) -> Result<f64> {
    let cost = pairwise_cost_tensor(a, b, kind)?;
    Ok(solve_exact_lp(&cost, &[a.clone(), b.clone()], &LpOptions::default())?.value)
}

// ---------------------------------------------------------------------------
// negligibility of the barycenter set

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct C2Options {
    /// Enumerate every tuple up to this many; sample beyond it.
    pub exact_limit: usize,
    pub samples: usize,
    pub seed: u64,
    /// Distance below which a support point counts as lying on the barycenter set;
    /// `0` selects the default merge tolerance.
    pub tau: f64,
}

impl Default for C2Options {
    fn default() -> Self {
        Self {
            exact_limit: 100_000,
            samples: 10_000,
            seed: 0,
            tau: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2Report {
    pub min_support_to_barycenter_distance: Vec<f64>,
    pub estimated_overlap_mass: Vec<f64>,
    pub verdict: Vec<bool>,
    pub tuples_examined: usize,
    pub sampled: bool,
    pub tau: f64,
}

impl C2Report {
    pub fn passed(&self) -> bool {
        self.verdict.iter().all(|v| *v)
    }
}

/// Distance from each support to the barycenters of support tuples, and the
/// weight lying within `tau` of them. Uses the tensor's barycenter cache when given.
pub fn check_condition_c2(
    clouds: &[WeightedCloud],
    kind: &MetricKind,
    cache: Option<&CostTensor>,
    bary: &BarycenterOptions,
    opts: &C2Options,
) -> Result<C2Report> {
    let shape = Shape::of(clouds);
    let total = shape.len();
    let sampled = total > opts.exact_limit;
    let tuples: Vec<usize> = if sampled {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        (0..opts.samples)
            .map(|_| rng.random_range(0..total))
            .collect()
    } else {
        (0..total).collect()
    };
    let cache = cache.filter(|c| c.shape() == &shape && c.barycenters().is_some());
    let found: Vec<Vec<HPoint>> = tuples
        .par_iter()
        .map(|&c| {
            if let Some(t) = cache {
                return Ok(t.barycenters().expect("filtered")[c].minimizers.clone());
            }
            let idx = shape.unrank(c);
            let points = idx
                .iter()
                .zip(clouds)
                .map(|(&a, cl)| cl.points()[a].clone())
                .collect();
            Ok(compute_barycenter(&Tuple::new(points)?, kind, bary)?.minimizers)
        })
        .collect::<Result<_>>()?;
    let set: Vec<HPoint> = found.into_iter().flatten().collect();
    let tau = if opts.tau > 0.0 {
        opts.tau
    } else {
        default_merge_tolerance(clouds)
    };
    let mut report = C2Report {
        min_support_to_barycenter_distance: Vec::new(),
        estimated_overlap_mass: Vec::new(),
        verdict: Vec::new(),
        tuples_examined: tuples.len(),
        sampled,
        tau,
    };
    for cloud in clouds {
        let dists: Vec<f64> = cloud
            .points()
            .par_iter()
            .map(|x| {
                set.iter()
                    .map(|y| kind.dist(x, y))
                    .try_fold(f64::INFINITY, |m, d| d.map(|d| m.min(d)))
            })
            .collect::<Result<_>>()?;
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let overlap: f64 = dists
            .iter()
            .zip(cloud.weights())
            .filter(|(d, _)| **d <= tau)
            .map(|(_, w)| w)
            .sum();
        report.min_support_to_barycenter_distance.push(min);
        report.estimated_overlap_mass.push(overlap);
        report.verdict.push(overlap == 0.0);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// structural checks on optimal tuples

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SameBarycenterReport {
    pub shared_barycenter: bool,
    /// True when every `x_i`, `i >= 2`, stays off the vertical line through the
    /// shared barycenter (or when nothing is shared).
    pub hypothesis_holds: bool,
    pub hypothesis_failed: bool,
    /// Shared barycenter, distinct first entries and the hypothesis holding:
    /// impossible in exact arithmetic, so it signals solver inaccuracy.
    pub incident: bool,
}

/// Compare the barycenters of `(x_1, ..., x_m)` and `(xbar_1, x_2, ..., x_m)`.
pub fn verify_lemma_same_bc(
    xx: &Tuple,
    xbar1: &HPoint,
    kind: &MetricKind,
    opts: &BarycenterOptions,
) -> Result<SameBarycenterReport> {
    let mut other = xx.points().to_vec();
    other[0] = xbar1.clone();
    let other = Tuple::new(other)?;
    let a = compute_barycenter(xx, kind, opts)?;
    let b = compute_barycenter(&other, kind, opts)?;
    let mut shared: Option<HPoint> = None;
    for y in &a.minimizers {
        if cost_at(&other, y, kind)? <= b.cost + opts.tie_tolerance(b.cost) {
            shared = Some(y.clone());
            break;
        }
    }
    if shared.is_none() {
        for y in &b.minimizers {
            if cost_at(xx, y, kind)? <= a.cost + opts.tie_tolerance(a.cost) {
                shared = Some(y.clone());
                break;
            }
        }
    }
    let same_first = xx.points()[0]
        .coords()
        .iter()
        .zip(xbar1.coords())
        .all(|(p, q)| (p - q).abs() <= 1e-12 * (1.0 + p.abs()));
    let hypothesis_holds = match &shared {
        None => true,
        Some(y) => {
            let tube = 1e-4 * (1.0 + a.cost.powf(1.0 / kind.p));
            xx.points()[1..]
                .iter()
                .all(|x| y.delta_to(x).is_ok_and(|w| w.horizontal_norm() > tube))
        }
    };
    let shared_barycenter = shared.is_some();
    Ok(SameBarycenterReport {
        shared_barycenter,
        hypothesis_holds,
        hypothesis_failed: !hypothesis_holds,
        incident: shared_barycenter && hypothesis_holds && !same_first,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub pairs_checked: usize,
    /// Largest `cost_at(x', y) - c(x')` over swapped tuples `x'`.
    pub max_defect: f64,
    pub passed: bool,
}

/// For support tuples sharing a barycenter `y`, exchanging first entries keeps
/// `y` a barycenter.
pub fn check_swap_consistency(
    plan: &CouplingTensor,
    cost: &CostTensor,
    clouds: &[WeightedCloud],
    kind: &MetricKind,
    opts: &BarycenterOptions,
) -> Result<SwapReport> {
    let tuples: Vec<Vec<usize>> = plan.support.iter().map(|e| e.idx.clone()).collect();
    let index = BarycenterIndex::build(cost, &tuples, kind, default_merge_tolerance(clouds))?;
    let mut pairs = Vec::new();
    for e in index.collisions() {
        for (i, s) in e.tuples.iter().enumerate() {
            for t in &e.tuples[i + 1..] {
                pairs.push((e.y.clone(), s.clone(), t.clone()));
            }
        }
    }
    let mut report = SwapReport {
        pairs_checked: pairs.len(),
        max_defect: 0.0,
        passed: true,
    };
    for (y, s, t) in pairs {
        for (target, donor) in [(&s, &t), (&t, &s)] {
            let mut idx = target.clone();
            idx[0] = donor[0];
            let points = idx
                .iter()
                .zip(clouds)
                .map(|(&a, c)| c.points()[a].clone())
                .collect();
            let swapped = Tuple::new(points)?;
            let best = compute_barycenter(&swapped, kind, opts)?.cost;
            let defect = cost_at(&swapped, &y, kind)? - best;
            report.max_defect = report.max_defect.max(defect);
            if defect > 2.0 * opts.tie_tolerance(best) {
                report.passed = false;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmot::{assemble_cost_tensor, c_conjugate_update, AssemblyOptions, SupportEntry};

    fn pt(c: &[f64]) -> HPoint {
        HPoint::from_coords(c.to_vec()).unwrap()
    }

    fn close(a: &HPoint, b: &HPoint, tol: f64) -> bool {
        a.coords()
            .iter()
            .zip(b.coords())
            .all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn extraction_examples() {
        let dirac = CouplingTensor::new(
            Shape::new(vec![1, 1, 1]),
            vec![SupportEntry {
                idx: vec![0, 0, 0],
                mass: 1.0,
            }],
        )
        .unwrap();
        let ex = extract_monge(&dirac);
        assert_eq!(ex.graph_fraction, 1.0);
        assert!(ex.conflicts.is_empty());

        let a = WeightedCloud::uniform(vec![pt(&[0.0, 0.0, 0.0]), pt(&[1.0, 0.0, 0.0])]).unwrap();
        let product = CouplingTensor::product(&[a.clone(), a]).unwrap();
        let ex = extract_monge(&product);
        assert_eq!(ex.graph_fraction, 0.0);
        assert_eq!(ex.conflicts, vec![0, 1]);
    }

    #[test]
    fn gauge_gradient_matches_finite_differences() {
        let w = [0.4, -0.3, 0.7];
        for p in [2.0, 3.0] {
            let kind = MetricKind::new(Metric::Gauge, p).unwrap();
            let y = pt(&w);
            let f = |x: &HPoint| kind.raise(kind.dist(x, &y).unwrap());
            let analytic = gauge_cost_gradient(&w, p);
            for (k, dir) in Direction::frame(1).into_iter().enumerate() {
                let fd = crate::heis::frame_derivative(f, &HPoint::origin(1), dir, 1e-6).unwrap();
                assert!(
                    (fd - analytic[k]).abs() < 1e-6,
                    "p={p} {dir:?}: {fd} vs {}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn gauge_inversion_recovers_displacements() {
        for (w, p) in [
            ([0.4, -0.3, 0.7], 2.0),
            ([-1.0, 0.2, -0.1], 3.0),
            ([0.01, 0.5, 2.0], 2.0),
        ] {
            let g = gauge_cost_gradient(&w, p);
            let got = solve_gauge_displacement(&g, p).unwrap();
            assert!(close(&got, &pt(&w), 1e-7), "{w:?}: {:?}", got.coords());
        }
        let kind = MetricKind::gauge();
        assert!(matches!(
            psi_from_gradient(&[0.0, 0.0, 0.8], &kind, &HPoint::origin(1)),
            Err(Error::Excluded(_))
        ));
    }

    #[test]
    fn cc_map_inverts_the_cost_gradient() {
        for p in [2.0, 3.0] {
            let kind = MetricKind::cc().with_p(p).unwrap();
            let x = pt(&[0.3, -0.2, 0.5]);
            let y = pt(&[1.0, 0.4, -0.3]);
            let f = |z: &HPoint| kind.raise(kind.dist(z, &y).unwrap());
            let grad: Vec<f64> = Direction::frame(1)
                .into_iter()
                .map(|dir| crate::heis::frame_derivative(f, &x, dir, 1e-6).unwrap())
                .collect();
            let got = psi_from_gradient(&grad, &kind, &x).unwrap();
            assert!(close(&got, &y, 1e-6), "p={p}: {:?}", got.coords());
        }
    }

    #[test]
    fn index_lookup_and_collisions() {
        let kind = MetricKind::cc();
        let a = WeightedCloud::uniform(vec![pt(&[1.0, 0.0, 0.0]), pt(&[0.0, 1.0, 0.0])]).unwrap();
        let b = WeightedCloud::uniform(vec![pt(&[-1.0, 0.0, 0.0]), pt(&[0.0, -1.0, 0.0])]).unwrap();
        let clouds = vec![a, b];
        let cost = assemble_cost_tensor(&clouds, &kind, &AssemblyOptions::default()).unwrap();
        let tol = default_merge_tolerance(&clouds);
        let index = BarycenterIndex::build(&cost, &[vec![0, 0], vec![1, 1]], &kind, tol).unwrap();
        match invert_barycenter(&index, &HPoint::origin(1)) {
            Err(Error::C1Violation { witnesses }) => {
                assert_eq!(witnesses, vec![vec![0, 0], vec![1, 1]])
            }
            other => panic!("expected a collision, got {other:?}"),
        }
        let lone = BarycenterIndex::build(&cost, &[vec![0, 1]], &kind, tol).unwrap();
        let y = cost.barycenter(&[0, 1]).unwrap().minimizers[0].clone();
        assert_eq!(invert_barycenter(&lone, &y).unwrap(), vec![0, 1]);
        assert!(matches!(
            invert_barycenter(&lone, &pt(&[5.0, 5.0, 5.0])),
            Err(Error::NotFound)
        ));
    }

    #[test]
    fn dirac_second_marginal_maps_to_midpoints() {
        let kind = MetricKind::cc();
        let a = WeightedCloud::uniform(vec![
            pt(&[0.0, 0.0, 0.0]),
            pt(&[1.0, 0.3, 0.2]),
            pt(&[0.4, -0.8, -0.5]),
        ])
        .unwrap();
        let y0 = pt(&[2.0, 1.0, 0.5]);
        let clouds = vec![a, WeightedCloud::dirac(y0.clone())];
        let cost = assemble_cost_tensor(&clouds, &kind, &AssemblyOptions::default()).unwrap();
        let lp = solve_exact_lp(&cost, &clouds, &LpOptions::default()).unwrap();
        let mut u = lp.potentials.clone();
        u.u[0] = c_conjugate_update(&u, &cost, 0);
        let opts = BarycenterOptions::default();
        let field = PotentialField::new(&clouds, &cost, &u, &kind, &opts).unwrap();
        let h = default_psi_step(&clouds);
        for (a, x) in clouds[0].points().iter().enumerate() {
            assert!((field.evaluate(x).unwrap() - u.u[0][a]).abs() < 1e-9);
            let psi = psi_map(&field, x, h).unwrap();
            let mid = &cost.barycenter(&[a, 0]).unwrap().minimizers[0];
            assert!(
                kind.dist(&psi, mid).unwrap() < 1e-3,
                "atom {a}: {:?} vs {:?}",
                psi.coords(),
                mid.coords()
            );
        }
    }

    #[test]
    fn identical_marginals_map_to_themselves() {
        let kind = MetricKind::cc().with_p(3.0).unwrap();
        let a = WeightedCloud::uniform(vec![pt(&[0.0, 0.0, 0.0]), pt(&[1.0, 0.3, 0.2])]).unwrap();
        let clouds = vec![a.clone(), a];
        let cost = assemble_cost_tensor(&clouds, &kind, &AssemblyOptions::default()).unwrap();
        let u = PotentialSet::zeros(cost.shape());
        let opts = BarycenterOptions::default();
        let field = PotentialField::new(&clouds, &cost, &u, &kind, &opts).unwrap();
        let x = &clouds[0].points()[1];
        let psi = psi_map(&field, x, default_psi_step(&clouds)).unwrap();
        assert!(kind.dist(&psi, x).unwrap() < 1e-3);
    }

    #[test]
    fn pushforward_examples() {
        let kind = MetricKind::cc();
        let x = pt(&[0.2, 0.1, -0.4]);
        let dirac = vec![WeightedCloud::dirac(x.clone()); 3];
        let cost = assemble_cost_tensor(&dirac, &kind, &AssemblyOptions::default()).unwrap();
        let lp = solve_exact_lp(&cost, &dirac, &LpOptions::default()).unwrap();
        let nu = wasserstein_barycenter(&lp.plan, &cost, &PushforwardOptions::default()).unwrap();
        assert_eq!(nu.points(), &[x]);

        let a = WeightedCloud::uniform(vec![
            pt(&[0.0, 0.0, 0.0]),
            pt(&[1.0, 0.3, 0.2]),
            pt(&[-0.5, 0.9, 0.1]),
        ])
        .unwrap();
        let same = vec![a.clone(), a.clone(), a.clone()];
        let cost = assemble_cost_tensor(&same, &kind, &AssemblyOptions::default()).unwrap();
        let lp = solve_exact_lp(&cost, &same, &LpOptions::default()).unwrap();
        let nu = wasserstein_barycenter(&lp.plan, &cost, &PushforwardOptions::default()).unwrap();
        assert!(transport_cost(&a, &nu, &kind).unwrap() < 1e-12);
    }

    #[test]
    fn ambiguous_barycenters_are_rejected() {
        let kind = MetricKind::cc();
        let clouds = vec![
            WeightedCloud::dirac(HPoint::origin(1)),
            WeightedCloud::dirac(pt(&[0.0, 0.0, 1.0])),
        ];
        let cost = assemble_cost_tensor(&clouds, &kind, &AssemblyOptions::default()).unwrap();
        let lp = solve_exact_lp(&cost, &clouds, &LpOptions::default()).unwrap();
        assert!(matches!(
            wasserstein_barycenter(&lp.plan, &cost, &PushforwardOptions::default()),
            Err(Error::Ambiguity { .. })
        ));
        let opts = PushforwardOptions {
            select_first: true,
            ..Default::default()
        };
        assert!(wasserstein_barycenter(&lp.plan, &cost, &opts).is_ok());
    }

    #[test]
    fn c2_examples() {
        let kind = MetricKind::cc();
        let bary = BarycenterOptions::default();
        let a = WeightedCloud::uniform(vec![pt(&[0.0, 0.0, 0.0]), pt(&[1.0, 0.3, 0.2])]).unwrap();
        let same = vec![a.clone(), a.clone()];
        let r = check_condition_c2(&same, &kind, None, &bary, &C2Options::default()).unwrap();
        assert!(!r.passed());
        assert_eq!(r.estimated_overlap_mass, vec![1.0, 1.0]);

        let diracs = vec![
            WeightedCloud::dirac(pt(&[0.0, 0.0, 0.0])),
            WeightedCloud::dirac(pt(&[2.0, 0.0, 0.0])),
            WeightedCloud::dirac(pt(&[0.0, 2.0, 0.0])),
        ];
        let r = check_condition_c2(&diracs, &kind, None, &bary, &C2Options::default()).unwrap();
        assert!(r.passed());
        assert!(r
            .min_support_to_barycenter_distance
            .iter()
            .all(|d| *d > 0.1));

        let sampled = C2Options {
            exact_limit: 1,
            samples: 5,
            seed: 3,
            ..Default::default()
        };
        let r = check_condition_c2(&same, &kind, None, &bary, &sampled).unwrap();
        assert!(r.sampled && r.tuples_examined == 5);
    }

    #[test]
    fn same_barycenter_check() {
        let kind = MetricKind::cc();
        let opts = BarycenterOptions::default();
        let xx = Tuple::new(vec![
            pt(&[0.5, 0.2, 0.1]),
            pt(&[-0.4, 0.6, 0.3]),
            pt(&[0.1, -0.7, -0.2]),
        ])
        .unwrap();
        let r = verify_lemma_same_bc(&xx, &xx.points()[0].clone(), &kind, &opts).unwrap();
        assert!(r.shared_barycenter && !r.incident);

        let moved = pt(&[0.7, 0.1, 0.3]);
        let r = verify_lemma_same_bc(&xx, &moved, &kind, &opts).unwrap();
        assert!(!r.shared_barycenter && !r.incident);

        // x_2 sits at the common barycenter, the origin
        let w1 = exp_h(&[1.0, 0.0], 0.3).unwrap();
        let xx = Tuple::new(vec![w1, HPoint::origin(1), pt(&[-1.0, 0.0, 0.0])]).unwrap();
        let bar = exp_h(&[1.0, 0.0], 0.0).unwrap();
        let r = verify_lemma_same_bc(&xx, &bar, &kind, &opts).unwrap();
        assert!(r.shared_barycenter, "{r:?}");
        assert!(r.hypothesis_failed && !r.incident);
    }
}
