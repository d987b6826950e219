//! Revised simplex on the multi-marginal transportation polytope.
//!
//! One row per atom, except the first atom of marginals `2..m`: those rows are
//! implied by the others and dropping them leaves a full-rank system with
//! `sum k_i - m + 1` rows. The starting basis is a multi-marginal north-west
//! corner rule; the basis inverse is kept explicitly and rebuilt periodically.

use serde::{Deserialize, Serialize};

use super::{
    check_clouds, CostTensor, CouplingTensor, PotentialSet, Shape, SupportEntry, WeightedCloud,
};
use crate::error::{Error, Result};

/// Basic masses at or below this are dropped from the reported support.
const DUST: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpOptions {
    /// Pivot limit; `0` picks a bound from the problem size.
    pub max_iters: usize,
    pub refactor_every: usize,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub degenerate_limit: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self {
            max_iters: 0,
            refactor_every: 64,
            degenerate_limit: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LpSolution {
    pub plan: CouplingTensor,
    pub potentials: PotentialSet,
    pub value: f64,
    pub dual_value: f64,
    pub gap: f64,
    pub iterations: usize,
}

struct Rows {
    offsets: Vec<usize>,
    count: usize,
}

impl Rows {
    fn new(shape: &Shape) -> Self {
        let mut offsets = Vec::with_capacity(shape.m());
        let mut count = 0;
        for (i, &k) in shape.dims().iter().enumerate() {
            offsets.push(count);
            count += if i == 0 { k } else { k - 1 };
        }
        Self { offsets, count }
    }

    #[inline]
    fn row(&self, i: usize, a: usize) -> Option<usize> {
        if i == 0 {
            Some(a)
        } else if a == 0 {
            None
        } else {
            Some(self.offsets[i] + a - 1)
        }
    }
}

pub fn solve_exact_lp(
    cost: &CostTensor,
    clouds: &[WeightedCloud],
    opts: &LpOptions,
) -> Result<LpSolution> {
    check_clouds(clouds)?;
    let shape = Shape::of(clouds);
    if &shape != cost.shape() {
        return Err(Error::InvalidArgument(format!(
            "cost shape {:?} does not match marginals {:?}",
            cost.shape().dims(),
            shape.dims()
        )));
    }
    for (i, c) in clouds.iter().enumerate() {
        let sum: f64 = c.weights().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Infeasible(format!("marginal {i} has mass {sum}")));
        }
    }

    let mut lp = Simplex::new(cost, clouds, opts);
    lp.run()?;
    lp.finish(clouds)
}

struct Simplex<'a> {
    cost: &'a CostTensor,
    shape: Shape,
    rows: Rows,
    b: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: Vec<f64>,
    x: Vec<f64>,
    opts: LpOptions,
    iterations: usize,
    price_tol: f64,
}

impl<'a> Simplex<'a> {
    fn new(cost: &'a CostTensor, clouds: &[WeightedCloud], opts: &LpOptions) -> Self {
        let shape = Shape::of(clouds);
        let rows = Rows::new(&shape);
        let mut b = vec![0.0; rows.count];
        for (i, c) in clouds.iter().enumerate() {
            for (a, &w) in c.weights().iter().enumerate() {
                if let Some(r) = rows.row(i, a) {
                    b[r] = w;
                }
            }
        }
        let basis = north_west_corner(clouds);
        let mut in_basis = vec![false; shape.len()];
        for &c in &basis {
            in_basis[c] = true;
        }
        let r = rows.count;
        Self {
            cost,
            price_tol: 1e-11 * (1.0 + cost.max_abs()),
            shape,
            rows,
            b,
            basis,
            in_basis,
            binv: vec![0.0; r * r],
            x: vec![0.0; r],
            opts: *opts,
            iterations: 0,
        }
    }

    fn dim(&self) -> usize {
        self.rows.count
    }

    /// Rows covered by the column of cell `c`.
    fn column_rows(&self, c: usize, out: &mut Vec<usize>) {
        out.clear();
        let idx = self.shape.unrank(c);
        for (i, &a) in idx.iter().enumerate() {
            if let Some(r) = self.rows.row(i, a) {
                out.push(r);
            }
        }
    }

    fn refactor(&mut self) -> Result<()> {
        let r = self.dim();
        let mut mat = vec![0.0; r * r];
        let mut col = Vec::new();
        for (pos, &c) in self.basis.iter().enumerate() {
            self.column_rows(c, &mut col);
            for &q in &col {
                mat[q * r + pos] = 1.0;
            }
        }
        self.binv = invert(mat, r)?;
        for p in 0..r {
            let v: f64 = (0..r).map(|q| self.binv[p * r + q] * self.b[q]).sum();
            if v < -1e-9 {
                return Err(Error::Numeric(format!(
                    "basis lost primal feasibility ({v:e})"
                )));
            }
            self.x[p] = v.max(0.0);
        }
        Ok(())
    }

    fn duals(&self) -> Vec<f64> {
        let r = self.dim();
        let cb: Vec<f64> = self.basis.iter().map(|&c| self.cost.values()[c]).collect();
        (0..r)
            .map(|q| (0..r).map(|p| cb[p] * self.binv[p * r + q]).sum())
            .collect()
    }

    /// Per-marginal dual tables with the dropped rows set to 0.
    fn dual_tables(&self, y: &[f64]) -> Vec<Vec<f64>> {
        self.shape
            .dims()
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                (0..k)
                    .map(|a| self.rows.row(i, a).map_or(0.0, |r| y[r]))
                    .collect()
            })
            .collect()
    }

    /// Entering cell: most negative reduced cost, or the first negative one under Bland.
    fn price(&self, tables: &[Vec<f64>], bland: bool) -> Option<usize> {
        let mut idx = vec![0; self.shape.m()];
        let mut best: Option<(usize, f64)> = None;
        let values = self.cost.values();
        for (c, &cv) in values.iter().enumerate() {
            if c > 0 {
                self.shape.advance(&mut idx);
            }
            if self.in_basis[c] {
                continue;
            }
            let red = cv - idx.iter().zip(tables).map(|(&a, t)| t[a]).sum::<f64>();
            if red < -self.price_tol {
                if bland {
                    return Some(c);
                }
                if best.is_none_or(|(_, r)| red < r) {
                    best = Some((c, red));
                }
            }
        }
        best.map(|(c, _)| c)
    }

    fn run(&mut self) -> Result<()> {
        self.refactor()?;
        let r = self.dim();
        let max_iters = if self.opts.max_iters == 0 {
            10_000 + 200 * r * self.shape.m()
        } else {
            self.opts.max_iters
        };
        let mut since_refactor = 0;
        let mut degenerate = 0;
        let mut col = Vec::new();
        let mut alpha = vec![0.0; r];
        loop {
            let bland = degenerate >= self.opts.degenerate_limit;
            let tables = self.dual_tables(&self.duals());
            let Some(enter) = self.price(&tables, bland) else {
                if since_refactor == 0 {
                    return Ok(());
                }
                // confirm optimality on a fresh factorization
                self.refactor()?;
                since_refactor = 0;
                continue;
            };
            if self.iterations >= max_iters {
                return Err(Error::Numeric(format!(
                    "simplex pivot limit {max_iters} reached (cycling guard)"
                )));
            }

            self.column_rows(enter, &mut col);
            for (p, a) in alpha.iter_mut().enumerate() {
                *a = col.iter().map(|&q| self.binv[p * r + q]).sum();
            }
            let mut theta = f64::INFINITY;
            for p in 0..r {
                if alpha[p] > 1e-9 {
                    theta = theta.min(self.x[p] / alpha[p]);
                }
            }
            if !theta.is_finite() {
                return Err(Error::Numeric("unbounded ray in a bounded polytope".into()));
            }
            let mut leave = usize::MAX;
            for p in 0..r {
                if alpha[p] > 1e-9 && self.x[p] / alpha[p] <= theta + 1e-15 {
                    let better = leave == usize::MAX
                        || if bland {
                            self.basis[p] < self.basis[leave]
                        } else {
                            alpha[p] > alpha[leave]
                        };
                    if better {
                        leave = p;
                    }
                }
            }
            let theta = self.x[leave] / alpha[leave];

            for p in 0..r {
                self.x[p] = (self.x[p] - theta * alpha[p]).max(0.0);
            }
            self.x[leave] = theta;
            let piv = alpha[leave];
            for q in 0..r {
                self.binv[leave * r + q] /= piv;
            }
            for p in 0..r {
                if p != leave && alpha[p] != 0.0 {
                    let f = alpha[p];
                    for q in 0..r {
                        self.binv[p * r + q] -= f * self.binv[leave * r + q];
                    }
                }
            }
            self.in_basis[self.basis[leave]] = false;
            self.in_basis[enter] = true;
            self.basis[leave] = enter;

            self.iterations += 1;
            degenerate = if theta <= 1e-15 { degenerate + 1 } else { 0 };
            since_refactor += 1;
            if since_refactor >= self.opts.refactor_every {
                self.refactor()?;
                since_refactor = 0;
            }
        }
    }

    fn finish(self, clouds: &[WeightedCloud]) -> Result<LpSolution> {
        let entries = self
            .basis
            .iter()
            .zip(&self.x)
            // cancellation residue in degenerate basic cells
            .filter(|(_, &x)| x > DUST)
            .map(|(&c, &mass)| SupportEntry {
                idx: self.shape.unrank(c),
                mass,
            })
            .collect();
        let plan = CouplingTensor::new(self.shape.clone(), entries)?;
        let mut potentials = PotentialSet {
            u: self.dual_tables(&self.duals()),
        };
        potentials.fix_gauge(clouds);
        let value = plan.value(self.cost);
        let dual_value = super::dual_objective(&potentials, clouds);
        Ok(LpSolution {
            plan,
            potentials,
            value,
            dual_value,
            gap: value - dual_value,
            iterations: self.iterations,
        })
    }
}

/// Multi-marginal north-west corner: `sum k_i - m + 1` cells, each covering one
/// new row, so the basis is triangular.
fn north_west_corner(clouds: &[WeightedCloud]) -> Vec<usize> {
    let shape = Shape::of(clouds);
    let m = clouds.len();
    let mut ptr = vec![0usize; m];
    let mut left: Vec<f64> = clouds.iter().map(|c| c.weights()[0]).collect();
    let mut cells = vec![shape.rank(&ptr)];
    loop {
        let open = (0..m).filter(|&i| ptr[i] + 1 < clouds[i].k());
        let Some(i) = open.min_by(|&a, &b| left[a].total_cmp(&left[b])) else {
            break;
        };
        let mass = left[i];
        for l in left.iter_mut() {
            *l = (*l - mass).max(0.0);
        }
        ptr[i] += 1;
        left[i] = clouds[i].weights()[ptr[i]];
        cells.push(shape.rank(&ptr));
    }
    cells
}

/// Gauss-Jordan inverse with partial pivoting of a row-major `r x r` matrix.
fn invert(mut a: Vec<f64>, r: usize) -> Result<Vec<f64>> {
    let mut inv = vec![0.0; r * r];
    for i in 0..r {
        inv[i * r + i] = 1.0;
    }
    for col in 0..r {
        let piv = (col..r)
            .max_by(|&p, &q| a[p * r + col].abs().total_cmp(&a[q * r + col].abs()))
            .unwrap_or(col);
        if a[piv * r + col].abs() < 1e-12 {
            return Err(Error::Numeric("singular simplex basis".into()));
        }
        if piv != col {
            for q in 0..r {
                a.swap(piv * r + q, col * r + q);
                inv.swap(piv * r + q, col * r + q);
            }
        }
        let d = a[col * r + col];
        for q in 0..r {
            a[col * r + q] /= d;
            inv[col * r + q] /= d;
        }
        for p in 0..r {
            if p != col {
                let f = a[p * r + col];
                if f != 0.0 {
                    for q in 0..r {
                        a[p * r + q] -= f * a[col * r + q];
                        inv[p * r + q] -= f * inv[col * r + q];
                    }
                }
            }
        }
    }
    Ok(inv)
}
