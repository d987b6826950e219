use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::seq::{index, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CostTensor, CouplingTensor, PotentialSet, Shape, TupleSet, WeightedCloud};
use crate::error::{Error, Result};

/// `sum_i sum_a mu_i(a) u_i(a)`.
pub fn dual_objective(u: &PotentialSet, clouds: &[WeightedCloud]) -> f64 {
    u.u.iter()
        .zip(clouds)
        .map(|(ui, c)| ui.iter().zip(c.weights()).map(|(v, w)| v * w).sum::<f64>())
        .sum()
}

/// Primal value minus dual value.
pub fn duality_gap(
    plan: &CouplingTensor,
    u: &PotentialSet,
    cost: &CostTensor,
    clouds: &[WeightedCloud],
) -> f64 {
    plan.value(cost) - dual_objective(u, clouds)
}

/// `u_i(a) = min { c(x) - sum_{j != i} u_j(x_j) : x_i = a }` over all grid tuples.
pub fn c_conjugate_update(u: &PotentialSet, cost: &CostTensor, i: usize) -> Vec<f64> {
    let shape = cost.shape();
    let mut out = vec![f64::INFINITY; shape.dims()[i]];
    let mut idx = vec![0; shape.m()];
    for (c, &cv) in cost.values().iter().enumerate() {
        if c > 0 {
            shape.advance(&mut idx);
        }
        let others: f64 = idx
            .iter()
            .zip(&u.u)
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (&a, uj))| uj[a])
            .sum();
        let a = idx[i];
        out[a] = out[a].min(cv - others);
    }
    out
}

/// Tuples with `sum_i u_i(x_i) >= c(x) - tol`.
pub fn gamma_u(u: &PotentialSet, cost: &CostTensor, tol: f64) -> TupleSet {
    let shape = cost.shape();
    let mut idx = vec![0; shape.m()];
    let mut tuples = Vec::new();
    for (c, &cv) in cost.values().iter().enumerate() {
        if c > 0 {
            shape.advance(&mut idx);
        }
        if u.sum_at(&idx) >= cv - tol {
            tuples.push(idx.clone());
        }
    }
    TupleSet { tuples }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityWitness {
    pub tuples: Vec<Vec<usize>>,
    pub rearranged: Vec<Vec<usize>>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub trials: usize,
    /// Smallest `sum c(rearranged) - sum c(original)` seen.
    pub worst_margin: f64,
    pub violation: Option<MonotonicityWitness>,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

/// Randomized c-cyclical monotonicity test: rearrange `N <= 4` tuples by an
/// independent permutation per marginal and compare total costs.
pub fn check_cyclical_monotonicity(
    tuples: &TupleSet,
    cost: &CostTensor,
    trials: usize,
    seed: u64,
) -> MonotonicityReport {
    const SLACK: f64 = 1e-8;
    let mut report = MonotonicityReport {
        trials,
        worst_margin: 0.0,
        violation: None,
    };
    if tuples.len() < 2 {
        return report;
    }
    let m = cost.shape().m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let big_n = rng.random_range(2..=tuples.len().min(4));
        let chosen: Vec<Vec<usize>> = index::sample(&mut rng, tuples.len(), big_n)
            .iter()
            .map(|t| tuples.tuples[t].clone())
            .collect();
        let mut rearranged = chosen.clone();
        for i in 0..m {
            let mut perm: Vec<usize> = (0..big_n).collect();
            perm.shuffle(&mut rng);
            for (j, &s) in perm.iter().enumerate() {
                rearranged[j][i] = chosen[s][i];
            }
        }
        let before: f64 = chosen.iter().map(|t| cost.at(t)).sum();
        let after: f64 = rearranged.iter().map(|t| cost.at(t)).sum();
        let margin = after - before;
        if margin < report.worst_margin {
            report.worst_margin = margin;
        }
        if margin < -SLACK && report.violation.as_ref().is_none_or(|v| margin < v.margin) {
            report.violation = Some(MonotonicityWitness {
                tuples: chosen,
                rearranged,
                margin,
            });
        }
    }
    report
}

/// Optimal potentials that are tight on the plan's support and as slack as
/// possible elsewhere: maximize `s` subject to `sum u = c` on the support and
/// `sum u + s <= c` off it.
///
/// Vertex duals of a degenerate basis can be tight on tuples that carry no
/// mass. Such spurious contact points make the conjugate potential kinked at
/// support points, which this construction avoids whenever the plan allows.
pub fn strict_potentials(
    cost: &CostTensor,
    clouds: &[WeightedCloud],
    plan: &CouplingTensor,
) -> Result<(PotentialSet, f64)> {
    let shape = Shape::of(clouds);
    if &shape != cost.shape() || plan.shape != shape {
        return Err(Error::InvalidArgument(
            "shapes of cost, plan and marginals differ".into(),
        ));
    }
    let mut pb = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<Vec<_>> = shape
        .dims()
        .iter()
        .map(|&k| {
            (0..k)
                .map(|_| pb.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
                .collect()
        })
        .collect();
    let s = pb.add_var(1.0, (0.0, 1.0 + cost.max_abs()));
    let mut on_support = vec![false; shape.len()];
    for e in &plan.support {
        on_support[shape.rank(&e.idx)] = true;
    }
    let mut idx = vec![0; shape.m()];
    let mut terms = Vec::with_capacity(shape.m() + 1);
    for (c, &cv) in cost.values().iter().enumerate() {
        if c > 0 {
            shape.advance(&mut idx);
        }
        terms.clear();
        terms.extend(idx.iter().enumerate().map(|(i, &a)| (vars[i][a], 1.0)));
        if on_support[c] {
            pb.add_constraint(terms.as_slice(), ComparisonOp::Eq, cv);
        } else {
            terms.push((s, 1.0));
            pb.add_constraint(terms.as_slice(), ComparisonOp::Le, cv);
        }
    }
    let sol = pb
        .solve()
        .map_err(|e| Error::Numeric(format!("strict dual LP failed: {e}")))?;
    let mut u = PotentialSet {
        u: vars
            .iter()
            .map(|vi| vi.iter().map(|&v| sol[v]).collect())
            .collect(),
    };
    u.fix_gauge(clouds);
    Ok((u, sol[s]))
}
