//! Log-domain multi-marginal Sinkhorn with a final projection onto the
//! transportation polytope.

use serde::{Deserialize, Serialize};

use super::{
    check_clouds, CostTensor, CouplingTensor, PotentialSet, Shape, SupportEntry, WeightedCloud,
    MARG_TOL,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntropicOptions {
    /// Absolute regularization strength.
    pub epsilon: f64,
    pub max_iters: usize,
    pub marg_tol: f64,
}

impl Default for EntropicOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            max_iters: 20_000,
            marg_tol: MARG_TOL,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropicSolution {
    /// The rounded, exactly feasible coupling.
    pub plan: CouplingTensor,
    /// Scaled log-scalings `f_i`, gauge fixed.
    pub potentials: PotentialSet,
    pub value: f64,
    pub iterations: usize,
    /// Largest marginal residual before rounding.
    pub residual: f64,
}

pub fn solve_entropic(
    cost: &CostTensor,
    clouds: &[WeightedCloud],
    opts: &EntropicOptions,
) -> Result<EntropicSolution> {
    check_clouds(clouds)?;
    let shape = Shape::of(clouds);
    if &shape != cost.shape() {
        return Err(Error::InvalidArgument(
            "cost shape does not match the marginals".into(),
        ));
    }
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {}",
            opts.epsilon
        )));
    }
    let m = shape.m();
    let eps = opts.epsilon;
    let log_w: Vec<Vec<f64>> = clouds
        .iter()
        .map(|c| c.weights().iter().map(|w| w.ln()).collect())
        .collect();
    let mut f: Vec<Vec<f64>> = shape.dims().iter().map(|&k| vec![0.0; k]).collect();
    let cells = shape.len();
    let mut logp = vec![0.0; cells];
    let mut idx = vec![0; m];

    // log of the unnormalized coupling with slot `skip` left out
    let fill = |f: &[Vec<f64>], skip: Option<usize>, logp: &mut [f64], idx: &mut [usize]| {
        idx.iter_mut().for_each(|a| *a = 0);
        for (c, lp) in logp.iter_mut().enumerate() {
            if c > 0 {
                shape.advance(idx);
            }
            let mut s = -cost.values()[c] / eps;
            for i in 0..m {
                if Some(i) != skip {
                    s += f[i][idx[i]] / eps + log_w[i][idx[i]];
                }
            }
            *lp = s;
        }
    };

    let mut iterations = 0;
    let mut residual;
    loop {
        for i in 0..m {
            fill(&f, Some(i), &mut logp, &mut idx);
            let lse = grouped_log_sum_exp(&shape, &logp, i);
            for (a, fa) in f[i].iter_mut().enumerate() {
                *fa = if lse[a].is_finite() {
                    -eps * lse[a]
                } else {
                    0.0
                };
            }
        }
        iterations += 1;
        fill(&f, None, &mut logp, &mut idx);
        residual = 0.0f64;
        for (i, cloud) in clouds.iter().enumerate() {
            let lse = grouped_log_sum_exp(&shape, &logp, i);
            for (l, w) in lse.iter().zip(cloud.weights()) {
                residual = residual.max((l.exp() - w).abs());
            }
        }
        if residual <= opts.marg_tol {
            break;
        }
        if iterations >= opts.max_iters || !residual.is_finite() {
            return Err(Error::Convergence {
                iterations,
                residual,
            });
        }
    }

    let mut p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    round_to_polytope(&shape, &mut p, clouds);
    let entries = p
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(c, &mass)| SupportEntry {
            idx: shape.unrank(c),
            mass,
        })
        .collect();
    let plan = CouplingTensor::new(shape, entries)?;
    let mut potentials = PotentialSet { u: f };
    potentials.fix_gauge(clouds);
    Ok(EntropicSolution {
        value: plan.value(cost),
        plan,
        potentials,
        iterations,
        residual,
    })
}

/// `log sum_{x : x_i = a} exp(logp(x))` for every atom `a` of marginal `i`.
fn grouped_log_sum_exp(shape: &Shape, logp: &[f64], i: usize) -> Vec<f64> {
    let k = shape.dims()[i];
    let inner: usize = shape.dims()[i + 1..].iter().product();
    let slot = |c: usize| (c / inner) % k;
    let mut max = vec![f64::NEG_INFINITY; k];
    for (c, &l) in logp.iter().enumerate() {
        let a = slot(c);
        if l > max[a] {
            max[a] = l;
        }
    }
    let mut sum = vec![0.0; k];
    for (c, &l) in logp.iter().enumerate() {
        let a = slot(c);
        if max[a].is_finite() {
            sum[a] += (l - max[a]).exp();
        }
    }
    max.iter()
        .zip(&sum)
        .map(|(&mx, &s)| {
            if mx.is_finite() {
                mx + s.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// Scale down over-full atoms, then add a rank-one correction carrying the deficits.
fn round_to_polytope(shape: &Shape, p: &mut [f64], clouds: &[WeightedCloud]) {
    let m = shape.m();
    let strides: Vec<usize> = (0..m)
        .map(|i| shape.dims()[i + 1..].iter().product())
        .collect();
    let slot = |c: usize, i: usize| (c / strides[i]) % shape.dims()[i];
    let marginal = |p: &[f64], i: usize| {
        let mut out = vec![0.0; shape.dims()[i]];
        for (c, &v) in p.iter().enumerate() {
            out[slot(c, i)] += v;
        }
        out
    };
    for (i, cloud) in clouds.iter().enumerate() {
        let got = marginal(p, i);
        let scale: Vec<f64> = got
            .iter()
            .zip(cloud.weights())
            .map(|(&g, &w)| if g > w { w / g } else { 1.0 })
            .collect();
        for (c, v) in p.iter_mut().enumerate() {
            *v *= scale[slot(c, i)];
        }
    }
    let deficits: Vec<Vec<f64>> = clouds
        .iter()
        .enumerate()
        .map(|(i, cloud)| {
            marginal(p, i)
                .iter()
                .zip(cloud.weights())
                .map(|(g, w)| (w - g).max(0.0))
                .collect()
        })
        .collect();
    let delta = 1.0 - p.iter().sum::<f64>();
    if delta <= 0.0 {
        return;
    }
    let norm = delta.powi(m as i32 - 1);
    for (c, v) in p.iter_mut().enumerate() {
        let add: f64 = (0..m).map(|i| deficits[i][slot(c, i)]).product();
        *v += add / norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heis::HPoint;
    use crate::mmot::{solve_exact_lp, LpOptions};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(c: &[f64]) -> HPoint {
        HPoint::from_coords(c.to_vec()).unwrap()
    }

    fn instance(seed: u64, m: usize, k: usize) -> (Vec<WeightedCloud>, CostTensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clouds: Vec<_> = (0..m)
            .map(|_| {
                let pts = (0..k)
                    .map(|_| pt(&[rng.random_range(-1.0..1.0), 0.0, 0.0]))
                    .collect();
                let w = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
                WeightedCloud::normalized(pts, w).unwrap()
            })
            .collect();
        let shape = Shape::of(&clouds);
        let values = (0..shape.len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        (clouds, CostTensor::from_values(shape, values).unwrap())
    }

    #[test]
    fn dirac_marginals() {
        let clouds = vec![WeightedCloud::dirac(pt(&[0.0, 0.0, 0.0])); 3];
        let cost = CostTensor::from_values(Shape::of(&clouds), vec![0.7]).unwrap();
        for epsilon in [1e-3, 1.0, 1e3] {
            let s = solve_entropic(
                &cost,
                &clouds,
                &EntropicOptions {
                    epsilon,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(s.plan.support.len(), 1);
            assert!((s.plan.support[0].mass - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_epsilon_gives_the_product() {
        let (clouds, cost) = instance(1, 3, 4);
        let s = solve_entropic(
            &cost,
            &clouds,
            &EntropicOptions {
                epsilon: 1e7,
                ..Default::default()
            },
        )
        .unwrap();
        let product = CouplingTensor::product(&clouds).unwrap();
        assert!(s.plan.total_variation(&product) < 1e-6);
    }

    #[test]
    fn rounded_plan_is_feasible_and_dominates_the_lp() {
        for seed in 0..5 {
            let (clouds, cost) = instance(seed, 3, 5);
            let mut sorted = cost.values().to_vec();
            sorted.sort_by(f64::total_cmp);
            let epsilon = 0.01 * sorted[sorted.len() / 2];
            let s = solve_entropic(
                &cost,
                &clouds,
                &EntropicOptions {
                    epsilon,
                    ..Default::default()
                },
            )
            .unwrap();
            let lp = solve_exact_lp(&cost, &clouds, &LpOptions::default()).unwrap();
            assert!(s.plan.is_feasible(&clouds, MARG_TOL).unwrap());
            assert!(s.value >= lp.value - 1e-12);
            assert!(
                s.value <= 1.02 * lp.value,
                "seed {seed}: {} vs {}",
                s.value,
                lp.value
            );
        }
    }

    #[test]
    fn rounding_repairs_a_perturbed_coupling() {
        let (clouds, _) = instance(9, 3, 3);
        let shape = Shape::of(&clouds);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let product = CouplingTensor::product(&clouds).unwrap();
        let mut p: Vec<f64> = product
            .support
            .iter()
            .map(|e| e.mass * rng.random_range(0.8..1.2))
            .collect();
        round_to_polytope(&shape, &mut p, &clouds);
        let entries = p
            .iter()
            .enumerate()
            .map(|(c, &mass)| SupportEntry {
                idx: shape.unrank(c),
                mass,
            })
            .collect();
        let plan = CouplingTensor::new(shape, entries).unwrap();
        assert!(plan.is_feasible(&clouds, 1e-14).unwrap());
    }

    #[test]
    fn reports_non_convergence() {
        let (clouds, cost) = instance(4, 3, 5);
        let err = solve_entropic(
            &cost,
            &clouds,
            &EntropicOptions {
                epsilon: 1e-3,
                max_iters: 2,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Convergence { iterations: 2, .. }));
    }
}
