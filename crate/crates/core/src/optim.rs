//! Nelder-Mead simplex descent with restarts.

#[derive(Debug, Clone, Copy)]
pub(crate) struct SimplexOptions {
    /// Edge length of the initial simplex.
    pub step: f64,
    /// Stop once every vertex is within `xtol` (sup norm) of the best one.
    pub xtol: f64,
    /// ... or once the function spread is below `ftol (|f_best| + tiny)`.
    pub ftol: f64,
    pub max_evals: usize,
    pub restarts: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

pub(crate) fn minimize<F>(mut f: F, x0: &[f64], opts: &SimplexOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let mut best = run(&mut f, x0, opts.step, opts);
    let mut evals = best.evals;
    for _ in 0..opts.restarts {
        if evals >= opts.max_evals {
            break;
        }
        let step = (opts.step * 1e-2).max(100.0 * opts.xtol);
        let next = run(&mut f, &best.x, step, opts);
        evals += next.evals;
        let improved = best.f - next.f > opts.ftol * (best.f.abs() + 1e-300);
        if next.f < best.f {
            best.x = next.x;
            best.f = next.f;
        }
        if !improved {
            break;
        }
    }
    best.evals = evals;
    best
}

fn run<F>(f: &mut F, x0: &[f64], step: f64, opts: &SimplexOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    for k in 0..dim {
        let mut v = x0.to_vec();
        v[k] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut evals = dim + 1;
    let mut order: Vec<usize> = (0..=dim).collect();
    let mut centroid = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    let mut trial2 = vec![0.0; dim];

    loop {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let (ib, iw, isw) = (order[0], order[dim], order[dim - 1]);
        let spread = values[iw] - values[ib];
        let diam = simplex
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[ib])
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0f64, f64::max);
        if diam <= opts.xtol
            || spread <= opts.ftol * (values[ib].abs() + 1e-300)
            || evals >= opts.max_evals
        {
            return Minimum {
                x: simplex[ib].clone(),
                f: values[ib],
                evals,
            };
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in &order[..dim] {
            for (c, x) in centroid.iter_mut().zip(&simplex[i]) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= dim as f64);

        let along = |coef: f64, out: &mut Vec<f64>, worst: &[f64]| {
            for k in 0..dim {
                out[k] = centroid[k] + coef * (worst[k] - centroid[k]);
            }
        };

        along(-1.0, &mut trial, &simplex[iw]);
        let fr = f(&trial);
        evals += 1;
        if fr < values[ib] {
            along(-2.0, &mut trial2, &simplex[iw]);
            let fe = f(&trial2);
            evals += 1;
            if fe < fr {
                simplex[iw].copy_from_slice(&trial2);
                values[iw] = fe;
            } else {
                simplex[iw].copy_from_slice(&trial);
                values[iw] = fr;
            }
            continue;
        }
        if fr < values[isw] {
            simplex[iw].copy_from_slice(&trial);
            values[iw] = fr;
            continue;
        }
        // contraction, outside if the reflection helped at all
        let (coef, reference) = if fr < values[iw] {
            (-0.5, fr)
        } else {
            (0.5, values[iw])
        };
        along(coef, &mut trial2, &simplex[iw]);
        let fc = f(&trial2);
        evals += 1;
        if fc < reference {
            simplex[iw].copy_from_slice(&trial2);
            values[iw] = fc;
            continue;
        }
        // shrink toward the best vertex
        let best = simplex[ib].clone();
        for i in 0..=dim {
            if i == ib {
                continue;
            }
            for k in 0..dim {
                simplex[i][k] = best[k] + 0.5 * (simplex[i][k] - best[k]);
            }
            values[i] = f(&simplex[i]);
            evals += 1;
        }
    }
}
