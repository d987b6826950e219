use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_clouds, Shape, WeightedCloud};
use crate::barycenter::{compute_barycenter, BarycenterOptions, BarycenterResult, Tuple};
use crate::error::{Error, Result};
use crate::metric::MetricKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyOptions {
    pub max_tuples: usize,
    pub barycenter: BarycenterOptions,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            max_tuples: 2_000_000,
            barycenter: BarycenterOptions::default(),
        }
    }
}

/// Dense cost over every support tuple, row-major in the marginal indices.
///
/// Tensors built by [`assemble_cost_tensor`] also keep the barycenter result of
/// every tuple.
#[derive(Debug, Clone)]
pub struct CostTensor {
    shape: Shape,
    values: Vec<f64>,
    barycenters: Option<Vec<BarycenterResult>>,
}

impl CostTensor {
    pub fn from_values(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if shape.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} cost values for shape {:?}",
                values.len(),
                shape.dims()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite cost entry".into()));
        }
        Ok(Self {
            shape,
            values,
            barycenters: None,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.values[self.shape.rank(idx)]
    }

    pub fn barycenters(&self) -> Option<&[BarycenterResult]> {
        self.barycenters.as_deref()
    }

    pub fn barycenter(&self, idx: &[usize]) -> Option<&BarycenterResult> {
        self.barycenters.as_ref().map(|b| &b[self.shape.rank(idx)])
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Barycentric cost of every tuple of support points.
pub fn assemble_cost_tensor(
    clouds: &[WeightedCloud],
    kind: &MetricKind,
    opts: &AssemblyOptions,
) -> Result<CostTensor> {
    check_clouds(clouds)?;
    let shape = Shape::of(clouds);
    let tuples = shape.len();
    if tuples > opts.max_tuples {
        return Err(Error::SizeBudget {
            tuples,
            budget: opts.max_tuples,
        });
    }
    let results: Vec<BarycenterResult> = (0..tuples)
        .into_par_iter()
        .map(|c| {
            let idx = shape.unrank(c);
            let points = idx
                .iter()
                .zip(clouds)
                .map(|(&a, cloud)| cloud.points()[a].clone())
                .collect();
            compute_barycenter(&Tuple::new(points)?, kind, &opts.barycenter)
        })
        .collect::<Result<_>>()?;
    let values = results.iter().map(|r| r.cost).collect();
    Ok(CostTensor {
        shape,
        values,
        barycenters: Some(results),
    })
}

/// `d(x, y)^p` between two clouds, for two-marginal transport distances.
pub fn pairwise_cost_tensor(
    a: &WeightedCloud,
    b: &WeightedCloud,
    kind: &MetricKind,
) -> Result<CostTensor> {
    a.points()[0].check_same_dim(&b.points()[0])?;
    let values = a
        .points()
        .iter()
        .flat_map(|x| {
            b.points()
                .iter()
                .map(move |y| kind.cost_raw(x.coords(), y.coords()))
        })
        .collect();
    CostTensor::from_values(Shape::new(vec![a.k(), b.k()]), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heis::HPoint;

    fn pt(c: &[f64]) -> HPoint {
        HPoint::from_coords(c.to_vec()).unwrap()
    }

    #[test]
    fn dirac_family_is_zero() {
        let x = pt(&[0.2, -0.1, 0.4]);
        let clouds = vec![WeightedCloud::dirac(x.clone()); 3];
        let c =
            assemble_cost_tensor(&clouds, &MetricKind::cc(), &AssemblyOptions::default()).unwrap();
        assert_eq!(c.values(), &[0.0]);
        assert_eq!(c.barycenter(&[0, 0, 0]).unwrap().minimizers, vec![x]);
    }

    #[test]
    fn two_marginals_give_half_squared_distance() {
        let kind = MetricKind::cc();
        let a = WeightedCloud::uniform(vec![pt(&[0.0, 0.0, 0.0]), pt(&[1.0, 0.5, 0.3])]).unwrap();
        let b =
            WeightedCloud::uniform(vec![pt(&[-1.0, 0.2, 0.1]), pt(&[0.4, -0.8, -0.6])]).unwrap();
        let c = assemble_cost_tensor(&[a.clone(), b.clone()], &kind, &AssemblyOptions::default())
            .unwrap();
        let d2 = pairwise_cost_tensor(&a, &b, &kind).unwrap();
        for (x, y) in c.values().iter().zip(d2.values()) {
            assert!((x - y / 2.0).abs() < 1e-8 * (1.0 + y), "{x} vs {y}");
        }
    }

    #[test]
    fn swapping_identical_clouds_is_symmetric() {
        let kind = MetricKind::cc();
        let a = WeightedCloud::uniform(vec![pt(&[0.0, 0.0, 0.0]), pt(&[1.0, 0.5, 0.3])]).unwrap();
        let b =
            WeightedCloud::uniform(vec![pt(&[-1.0, 0.2, 0.1]), pt(&[0.4, -0.8, -0.6])]).unwrap();
        let c =
            assemble_cost_tensor(&[a.clone(), a, b], &kind, &AssemblyOptions::default()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let x = c.at(&[i, j, k]);
                    let y = c.at(&[j, i, k]);
                    assert!((x - y).abs() <= 2e-6 * (1.0 + x));
                }
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let a = WeightedCloud::uniform(vec![pt(&[0.0, 0.0, 0.0]), pt(&[1.0, 0.0, 0.0])]).unwrap();
        let opts = AssemblyOptions {
            max_tuples: 7,
            ..Default::default()
        };
        let err =
            assemble_cost_tensor(&[a.clone(), a.clone(), a], &MetricKind::cc(), &opts).unwrap_err();
        assert!(matches!(
            err,
            Error::SizeBudget {
                tuples: 8,
                budget: 7
            }
        ));
    }
}
