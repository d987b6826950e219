//! Heisenberg group arithmetic.
//!
//! A point `[z, t]` of `H^n` is stored as the flat coordinate vector
//! `(zeta_1..zeta_n, eta_1..eta_n, t)` with `z = zeta + i eta`. The group law is
//!
//! ```text
//! [z, t] . [z', t'] = [z + z', t + t' + 2 Im <z, conj(z')>]
//! ```
//!
//! where `<a, b> = sum_j a_j conj(b_j)`, so that
//! `2 Im <z, conj(z')> = 2 sum_j (eta_j zeta'_j - zeta_j eta'_j)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of `H^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct HPoint {
    coords: Vec<f64>,
}

impl HPoint {
    pub fn new(zeta: &[f64], eta: &[f64], t: f64) -> Result<Self> {
        if zeta.len() != eta.len() {
            return Err(Error::InvalidArgument(format!(
                "zeta has {} entries but eta has {}",
                zeta.len(),
                eta.len()
            )));
        }
        let mut coords = Vec::with_capacity(2 * zeta.len() + 1);
        coords.extend_from_slice(zeta);
        coords.extend_from_slice(eta);
        coords.push(t);
        Self::from_coords(coords)
    }

    /// Builds a point from `2n + 1` flat coordinates.
    pub fn from_coords(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 3 || coords.len().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "a point of H^n needs 2n+1 >= 3 coordinates, got {}",
                coords.len()
            )));
        }
        if let Some(bad) = coords.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite coordinate {bad}"
            )));
        }
        Ok(Self { coords })
    }

    pub(crate) fn from_coords_unchecked(coords: Vec<f64>) -> Self {
        debug_assert!(coords.len() >= 3 && coords.len() % 2 == 1);
        Self { coords }
    }

    pub fn origin(n: usize) -> Self {
        Self {
            coords: vec![0.0; 2 * n + 1],
        }
    }

    /// The axis point `[0, t]`.
    pub fn vertical(n: usize, t: f64) -> Self {
        let mut p = Self::origin(n);
        p.coords[2 * n] = t;
        p
    }

    /// `s e_dir`: the point reached from the origin after time `s` along a frame field.
    pub fn along(n: usize, dir: Direction, s: f64) -> Self {
        let mut p = Self::origin(n);
        p.coords[dir.coordinate(n)] = s;
        p
    }

    pub fn n(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn zeta(&self) -> &[f64] {
        &self.coords[..self.n()]
    }

    pub fn eta(&self) -> &[f64] {
        let n = self.n();
        &self.coords[n..2 * n]
    }

    pub fn t(&self) -> f64 {
        self.coords[2 * self.n()]
    }

    pub fn horizontal_norm_sq(&self) -> f64 {
        self.coords[..2 * self.n()].iter().map(|c| c * c).sum()
    }

    pub fn horizontal_norm(&self) -> f64 {
        self.horizontal_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.coords.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn check_same_dim(&self, other: &HPoint) -> Result<()> {
        if self.n() != other.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: other.n(),
            });
        }
        Ok(())
    }

    /// Group product `self . other`.
    pub fn mul(&self, other: &HPoint) -> Result<HPoint> {
        self.check_same_dim(other)?;
        let mut out = vec![0.0; self.coords.len()];
        mul_into(&self.coords, &other.coords, &mut out);
        Ok(HPoint { coords: out })
    }

    pub fn inv(&self) -> HPoint {
        HPoint {
            coords: self.coords.iter().map(|c| -c).collect(),
        }
    }

    /// `self^{-1} . other`, the displacement used by every left-invariant metric.
    pub fn delta_to(&self, other: &HPoint) -> Result<HPoint> {
        self.check_same_dim(other)?;
        let mut out = vec![0.0; self.coords.len()];
        inv_mul_into(&self.coords, &other.coords, &mut out);
        Ok(HPoint { coords: out })
    }

    pub fn dilate(&self, lambda: f64) -> Result<HPoint> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "dilation factor must be positive, got {lambda}"
            )));
        }
        let n = self.n();
        let mut coords = self.coords.clone();
        for c in &mut coords[..2 * n] {
            *c *= lambda;
        }
        coords[2 * n] *= lambda * lambda;
        Ok(HPoint { coords })
    }
}

impl From<HPoint> for Vec<f64> {
    fn from(p: HPoint) -> Self {
        p.coords
    }
}

impl TryFrom<Vec<f64>> for HPoint {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        HPoint::from_coords(coords)
    }
}

pub fn group_mul(x: &HPoint, y: &HPoint) -> Result<HPoint> {
    x.mul(y)
}

pub fn group_inv(x: &HPoint) -> HPoint {
    x.inv()
}

pub fn dilate(lambda: f64, x: &HPoint) -> Result<HPoint> {
    x.dilate(lambda)
}

/// `out = x . y` on raw coordinate slices of equal odd length.
#[inline]
pub(crate) fn mul_into(x: &[f64], y: &[f64], out: &mut [f64]) {
    let n = x.len() / 2;
    let mut twist = 0.0;
    for j in 0..n {
        twist += x[n + j] * y[j] - x[j] * y[n + j];
    }
    for k in 0..2 * n {
        out[k] = x[k] + y[k];
    }
    out[2 * n] = x[2 * n] + y[2 * n] + 2.0 * twist;
}

/// `out = x^{-1} . y` on raw coordinate slices.
#[inline]
pub(crate) fn inv_mul_into(x: &[f64], y: &[f64], out: &mut [f64]) {
    let n = x.len() / 2;
    let mut twist = 0.0;
    for j in 0..n {
        twist += x[j] * y[n + j] - x[n + j] * y[j];
    }
    for k in 0..2 * n {
        out[k] = y[k] - x[k];
    }
    out[2 * n] = y[2 * n] - x[2 * n] + 2.0 * twist;
}

/// Squared horizontal norm and vertical coordinate of `x^{-1} . y`.
///
/// Both metrics in this crate are rotation invariant, so these two numbers are
/// all a distance evaluation needs.
#[inline]
pub(crate) fn displacement_invariants(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() / 2;
    let mut rho2 = 0.0;
    let mut twist = 0.0;
    for j in 0..n {
        let dz = y[j] - x[j];
        let de = y[n + j] - x[n + j];
        rho2 += dz * dz + de * de;
        twist += x[j] * y[n + j] - x[n + j] * y[j];
    }
    (rho2, y[2 * n] - x[2 * n] + 2.0 * twist)
}

/// A left-invariant frame field: `X_j`, `Y_j` (0-based `j`) or `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    X(usize),
    Y(usize),
    Z,
}

impl Direction {
    fn coordinate(self, n: usize) -> usize {
        match self {
            Direction::X(j) => {
                assert!(j < n, "X_{j} does not exist in H^{n}");
                j
            }
            Direction::Y(j) => {
                assert!(j < n, "Y_{j} does not exist in H^{n}");
                n + j
            }
            Direction::Z => 2 * n,
        }
    }

    /// The frame `X_1..X_n, Y_1..Y_n, Z` in coordinate order.
    pub fn frame(n: usize) -> Vec<Direction> {
        (0..n)
            .map(Direction::X)
            .chain((0..n).map(Direction::Y))
            .chain(std::iter::once(Direction::Z))
            .collect()
    }
}

/// Default finite-difference step `1e-5 max(1, |x|_inf)`.
pub fn default_step(x: &HPoint) -> f64 {
    1e-5 * x.max_abs().max(1.0)
}

/// Central difference of `s -> f(x . (s e_dir))` at `s = 0`.
pub fn frame_derivative<F>(f: F, x: &HPoint, dir: Direction, h: f64) -> Result<f64>
where
    F: Fn(&HPoint) -> f64,
{
    frame_derivative_with(|p| Ok(f(p)), x, dir, h)
}

/// Fallible variant of [`frame_derivative`].
pub fn frame_derivative_with<F>(f: F, x: &HPoint, dir: Direction, h: f64) -> Result<f64>
where
    F: Fn(&HPoint) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let n = x.n();
    let fwd = f(&x.mul(&HPoint::along(n, dir, h))?)?;
    let bwd = f(&x.mul(&HPoint::along(n, dir, -h))?)?;
    if !fwd.is_finite() || !bwd.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite function value near {:?} along {dir:?}",
            x.coords()
        )));
    }
    Ok((fwd - bwd) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(c: &[f64]) -> HPoint {
        HPoint::from_coords(c.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_inverse() {
        let y = pt(&[0.3, -1.2, 4.0]);
        let o = HPoint::origin(1);
        assert_eq!(o.mul(&y).unwrap(), y);
        assert_eq!(y.mul(&o).unwrap(), y);
        let e = y.mul(&y.inv()).unwrap();
        assert!(e.coords().iter().all(|c| c.abs() <= 1e-12));
    }

    #[test]
    fn product_twist_sign() {
        let x = pt(&[1.0, 0.0, 0.0]);
        let y = pt(&[0.0, 1.0, 0.0]);
        assert_eq!(x.mul(&y).unwrap().coords(), &[1.0, 1.0, -2.0]);
    }

    #[test]
    fn inverse_negates() {
        assert_eq!(pt(&[1.0, 2.0, 3.0]).inv().coords(), &[-1.0, -2.0, -3.0]);
        assert_eq!(HPoint::origin(2).inv(), HPoint::origin(2));
    }

    #[test]
    fn dilation_examples() {
        let x = pt(&[1.0, 0.0, 1.0]);
        assert_eq!(x.dilate(1.0).unwrap(), x);
        assert_eq!(x.dilate(2.0).unwrap().coords(), &[2.0, 0.0, 4.0]);
        assert!(x.dilate(0.0).is_err());
        assert!(x.dilate(-1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = HPoint::origin(1);
        let b = HPoint::origin(2);
        assert!(matches!(a.mul(&b), Err(Error::DimensionMismatch { .. })));
        assert!(HPoint::from_coords(vec![1.0, 2.0]).is_err());
        assert!(HPoint::from_coords(vec![1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn json_is_a_flat_array() {
        let p = pt(&[1.0, -2.0, 0.5]);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "[1.0,-2.0,0.5]");
        let back: HPoint = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<HPoint>("[1.0,2.0]").is_err());
    }

    #[test]
    fn frame_derivatives_of_vertical_coordinate() {
        let t = |p: &HPoint| p.t();
        let x = pt(&[0.7, 1.0, -0.4]);
        let h = default_step(&x);
        assert!((frame_derivative(t, &x, Direction::Z, h).unwrap() - 1.0).abs() < 1e-8);
        // X t = 2 eta
        assert!((frame_derivative(t, &x, Direction::X(0), h).unwrap() - 2.0).abs() < 1e-6);
        // Y t = -2 zeta
        assert!((frame_derivative(t, &x, Direction::Y(0), h).unwrap() + 1.4).abs() < 1e-6);
        let c = |_: &HPoint| 3.0;
        assert_eq!(frame_derivative(c, &x, Direction::X(0), h).unwrap(), 0.0);
    }

    #[test]
    fn commutator_is_minus_four_z() {
        // f = t + zeta * eta is a smooth polynomial test field.
        let f = |p: &HPoint| p.t() + p.zeta()[0] * p.eta()[0];
        let x = pt(&[0.3, -0.8, 1.1]);
        let h = 1e-3;
        let xy = |p: &HPoint| {
            let g = |q: &HPoint| frame_derivative(f, q, Direction::Y(0), h).unwrap();
            frame_derivative(g, p, Direction::X(0), h).unwrap()
        };
        let yx = |p: &HPoint| {
            let g = |q: &HPoint| frame_derivative(f, q, Direction::X(0), h).unwrap();
            frame_derivative(g, p, Direction::Y(0), h).unwrap()
        };
        let zf = frame_derivative(f, &x, Direction::Z, h).unwrap();
        assert!((xy(&x) - yx(&x) + 4.0 * zf).abs() < 1e-4);
    }

    fn point_strategy(n: usize) -> impl Strategy<Value = HPoint> {
        proptest::collection::vec(-10.0f64..10.0, 2 * n + 1)
            .prop_map(|c| HPoint::from_coords(c).unwrap())
    }

    fn triple() -> impl Strategy<Value = (HPoint, HPoint, HPoint)> {
        (1usize..=2).prop_flat_map(|n| (point_strategy(n), point_strategy(n), point_strategy(n)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn associativity((x, y, w) in triple()) {
            let a = x.mul(&y).unwrap().mul(&w).unwrap();
            let b = x.mul(&y.mul(&w).unwrap()).unwrap();
            for (p, q) in a.coords().iter().zip(b.coords()) {
                prop_assert!((p - q).abs() <= 1e-10);
            }
        }

        #[test]
        fn dilations_are_automorphisms((x, y, _) in triple(), lambda in 0.05f64..5.0) {
            let a = x.mul(&y).unwrap().dilate(lambda).unwrap();
            let b = x.dilate(lambda).unwrap().mul(&y.dilate(lambda).unwrap()).unwrap();
            for (p, q) in a.coords().iter().zip(b.coords()) {
                prop_assert!((p - q).abs() <= 1e-10 * (1.0 + p.abs()));
            }
        }

        #[test]
        fn dilation_semigroup((x, _, _) in triple(), l in 0.1f64..3.0, m in 0.1f64..3.0) {
            let a = x.dilate(l).unwrap().dilate(m).unwrap();
            let b = x.dilate(l * m).unwrap();
            for (p, q) in a.coords().iter().zip(b.coords()) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
            }
        }

        #[test]
        fn inverse_is_involution((x, y, _) in triple()) {
            prop_assert_eq!(x.inv().inv(), x.clone());
            let d = x.delta_to(&y).unwrap();
            let e = x.inv().mul(&y).unwrap();
            for (p, q) in d.coords().iter().zip(e.coords()) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
            }
        }
    }
}
