//! Carnot-Caratheodory and gauge distances on `H^n`.
//!
//! Geodesics from the origin are parametrized by the spherical chart
//! `Upsilon(chi, v, r)`: `chi` is a unit horizontal direction `a + ib`, `v` the
//! angle swept by the horizontal velocity, `r` the arclength. In complex form
//!
//! ```text
//! z = r chi (sin v - i (1 - cos v)) / v,     t = 2 r^2 (v - sin v) / v^2,
//! ```
//!
//! and `d_c(0, Upsilon(chi, v, r)) = r` for `|v| < 2pi`. Inverting the chart
//! reduces to the scalar equation `mu(v) = t / |z|^2` with
//! `mu(v) = (v - sin v) / (2 sin^2(v / 2))`, odd and strictly increasing on
//! `(-2pi, 2pi)`.
//!
//! The homogeneity used throughout is `d(delta_l x, delta_l y) = l d(x, y)`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heis::{self, HPoint};

/// Horizontal norms at or below `AXIS_TOL (1 + |t|^{1/2})` count as on the axis.
pub const AXIS_TOL: f64 = 1e-10;

const MAX_ROOT_ITERS: usize = 200;
const SERIES_CUTOFF: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "cc", alias = "carnot_caratheodory")]
    CarnotCaratheodory,
    #[serde(rename = "gauge")]
    Gauge,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cc" | "carnot_caratheodory" => Ok(Metric::CarnotCaratheodory),
            "gauge" => Ok(Metric::Gauge),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::CarnotCaratheodory => "cc",
            Metric::Gauge => "gauge",
        })
    }
}

/// Which distance to use and the exponent `p >= 2` of the power cost `d^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMetricKind")]
pub struct MetricKind {
    pub metric: Metric,
    pub p: f64,
}

#[derive(Deserialize)]
struct RawMetricKind {
    metric: Metric,
    p: f64,
}

impl TryFrom<RawMetricKind> for MetricKind {
    type Error = Error;

    fn try_from(raw: RawMetricKind) -> Result<Self> {
        MetricKind::new(raw.metric, raw.p)
    }
}

impl MetricKind {
    pub fn new(metric: Metric, p: f64) -> Result<Self> {
        if !(p >= 2.0) || !p.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cost exponent must satisfy p >= 2, got {p}"
            )));
        }
        Ok(Self { metric, p })
    }

    pub fn cc() -> Self {
        Self {
            metric: Metric::CarnotCaratheodory,
            p: 2.0,
        }
    }

    pub fn gauge() -> Self {
        Self {
            metric: Metric::Gauge,
            p: 2.0,
        }
    }

    pub fn with_p(self, p: f64) -> Result<Self> {
        Self::new(self.metric, p)
    }

    /// Norm of the displacement `[z, t]` with `|z|^2 = rho2`.
    #[inline]
    pub(crate) fn norm(&self, rho2: f64, t: f64) -> f64 {
        match self.metric {
            Metric::CarnotCaratheodory => cc_norm(rho2, t),
            Metric::Gauge => gauge_norm(rho2, t),
        }
    }

    #[inline]
    pub(crate) fn raise(&self, d: f64) -> f64 {
        if self.p == 2.0 {
            d * d
        } else {
            d.powf(self.p)
        }
    }

    /// `d(x, y)^p` on raw coordinate slices.
    #[inline]
    pub(crate) fn cost_raw(&self, x: &[f64], y: &[f64]) -> f64 {
        let (rho2, t) = heis::displacement_invariants(x, y);
        self.raise(self.norm(rho2, t))
    }

    pub fn dist(&self, x: &HPoint, y: &HPoint) -> Result<f64> {
        x.check_same_dim(y)?;
        let (rho2, t) = heis::displacement_invariants(x.coords(), y.coords());
        Ok(self.norm(rho2, t))
    }

    /// Lower bound `kappa` in `d(0, [z, t])^2 >= kappa |t|`.
    pub(crate) fn vertical_constant(&self) -> f64 {
        match self.metric {
            // min over v of v^2 / (2 (v - sin v)), attained at v = pi
            Metric::CarnotCaratheodory => PI / 2.0,
            Metric::Gauge => 1.0,
        }
    }
}

/// Chart coordinates `(chi, v, r)` of a point off the vertical axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalCoords {
    chi: Vec<f64>,
    v: f64,
    r: f64,
}

impl SphericalCoords {
    /// Validates the chart domain. `chi` is `(a_1..a_n, b_1..b_n)`; a direction
    /// within `1e-9` of unit length is renormalized.
    pub fn new(chi: Vec<f64>, v: f64, r: f64) -> Result<Self> {
        if chi.is_empty() || !chi.len().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "direction needs 2n entries, got {}",
                chi.len()
            )));
        }
        let norm = chi.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "direction must have unit norm, got {norm}"
            )));
        }
        if !(v.abs() < TAU) {
            return Err(Error::InvalidArgument(format!(
                "swept angle must lie in (-2pi, 2pi), got {v}"
            )));
        }
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "radius must be positive, got {r}"
            )));
        }
        let chi = chi.into_iter().map(|c| c / norm).collect();
        Ok(Self { chi, v, r })
    }

    pub fn chi(&self) -> &[f64] {
        &self.chi
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    pub fn r(&self) -> f64 {
        self.r
    }
}

/// `v - sin v`, with a series below the cutoff to avoid cancellation.
fn v_minus_sin(v: f64) -> f64 {
    if v.abs() < SERIES_CUTOFF {
        let v2 = v * v;
        // v^3/3! - v^5/5! + v^7/7! - ...
        let mut term = v * v2 / 6.0;
        let mut sum = term;
        let mut k = 3.0;
        for _ in 0..7 {
            term *= -v2 / ((k + 1.0) * (k + 2.0));
            sum += term;
            k += 2.0;
        }
        sum
    } else {
        v - v.sin()
    }
}

/// `1 - cos v`, computed without cancellation.
#[inline]
fn one_minus_cos(v: f64) -> f64 {
    let s = (0.5 * v).sin();
    2.0 * s * s
}

/// `mu(v) = (v - sin v) / (1 - cos v)`.
pub(crate) fn mu(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    v_minus_sin(v) / one_minus_cos(v)
}

fn mu_prime(v: f64) -> f64 {
    if v.abs() < 1e-4 {
        return 1.0 / 3.0 + v * v / 30.0;
    }
    let d = one_minus_cos(v);
    1.0 - v_minus_sin(v) * v.sin() / (d * d)
}

/// Solves `mu(v) = target` for `v in [0, 2pi)`, `target >= 0`.
///
/// Newton steps safeguarded by bisection; the bracket always shrinks, so the
/// iteration cannot leave `[0, 2pi)`.
fn solve_mu(target: f64) -> Result<f64> {
    debug_assert!(target >= 0.0);
    if target == 0.0 {
        return Ok(0.0);
    }
    if target < 1e-6 {
        let v = 3.0 * target;
        return Ok(v * (1.0 - 0.3 * target * target));
    }
    let (mut lo, mut hi) = (0.0, TAU);
    let mut v = (3.0 * target).min(TAU - (4.0 * PI / target).sqrt());
    if !(v > lo && v < hi) {
        v = 0.5 * (lo + hi);
    }
    let tol = 1e-13 * target.max(1.0);
    for _ in 0..MAX_ROOT_ITERS {
        let f = mu(v) - target;
        if f.abs() <= tol {
            return Ok(v);
        }
        if f < 0.0 {
            lo = v;
        } else {
            hi = v;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(0.5 * (lo + hi));
        }
        let step = f / mu_prime(v);
        let mut next = v - step;
        if !(next > lo && next < hi) || !step.is_finite() {
            next = 0.5 * (lo + hi);
        }
        v = next;
    }
    Err(Error::Numeric(format!(
        "chart inversion did not converge for t/|z|^2 = {target:e} (residual {:e})",
        mu(v) - target
    )))
}

fn solve_mu_checked(target: f64) -> f64 {
    // bracketed, so it stops on interval width long before the iteration cap
    solve_mu(target).expect("bracketed chart inversion")
}

/// Arclength `r` from `(|z|, |t|, v)` once the swept angle is known.
fn radius_from(rho: f64, abs_t: f64, v: f64) -> f64 {
    let v = v.abs();
    if v == 0.0 {
        rho
    } else if v <= PI {
        rho * v / (2.0 * (0.5 * v).sin())
    } else {
        // well conditioned up to the axis, where it tends to sqrt(pi |t|)
        (abs_t * v * v / (2.0 * v_minus_sin(v))).sqrt()
    }
}

#[inline]
fn on_axis(rho: f64, t: f64) -> bool {
    rho <= AXIS_TOL * (1.0 + t.abs().sqrt())
}

/// `d_c(0, [z, t])` as a function of `|z|^2` and `t`.
pub(crate) fn cc_norm(rho2: f64, t: f64) -> f64 {
    let rho = rho2.sqrt();
    let abs_t = t.abs();
    if on_axis(rho, t) {
        return (PI * abs_t).sqrt();
    }
    let target = abs_t / rho2;
    if !target.is_finite() {
        return (PI * abs_t).sqrt();
    }
    radius_from(rho, abs_t, solve_mu_checked(target))
}

/// Gauge norm `(|z|^4 + t^2)^{1/4}`.
#[inline]
pub(crate) fn gauge_norm(rho2: f64, t: f64) -> f64 {
    (rho2 * rho2 + t * t).sqrt().sqrt()
}

/// Chart evaluation without domain checks; accepts `|v| <= 2pi` and `r >= 0`.
fn upsilon_raw(chi: &[f64], v: f64, r: f64) -> HPoint {
    let n = chi.len() / 2;
    let (alpha, beta, gamma) = if v == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (
            v.sin() / v,
            one_minus_cos(v) / v,
            2.0 * v_minus_sin(v) / (v * v),
        )
    };
    let mut coords = vec![0.0; 2 * n + 1];
    for j in 0..n {
        let (a, b) = (chi[j], chi[n + j]);
        coords[j] = r * (a * alpha + b * beta);
        coords[n + j] = r * (b * alpha - a * beta);
    }
    coords[2 * n] = gamma * r * r;
    HPoint::from_coords_unchecked(coords)
}

/// The chart `Upsilon(chi, v, r)`.
pub fn upsilon(c: &SphericalCoords) -> HPoint {
    upsilon_raw(&c.chi, c.v, c.r)
}

/// Inverse chart on `H^n` minus the vertical axis.
pub fn upsilon_inv(x: &HPoint) -> Result<SphericalCoords> {
    let n = x.n();
    let rho2 = x.horizontal_norm_sq();
    let rho = rho2.sqrt();
    let t = x.t();
    if on_axis(rho, t) {
        return Err(Error::AxisPoint {
            horizontal_norm: rho,
        });
    }
    let target = t.abs() / rho2;
    if !target.is_finite() {
        return Err(Error::AxisPoint {
            horizontal_norm: rho,
        });
    }
    let v = solve_mu(target)?.copysign(t);
    let r = radius_from(rho, t.abs(), v);
    let (alpha, beta) = if v == 0.0 {
        (1.0, 0.0)
    } else {
        (v.sin() / v, one_minus_cos(v) / v)
    };
    // chi = z / (r (alpha - i beta)) = z (alpha + i beta) / (r |g|^2)
    let scale = r * (alpha * alpha + beta * beta);
    let mut chi = vec![0.0; 2 * n];
    for j in 0..n {
        let (xi, eta) = (x.zeta()[j], x.eta()[j]);
        chi[j] = (xi * alpha - eta * beta) / scale;
        chi[n + j] = (xi * beta + eta * alpha) / scale;
    }
    let norm = chi.iter().map(|c| c * c).sum::<f64>().sqrt();
    chi.iter_mut().for_each(|c| *c /= norm);
    Ok(SphericalCoords { chi, v, r })
}

/// `exp_H(A + iB, w) = Upsilon((A + iB)/|A + iB|, 4w, |A + iB|)`, origin for `A + iB = 0`.
pub fn exp_h(ab: &[f64], w: f64) -> Result<HPoint> {
    if ab.is_empty() || !ab.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "horizontal covector needs 2n entries, got {}",
            ab.len()
        )));
    }
    if !(w.abs() <= PI / 2.0) {
        return Err(Error::Domain(format!(
            "vertical parameter {w} outside [-pi/2, pi/2]"
        )));
    }
    let norm = ab.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(HPoint::origin(ab.len() / 2));
    }
    let chi: Vec<f64> = ab.iter().map(|c| c / norm).collect();
    Ok(upsilon_raw(&chi, 4.0 * w, norm))
}

pub fn cc_dist(x: &HPoint, y: &HPoint) -> Result<f64> {
    MetricKind::cc().dist(x, y)
}

pub fn gauge_dist(x: &HPoint, y: &HPoint) -> Result<f64> {
    MetricKind::gauge().dist(x, y)
}

/// `d(x, y)^p` for the selected metric.
pub fn power_cost(x: &HPoint, y: &HPoint, kind: &MetricKind) -> Result<f64> {
    Ok(kind.raise(kind.dist(x, y)?))
}

/// Point at fraction `s` along the CC geodesic from `x` to `y`.
pub fn geodesic_point(x: &HPoint, y: &HPoint, s: f64) -> Result<HPoint> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "geodesic parameter {s} outside [0, 1]"
        )));
    }
    let w = x.delta_to(y)?;
    if w.coords().iter().all(|c| *c == 0.0) {
        return Ok(x.clone());
    }
    let c = match upsilon_inv(&w) {
        Ok(c) => c,
        Err(Error::AxisPoint { .. }) => return Err(Error::UnsupportedGeodesic),
        Err(e) => return Err(e),
    };
    x.mul(&upsilon_raw(&c.chi, s * c.v, s * c.r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heis::{frame_derivative, Direction};
    use proptest::prelude::*;

    fn pt(c: &[f64]) -> HPoint {
        HPoint::from_coords(c.to_vec()).unwrap()
    }

    #[test]
    fn series_matches_direct_evaluation() {
        for v in [0.49f64, 0.3, 0.1, -0.2] {
            let direct = v - v.sin();
            assert!((v_minus_sin(v) - direct).abs() <= 1e-13 * direct.abs());
        }
        // mu'(v) near zero against its closed form at the switch point
        let v = 1e-4f64;
        let d = one_minus_cos(v);
        let direct = 1.0 - v_minus_sin(v) * v.sin() / (d * d);
        assert!((mu_prime(v) - direct).abs() < 1e-7);
    }

    #[test]
    fn mu_is_odd_and_increasing() {
        let mut prev = mu(-TAU + 1e-3);
        let mut v = -TAU + 1e-3;
        while v < TAU - 1e-3 {
            v += 1e-2;
            let cur = mu(v);
            assert!(cur > prev, "mu not increasing at {v}");
            assert!((mu(-v) + cur).abs() <= 1e-12 * cur.abs().max(1.0));
            prev = cur;
        }
    }

    #[test]
    fn upsilon_hand_values() {
        let c = SphericalCoords::new(vec![1.0, 0.0], PI, 1.0).unwrap();
        let x = upsilon(&c);
        assert!(x.zeta()[0].abs() < 1e-15);
        assert!((x.eta()[0] + 2.0 / PI).abs() < 1e-15);
        assert!((x.t() - 2.0 / PI).abs() < 1e-15);

        // v -> 0 limit: horizontal point (a, b, 0)
        let c = SphericalCoords::new(vec![0.6, 0.8], 1e-12, 1.0).unwrap();
        let x = upsilon(&c);
        assert!((x.zeta()[0] - 0.6).abs() < 1e-11);
        assert!((x.eta()[0] - 0.8).abs() < 1e-11);
        assert!(x.t().abs() < 1e-11);
    }

    #[test]
    fn upsilon_is_r_homogeneous() {
        let c1 = SphericalCoords::new(vec![0.6, 0.8], 1.3, 0.7).unwrap();
        let c2 = SphericalCoords::new(vec![0.6, 0.8], 1.3, 2.1).unwrap();
        let (a, b) = (upsilon(&c1), upsilon(&c2));
        assert!((b.zeta()[0] - 3.0 * a.zeta()[0]).abs() < 1e-14);
        assert!((b.eta()[0] - 3.0 * a.eta()[0]).abs() < 1e-14);
        assert!((b.t() - 9.0 * a.t()).abs() < 1e-13);
    }

    #[test]
    fn upsilon_inv_hand_values() {
        let c = upsilon_inv(&pt(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(c.v(), 0.0);
        assert!((c.r() - 1.0).abs() < 1e-15);
        assert!((c.chi()[0] - 1.0).abs() < 1e-15 && c.chi()[1].abs() < 1e-15);

        let c = upsilon_inv(&pt(&[0.0, -2.0 / PI, 2.0 / PI])).unwrap();
        assert!((c.v() - PI).abs() < 1e-12);
        assert!((c.r() - 1.0).abs() < 1e-12);
        assert!((c.chi()[0] - 1.0).abs() < 1e-12);

        assert!(matches!(
            upsilon_inv(&HPoint::vertical(1, 2.0)),
            Err(Error::AxisPoint { .. })
        ));
    }

    #[test]
    fn chart_validation() {
        assert!(SphericalCoords::new(vec![1.0, 0.0], TAU, 1.0).is_err());
        assert!(SphericalCoords::new(vec![1.0, 0.0], 0.0, 0.0).is_err());
        assert!(SphericalCoords::new(vec![2.0, 0.0], 0.0, 1.0).is_err());
        assert!(SphericalCoords::new(vec![1.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn exp_examples() {
        assert_eq!(exp_h(&[0.0, 0.0], 1.2).unwrap(), HPoint::origin(1));
        let x = exp_h(&[1.0, 0.0], 0.0).unwrap();
        assert_eq!(x.coords(), &[1.0, 0.0, 0.0]);
        assert!(matches!(exp_h(&[1.0, 0.0], 1.6), Err(Error::Domain(_))));
        // boundary of the domain lands on the axis at CC distance |AB|
        let x = exp_h(&[2.0, 0.0], PI / 2.0).unwrap();
        assert!(x.horizontal_norm() < 1e-14);
        assert!((cc_dist(&HPoint::origin(1), &x).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn axis_and_horizontal_distances() {
        let o = HPoint::origin(1);
        let d = cc_dist(&o, &HPoint::vertical(1, 1.0)).unwrap();
        assert!((d - 1.7724539).abs() < 1e-7);
        let x = pt(&[0.3, -0.4, 0.0]);
        assert!((cc_dist(&o, &x).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(cc_dist(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn horizontal_distance_matches_straight_curve_length() {
        // The straight horizontal curve s -> [s z, 0] is subunit with speed |z|,
        // and d_c >= |z| always, so its length is the distance.
        let x = pt(&[1.0, -2.0, 0.5]);
        let y = x.mul(&pt(&[0.6, 0.8, 0.0])).unwrap();
        let steps = 1000;
        let mut len = 0.0;
        let mut prev = x.clone();
        for k in 1..=steps {
            let s = k as f64 / steps as f64;
            let cur = x.mul(&pt(&[0.6 * s, 0.8 * s, 0.0])).unwrap();
            len += cc_dist(&prev, &cur).unwrap();
            prev = cur;
        }
        assert!((len - 1.0).abs() < 1e-12);
        assert!((cc_dist(&x, &y).unwrap() - len).abs() < 1e-12);
    }

    #[test]
    fn gauge_examples() {
        let o = HPoint::origin(1);
        assert!((gauge_dist(&o, &pt(&[0.3, 0.4, 0.0])).unwrap() - 0.5).abs() < 1e-15);
        assert!((gauge_dist(&o, &HPoint::vertical(1, 4.0)).unwrap() - 2.0).abs() < 1e-15);
        let x = pt(&[1.0, 2.0, 3.0]);
        assert_eq!(gauge_dist(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn power_cost_examples() {
        let o = HPoint::origin(1);
        let y = HPoint::vertical(1, 1.0);
        let x = pt(&[0.2, 0.1, -0.3]);
        let d = cc_dist(&x, &y).unwrap();
        assert!((power_cost(&x, &y, &MetricKind::cc()).unwrap() - d * d).abs() < 1e-15);
        let p3 = MetricKind::cc().with_p(3.0).unwrap();
        assert!((power_cost(&o, &y, &p3).unwrap() - PI.powf(1.5)).abs() < 1e-5);
        assert!((power_cost(&o, &y, &MetricKind::gauge()).unwrap() - 1.0).abs() < 1e-15);
        assert!(MetricKind::cc().with_p(1.5).is_err());
    }

    #[test]
    fn metric_kind_json() {
        let k: MetricKind = serde_json::from_str(r#"{"metric":"gauge","p":3.0}"#).unwrap();
        assert_eq!(k.metric, Metric::Gauge);
        assert!(serde_json::from_str::<MetricKind>(r#"{"metric":"cc","p":1.0}"#).is_err());
    }

    #[test]
    fn geodesic_examples() {
        let o = HPoint::origin(1);
        let y = pt(&[1.0, 0.0, 0.0]);
        let mid = geodesic_point(&o, &y, 0.5).unwrap();
        assert!((mid.zeta()[0] - 0.5).abs() < 1e-15 && mid.eta()[0].abs() < 1e-15);
        assert!(mid.t().abs() < 1e-15);
        assert_eq!(geodesic_point(&o, &y, 0.0).unwrap(), o);
        let end = geodesic_point(&o, &y, 1.0).unwrap();
        assert!((end.zeta()[0] - 1.0).abs() < 1e-15);
        assert!(matches!(
            geodesic_point(&o, &HPoint::vertical(1, 1.0), 0.5),
            Err(Error::UnsupportedGeodesic)
        ));
    }

    #[test]
    fn axis_formula_across_scales() {
        let o = HPoint::origin(1);
        for k in -3..=2 {
            for sign in [-1.0, 1.0] {
                let t = sign * 10f64.powi(k);
                let d = cc_dist(&o, &HPoint::vertical(1, t)).unwrap();
                assert!((d * d - PI * t.abs()).abs() <= 1e-10 * PI * t.abs());
            }
        }
    }

    #[test]
    fn distance_is_continuous_at_the_axis() {
        // |z|^2/|t| runs through the old switching region without a jump
        let t = 1.0;
        let mut prev = cc_norm(1e-8, t);
        for k in 10..30 {
            let rho2 = 10f64.powi(-k);
            let d = cc_norm(rho2, t);
            let expected = (PI * t).sqrt() - rho2.sqrt(); // d^2 ~ pi t - 2 sqrt(pi t) |z|
            assert!(
                (d - expected).abs() <= 1e-8,
                "rho2 = {rho2:e}: {d} vs {expected}"
            );
            assert!(d >= prev - 1e-15);
            prev = d;
        }
    }

    #[test]
    fn non_differentiability_on_the_axis() {
        let z = HPoint::vertical(1, 1.0);
        let f = |p: &HPoint| cc_dist(&HPoint::origin(1), p).unwrap().powi(2);
        let mut gaps = Vec::new();
        for h in [1e-2, 1e-3, 1e-4, 1e-5] {
            let fwd = (f(&z.mul(&HPoint::along(1, Direction::X(0), h)).unwrap()) - f(&z)) / h;
            let bwd = (f(&z) - f(&z.mul(&HPoint::along(1, Direction::X(0), -h)).unwrap())) / h;
            gaps.push((bwd - fwd).abs());
            let zq = frame_derivative(f, &z, Direction::Z, h).unwrap();
            assert!((zq - PI).abs() < 1e-6, "Z quotient {zq} at h = {h}");
        }
        // the gap tends to 4 sqrt(pi), not to zero
        for g in gaps {
            assert!(g > 6.0, "gap {g}");
        }
    }

    fn chart_point() -> impl Strategy<Value = SphericalCoords> {
        (
            (1usize..=2).prop_flat_map(|n| proptest::collection::vec(-1.0f64..1.0, 2 * n)),
            -(TAU - 1e-3)..(TAU - 1e-3),
            0.05f64..20.0,
        )
            .prop_filter_map("degenerate direction", |(chi, v, r)| {
                let norm = chi.iter().map(|c| c * c).sum::<f64>().sqrt();
                if norm < 1e-3 {
                    return None;
                }
                SphericalCoords::new(chi.iter().map(|c| c / norm).collect(), v, r).ok()
            })
    }

    fn point(n: usize, range: f64) -> impl Strategy<Value = HPoint> {
        proptest::collection::vec(-range..range, 2 * n + 1)
            .prop_map(|c| HPoint::from_coords(c).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn chart_round_trip(c in chart_point()) {
            let back = upsilon_inv(&upsilon(&c)).unwrap();
            prop_assert!((back.v() - c.v()).abs() <= 1e-9, "v {} vs {}", back.v(), c.v());
            prop_assert!((back.r() - c.r()).abs() <= 1e-9 * c.r());
            for (a, b) in back.chi().iter().zip(c.chi()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn exp_is_radial(ab in proptest::collection::vec(-3.0f64..3.0, 2), w in -(PI / 2.0 - 1e-3)..(PI / 2.0 - 1e-3)) {
            let norm = (ab[0] * ab[0] + ab[1] * ab[1]).sqrt();
            prop_assume!(norm > 1e-6);
            let x = exp_h(&ab, w).unwrap();
            let d = cc_dist(&HPoint::origin(1), &x).unwrap();
            prop_assert!((d - norm).abs() <= 1e-7 * norm.max(1.0));
        }

        #[test]
        fn left_invariance((p, x, y) in (point(1, 5.0), point(1, 5.0), point(1, 5.0))) {
            let d = cc_dist(&x, &y).unwrap();
            let dt = cc_dist(&p.mul(&x).unwrap(), &p.mul(&y).unwrap()).unwrap();
            prop_assert!((d - dt).abs() <= 1e-8 * (1.0 + d));
            let g = gauge_dist(&x, &y).unwrap();
            let gt = gauge_dist(&p.mul(&x).unwrap(), &p.mul(&y).unwrap()).unwrap();
            prop_assert!((g - gt).abs() <= 1e-8 * (1.0 + g));
        }

        #[test]
        fn homogeneity((x, y) in (point(2, 5.0), point(2, 5.0)), li in 0usize..3) {
            let lambda = [0.1, 1.0, 7.3][li];
            let d = cc_dist(&x, &y).unwrap();
            let dl = cc_dist(&x.dilate(lambda).unwrap(), &y.dilate(lambda).unwrap()).unwrap();
            prop_assert!((dl - lambda * d).abs() <= 1e-8 * lambda * (1.0 + d));
        }

        #[test]
        fn metric_axioms((x, y, w) in (point(1, 5.0), point(1, 5.0), point(1, 5.0))) {
            for kind in [MetricKind::cc(), MetricKind::gauge()] {
                let dxy = kind.dist(&x, &y).unwrap();
                let dyx = kind.dist(&y, &x).unwrap();
                prop_assert!((dxy - dyx).abs() <= 1e-10 * (1.0 + dxy));
                prop_assert!(dxy >= 0.0);
                let dxw = kind.dist(&x, &w).unwrap();
                let dwy = kind.dist(&w, &y).unwrap();
                prop_assert!(dxw + dwy - dxy >= -1e-8);
            }
        }

        #[test]
        fn geodesic_betweenness((x, y) in (point(1, 3.0), point(1, 3.0)), s in 0.0f64..1.0) {
            let d = cc_dist(&x, &y).unwrap();
            prop_assume!(d > 1e-3);
            let g = geodesic_point(&x, &y, s).unwrap();
            let a = cc_dist(&x, &g).unwrap();
            let b = cc_dist(&g, &y).unwrap();
            prop_assert!((a - s * d).abs() <= 1e-6 * d);
            prop_assert!((b - (1.0 - s) * d).abs() <= 1e-6 * d);
            prop_assert!((a + b - d).abs() <= 1e-6 * d);
        }
    }
}
