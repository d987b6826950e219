//! Multi-marginal optimal transport on the Heisenberg group.
//!
//! The crate covers the whole chain from group arithmetic to transport maps:
//!
//! - [`heis`]: group law, dilations, finite differences along the left-invariant frame.
//! - [`metric`]: the Carnot-Caratheodory distance via the spherical chart, the gauge
//!   distance, the exponential map, geodesics and power costs `d^p`.
//! - [`barycenter`]: the barycentric cost `c(x_1..x_m) = min_y sum_i d^p(x_i, y)` and
//!   its (possibly multivalued) minimizers.
//! - [`mmot`]: the discrete Kantorovich problem, its dual, c-conjugation and
//!   cyclical-monotonicity checks.
//! - [`monge`]: extraction of transport maps from optimal plans, the map
//!   `psi(x_1) = x_1 . exp_H(...)`, Wasserstein barycenters and injectivity checks.
//! - [`io`]: JSON formats, samplers, density discretization and the end-to-end pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod barycenter;
pub mod error;
pub mod heis;
pub mod io;
pub mod metric;
pub mod mmot;
pub mod monge;
mod optim;

pub use error::{Error, Result};
pub use heis::{Direction, HPoint};
pub use metric::{Metric, MetricKind, SphericalCoords};
