//! Channel-to-noise ratio (CNR) estimation with a Gaussian process whose
//! kernel marginalizes the log-distance path loss over an unknown transmitter
//! location.
//!
//! The CNR in dB is modeled as `Gamma(q; q_b) + Delta(q)`: a path-loss term
//! around the transmitter `q_b` plus spatially correlated shadowing. With a
//! uniform prior on `q_b` the covariance becomes `k = k_delta + k_gamma`.

mod grid;
mod kgamma;
mod posterior;
mod truth;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use grid::{grid_axis, FieldGrid};
pub use kgamma::{k_gamma, k_gamma_with_nodes, kernel, GammaCache, GammaQuadrature, DEFAULT_PRIOR_NODES};
pub use posterior::{fit, peak, posterior_mean, posterior_var, ChannelEstimator, ChannelPosterior};
pub use truth::{measure, sample_truth, NoiseStream, TruthField};

/// A location in the plane, meters.
pub type Point = Vector2<f64>;

/// Distances below this are clamped inside the path-loss logarithm.
pub const DISTANCE_FLOOR: f64 = 1e-3;

/// Two locations closer than this are the same location.
pub const COINCIDENCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    /// Path loss at 1 m, dB.
    pub c_pl: f64,
    /// Path-loss exponent.
    pub n_pl: f64,
    /// Shadowing standard deviation, dB.
    pub xi: f64,
    /// Shadowing correlation length, m.
    pub eta: f64,
    /// Measurement noise standard deviation, dB.
    pub sigma_rho: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            c_pl: -41.34,
            n_pl: 3.86,
            xi: 3.20,
            eta: 3.09,
            sigma_rho: 1.64,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.c_pl, self.n_pl, self.xi, self.eta, self.sigma_rho]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(invalid("channel parameters must be finite"));
        }
        if !(self.xi > 0.0 && self.eta > 0.0 && self.sigma_rho > 0.0) {
            return Err(invalid("xi, eta and sigma_rho must be positive"));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle supporting the uniform transmitter prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegionRepr", into = "RegionRepr")]
pub struct PriorRegion {
    lower: Point,
    upper: Point,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRepr {
    lower: [f64; 2],
    upper: [f64; 2],
}

impl TryFrom<RegionRepr> for PriorRegion {
    type Error = crate::Error;
    fn try_from(r: RegionRepr) -> Result<Self> {
        PriorRegion::new(Point::from(r.lower), Point::from(r.upper))
    }
}

impl From<PriorRegion> for RegionRepr {
    fn from(r: PriorRegion) -> Self {
        RegionRepr {
            lower: [r.lower.x, r.lower.y],
            upper: [r.upper.x, r.upper.y],
        }
    }
}

impl Default for PriorRegion {
    fn default() -> Self {
        Self {
            lower: Point::new(-50.0, -50.0),
            upper: Point::new(50.0, 50.0),
        }
    }
}

impl PriorRegion {
    pub fn new(lower: Point, upper: Point) -> Result<Self> {
        if !(lower.iter().chain(upper.iter()).all(|v| v.is_finite())) {
            return Err(invalid("region bounds must be finite"));
        }
        if !(lower.x < upper.x && lower.y < upper.y) {
            return Err(invalid(format!(
                "region lower {:?} must be below upper {:?} componentwise",
                lower.as_slice(),
                upper.as_slice()
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> Point {
        self.lower
    }

    pub fn upper(&self) -> Point {
        self.upper
    }

    pub fn area(&self) -> f64 {
        (self.upper.x - self.lower.x) * (self.upper.y - self.lower.y)
    }

    pub fn translated(&self, by: Point) -> Self {
        Self {
            lower: self.lower + by,
            upper: self.upper + by,
        }
    }
}

/// Measured CNR values at distinct locations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    locations: Vec<Point>,
    values: Vec<f64>,
}

impl MeasurementSet {
    pub fn new(locations: Vec<Point>, values: Vec<f64>) -> Result<Self> {
        if locations.len() != values.len() {
            return Err(invalid(format!(
                "{} locations but {} values",
                locations.len(),
                values.len()
            )));
        }
        let mut set = Self::default();
        for (q, y) in locations.into_iter().zip(values) {
            set.push(q, y)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, q: Point, y: f64) -> Result<()> {
        if !(q.x.is_finite() && q.y.is_finite() && y.is_finite()) {
            return Err(invalid("measurement location and value must be finite"));
        }
        if let Some(i) = self
            .locations
            .iter()
            .position(|p| (p - q).norm() <= COINCIDENCE_TOL)
        {
            return Err(invalid(format!(
                "measurement at ({}, {}) duplicates measurement {i}",
                q.x, q.y
            )));
        }
        self.locations.push(q);
        self.values.push(y);
        Ok(())
    }

    pub fn extend(&mut self, other: &MeasurementSet) -> Result<()> {
        for (q, y) in other.iter() {
            self.push(q, y)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (Point, f64)> + '_ {
        self.locations.iter().copied().zip(self.values.iter().copied())
    }

    /// Same locations, values multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            locations: self.locations.clone(),
            values: self.values.iter().map(|y| c * y).collect(),
        }
    }
}

/// `c_PL - 10 n_PL log10(max(|q - q_b|, 1e-3))`.
pub fn path_loss(params: &ChannelParams, q: &Point, q_b: &Point) -> f64 {
    path_loss_at_distance(params, (q - q_b).norm())
}

pub(crate) fn path_loss_at_distance(params: &ChannelParams, d: f64) -> f64 {
    params.c_pl - 10.0 * params.n_pl * d.max(DISTANCE_FLOOR).log10()
}

/// Shadowing covariance with the noise nugget: `xi^2 exp(-d / eta) + sigma_rho^2`.
pub fn k_delta(params: &ChannelParams, qi: &Point, qj: &Point) -> f64 {
    shadowing_cov(params, (qi - qj).norm()) + params.sigma_rho * params.sigma_rho
}

/// `xi^2 exp(-d / eta)`, the shadowing covariance without the nugget.
pub(crate) fn shadowing_cov(params: &ChannelParams, d: f64) -> f64 {
    params.xi * params.xi * (-d / params.eta).exp()
}
