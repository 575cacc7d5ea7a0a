//! Ground-truth CNR fields for simulation: path loss around a known
//! transmitter plus shadowing sampled lazily, one conditional Gaussian at a
//! time, so only the queried locations are ever realized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{path_loss, shadowing_cov, ChannelParams, Point, COINCIDENCE_TOL};

#[derive(Debug, Clone)]
pub struct TruthField {
    params: ChannelParams,
    q_b: Point,
    points: Vec<Point>,
    shadowing: Vec<f64>,
    /// Rows of the lower Cholesky factor of the shadowing covariance.
    factor: Vec<Vec<f64>>,
    /// Standard normals with `shadowing = factor * z`.
    z: Vec<f64>,
    rng: ChaCha8Rng,
}

pub fn sample_truth(params: &ChannelParams, q_b_true: Point, seed: u64) -> TruthField {
    TruthField {
        params: *params,
        q_b: q_b_true,
        points: Vec::new(),
        shadowing: Vec::new(),
        factor: Vec::new(),
        z: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}

impl TruthField {
    pub fn transmitter(&self) -> Point {
        self.q_b
    }

    pub fn realized(&self) -> usize {
        self.points.len()
    }

    /// Shadowing `Delta(q)`, conditioned on everything realized so far.
    pub fn shadowing(&mut self, q: &Point) -> f64 {
        if let Some(i) = self.points.iter().position(|p| (p - q).norm() <= COINCIDENCE_TOL) {
            return self.shadowing[i];
        }
        let prior = self.params.xi * self.params.xi;
        let k: Vec<f64> = self
            .points
            .iter()
            .map(|p| shadowing_cov(&self.params, (p - q).norm()))
            .collect();
        // Forward substitution for the new factor row.
        let mut row = Vec::with_capacity(k.len() + 1);
        for (i, ki) in k.iter().enumerate() {
            let li = &self.factor[i];
            let dot: f64 = li[..i].iter().zip(&row).map(|(a, b)| a * b).sum();
            row.push((ki - dot) / li[i]);
        }
        let resid = prior - row.iter().map(|v| v * v).sum::<f64>();
        let diag = resid.max(1e-12 * prior).sqrt();
        let z_new: f64 = StandardNormal.sample(&mut self.rng);
        let value = row.iter().zip(&self.z).map(|(l, z)| l * z).sum::<f64>() + diag * z_new;
        row.push(diag);
        self.factor.push(row);
        self.z.push(z_new);
        self.points.push(*q);
        self.shadowing.push(value);
        value
    }

    /// True CNR `Gamma(q; q_b) + Delta(q)`, dB.
    pub fn value(&mut self, q: &Point) -> f64 {
        path_loss(&self.params, q, &self.q_b) + self.shadowing(q)
    }
}

/// Seeded source of measurement noise, independent of the truth stream.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self { rng }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// Truth plus `N(0, sigma_rho^2)` noise.
pub fn measure(truth: &mut TruthField, q: &Point, params: &ChannelParams, noise: &mut NoiseStream) -> f64 {
    truth.value(q) + params.sigma_rho * noise.standard_normal()
}
