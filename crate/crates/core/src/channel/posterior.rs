//! Posterior mean and variance of the CNR field given noisy measurements.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use super::grid::{grid_axis, Convolver, FieldGrid};
use super::kgamma::{GammaCache, GammaQuadrature, DEFAULT_PRIOR_NODES};
use super::{k_delta, ChannelParams, MeasurementSet, Point, PriorRegion};
use crate::error::{invalid, Error, Result};

/// Fits posteriors for one parameter set and prior, caching the path-loss
/// quadrature per measurement location across refits.
#[derive(Debug, Clone)]
pub struct ChannelEstimator {
    params: ChannelParams,
    prior: PriorRegion,
    cache: GammaCache,
}

impl ChannelEstimator {
    pub fn new(params: ChannelParams, prior: PriorRegion) -> Result<Self> {
        Self::with_nodes(params, prior, DEFAULT_PRIOR_NODES)
    }

    pub fn with_nodes(params: ChannelParams, prior: PriorRegion, nodes_per_axis: usize) -> Result<Self> {
        params.validate()?;
        if nodes_per_axis == 0 {
            return Err(invalid("prior quadrature needs at least one node per axis"));
        }
        Ok(Self {
            params,
            prior,
            cache: GammaCache::new(GammaQuadrature::new(params, prior, nodes_per_axis)),
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn prior(&self) -> &PriorRegion {
        &self.prior
    }

    pub fn kernel(&mut self, qi: &Point, qj: &Point) -> f64 {
        k_delta(&self.params, qi, qj) + self.cache.k_gamma(qi, qj)
    }

    pub fn fit(&mut self, measurements: &MeasurementSet) -> Result<ChannelPosterior> {
        let locs = measurements.locations();
        let l = locs.len();
        let mut gram = DMatrix::zeros(l, l);
        for i in 0..l {
            for j in 0..=i {
                let k = self.kernel(&locs[i], &locs[j]);
                gram[(i, j)] = k;
                gram[(j, i)] = k;
            }
        }
        let noise = self.params.sigma_rho * self.params.sigma_rho;
        let mut system = &gram + DMatrix::identity(l, l) * noise;
        let mut jitter = 0.0;
        let chol = match Cholesky::new(system.clone()) {
            Some(c) => c,
            None => {
                jitter = 1e-8 * system.trace() / l as f64;
                system += DMatrix::identity(l, l) * jitter;
                Cholesky::new(system).ok_or_else(|| {
                    Error::Fit(format!("Gram matrix of {l} measurements is not positive definite"))
                })?
            }
        };
        let y = DVector::from_column_slice(measurements.values());
        let alpha = chol.solve(&y);
        let gammas = locs.iter().map(|q| self.cache.vector(q)).collect();
        Ok(ChannelPosterior {
            measurements: measurements.clone(),
            params: self.params,
            prior: self.prior,
            quad: self.cache.quadrature().clone(),
            gram,
            gram_factor: chol.l(),
            alpha,
            jitter,
            gammas,
        })
    }
}

/// Gaussian-process posterior with zero prior mean and kernel `k_delta + k_gamma`.
#[derive(Debug, Clone)]
pub struct ChannelPosterior {
    measurements: MeasurementSet,
    params: ChannelParams,
    prior: PriorRegion,
    quad: Arc<GammaQuadrature>,
    gram: DMatrix<f64>,
    gram_factor: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    gammas: Vec<Arc<Vec<f64>>>,
}

impl ChannelPosterior {
    pub fn measurements(&self) -> &MeasurementSet {
        &self.measurements
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn prior(&self) -> &PriorRegion {
        &self.prior
    }

    /// `K`, without the noise term.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Lower-triangular `L` with `L L^T = K + sigma_rho^2 I` (plus jitter).
    pub fn gram_factor(&self) -> &DMatrix<f64> {
        &self.gram_factor
    }

    /// `(K + sigma_rho^2 I)^{-1} y`.
    pub fn alpha_weights(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Diagonal jitter added after a failed factorization, zero otherwise.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn prior_variance(&self, gamma_q: &[f64]) -> f64 {
        let p = &self.params;
        p.xi * p.xi + p.sigma_rho * p.sigma_rho + self.quad.expectation(gamma_q, gamma_q)
    }

    fn cross_cov(&self, q: &Point, gamma_q: &[f64]) -> DVector<f64> {
        let locs = self.measurements.locations();
        DVector::from_fn(locs.len(), |i, _| {
            k_delta(&self.params, q, &locs[i]) + self.quad.expectation(gamma_q, &self.gammas[i])
        })
    }

    /// Kernel values `k(q, q_i)` against every measurement location.
    pub fn kernel_vector(&self, q: &Point) -> DVector<f64> {
        self.cross_cov(q, &self.quad.gamma_vector(q))
    }

    pub fn mean(&self, q: &Point) -> f64 {
        if self.measurements.is_empty() {
            return 0.0;
        }
        self.kernel_vector(q).dot(&self.alpha)
    }

    pub fn variance(&self, q: &Point) -> f64 {
        let g = self.quad.gamma_vector(q);
        let prior = self.prior_variance(&g);
        if self.measurements.is_empty() {
            return prior;
        }
        let kq = self.cross_cov(q, &g);
        let v = self
            .gram_factor
            .solve_lower_triangular(&kq)
            .expect("Cholesky factor has a positive diagonal");
        (prior - v.norm_squared()).max(0.0)
    }

    /// Mean (and variance when asked) on the grid over `region` at `res`.
    pub fn field(&self, region: &PriorRegion, res: f64, with_variance: bool) -> Result<FieldGrid> {
        if !(res > 0.0 && res.is_finite()) {
            return Err(invalid(format!("grid resolution must be positive, got {res}")));
        }
        let (lo, hi) = (region.lower(), region.upper());
        let xs = grid_axis(lo.x, hi.x, res);
        let ys = grid_axis(lo.y, hi.y, res);
        let (mean, var) = match Convolver::new(&self.quad, region, res) {
            Some(conv) => self.field_by_fft(&conv, &xs, &ys, with_variance),
            None => self.field_direct(&xs, &ys, with_variance),
        };
        Ok(FieldGrid { xs, ys, mean, var })
    }

    fn field_direct(&self, xs: &[f64], ys: &[f64], with_variance: bool) -> (Vec<f64>, Option<Vec<f64>>) {
        let mut mean = Vec::with_capacity(xs.len() * ys.len());
        let mut var = with_variance.then(|| Vec::with_capacity(xs.len() * ys.len()));
        for &x in xs {
            for &y in ys {
                let q = Point::new(x, y);
                if self.measurements.is_empty() {
                    mean.push(0.0);
                } else {
                    mean.push(self.kernel_vector(&q).dot(&self.alpha));
                }
                if let Some(v) = var.as_mut() {
                    v.push(self.variance(&q));
                }
            }
        }
        (mean, var)
    }

    fn field_by_fft(
        &self,
        conv: &Convolver,
        xs: &[f64],
        ys: &[f64],
        with_variance: bool,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let size = xs.len() * ys.len();
        debug_assert_eq!(conv.counts(), (xs.len(), ys.len()));
        let n2 = (self.quad.nodes_per_axis() * self.quad.nodes_per_axis()) as f64;
        let locs = self.measurements.locations();
        let points: Vec<Point> = xs
            .iter()
            .flat_map(|&x| ys.iter().map(move |&y| Point::new(x, y)))
            .collect();

        let mean = if locs.is_empty() {
            vec![0.0; size]
        } else {
            let mut w = vec![0.0; self.gammas[0].len()];
            for (a, g) in self.alpha.iter().zip(&self.gammas) {
                for (wi, gi) in w.iter_mut().zip(g.iter()) {
                    *wi += a * gi;
                }
            }
            let gamma_part = conv.gamma_sum(&w);
            points
                .iter()
                .zip(gamma_part)
                .map(|(q, s)| {
                    let delta: f64 = locs
                        .iter()
                        .zip(self.alpha.iter())
                        .map(|(qi, a)| a * k_delta(&self.params, q, qi))
                        .sum();
                    delta + s / n2
                })
                .collect()
        };

        let var = with_variance.then(|| {
            let p = &self.params;
            let base = p.xi * p.xi + p.sigma_rho * p.sigma_rho;
            let mut var: Vec<f64> = conv.gamma_sq_sum().into_iter().map(|s| base + s / n2).collect();
            if !locs.is_empty() {
                let mut kq = DMatrix::zeros(locs.len(), size);
                for (i, (qi, g)) in locs.iter().zip(&self.gammas).enumerate() {
                    let s = conv.gamma_sum(g);
                    for (c, q) in points.iter().enumerate() {
                        kq[(i, c)] = k_delta(p, q, qi) + s[c] / n2;
                    }
                }
                let v = self
                    .gram_factor
                    .solve_lower_triangular(&kq)
                    .expect("Cholesky factor has a positive diagonal");
                for (c, out) in var.iter_mut().enumerate() {
                    *out = (*out - v.column(c).norm_squared()).max(0.0);
                }
            }
            var
        });
        (mean, var)
    }

    /// Grid argmax of the posterior mean; ties go to the smaller x, then y.
    pub fn peak(&self, region: &PriorRegion, res: f64) -> Result<Point> {
        Ok(self.field(region, res, false)?.argmax())
    }
}

pub fn fit(measurements: &MeasurementSet, params: &ChannelParams, prior: &PriorRegion) -> Result<ChannelPosterior> {
    ChannelEstimator::new(*params, *prior)?.fit(measurements)
}

pub fn posterior_mean(posterior: &ChannelPosterior, q: &Point) -> f64 {
    posterior.mean(q)
}

pub fn posterior_var(posterior: &ChannelPosterior, q: &Point) -> f64 {
    posterior.variance(q)
}

pub fn peak(posterior: &ChannelPosterior, region: &PriorRegion, resolution: f64) -> Result<Point> {
    posterior.peak(region, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_prior() -> PriorRegion {
        PriorRegion::new(Point::new(-10.0, -10.0), Point::new(10.0, 10.0)).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, half: f64) -> MeasurementSet {
        let mut set = MeasurementSet::default();
        while set.len() < n {
            let q = Point::new(rng.random_range(-half..half), rng.random_range(-half..half));
            let _ = set.push(q, rng.random_range(-90.0..-40.0));
        }
        set
    }

    #[test]
    fn empty_posterior_is_prior() {
        let p = ChannelParams::default();
        let r = PriorRegion::default();
        let post = fit(&MeasurementSet::default(), &p, &r).unwrap();
        let q = Point::new(7.0, -3.0);
        assert_eq!(post.mean(&q), 0.0);
        let k = kernel(&p, &r, &q, &q);
        assert!((post.variance(&q) - k).abs() <= 1e-12 * k);
        assert_eq!(post.peak(&r, 1.0).unwrap(), Point::new(-50.0, -50.0));
    }

    #[test]
    fn single_measurement_closed_form() {
        let p = ChannelParams::default();
        let r = PriorRegion::default();
        let q1 = Point::new(4.0, 2.0);
        let y1 = -63.0;
        let post = fit(&MeasurementSet::new(vec![q1], vec![y1]).unwrap(), &p, &r).unwrap();
        let k11 = kernel(&p, &r, &q1, &q1);
        let s2 = p.sigma_rho * p.sigma_rho;
        assert!((post.alpha_weights()[0] - y1 / (k11 + s2)).abs() <= 1e-12 * (y1 / k11).abs());
        let mean = post.mean(&q1);
        assert!((mean - k11 * y1 / (k11 + s2)).abs() <= 1e-12 * mean.abs());
        let var = post.variance(&q1);
        let expected = k11 - k11 * k11 / (k11 + s2);
        assert!((var - expected).abs() <= 1e-12 * k11);
    }

    #[test]
    fn linear_in_observations() {
        let p = ChannelParams::default();
        let r = small_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(&mut rng, 6, 10.0);
        let mut est = ChannelEstimator::with_nodes(p, r, 60).unwrap();
        let a = est.fit(&set).unwrap();
        let b = est.fit(&set.scaled(-2.5)).unwrap();
        for i in 0..6 {
            let (wa, wb) = (a.alpha_weights()[i], b.alpha_weights()[i]);
            assert!((wb + 2.5 * wa).abs() <= 1e-12 * wa.abs().max(1e-3));
        }
        let q = Point::new(1.0, 1.0);
        assert!((b.mean(&q) + 2.5 * a.mean(&q)).abs() <= 1e-10 * a.mean(&q).abs());
    }

    #[test]
    fn factor_residual_is_small() {
        let p = ChannelParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = random_set(&mut rng, 30, 50.0);
        let post = fit(&set, &p, &PriorRegion::default()).unwrap();
        let l = post.gram_factor();
        let s2 = p.sigma_rho * p.sigma_rho;
        let target = post.gram() + DMatrix::identity(30, 30) * (s2 + post.jitter());
        let resid = (l * l.transpose() - target).abs().max();
        assert!(resid <= 1e-8 * post.gram().abs().max());
    }

    #[test]
    fn reduced_noise_interpolates() {
        let p = ChannelParams {
            sigma_rho: 1e-3,
            ..ChannelParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = random_set(&mut rng, 15, 10.0);
        let mut est = ChannelEstimator::with_nodes(p, small_prior(), 60).unwrap();
        let post = est.fit(&set).unwrap();
        for (q, y) in set.iter() {
            assert!((post.mean(&q) - y).abs() < 1e-3, "{} vs {y}", post.mean(&q));
        }
    }

    #[test]
    fn variance_bounded_by_prior_and_shrinks() {
        let p = ChannelParams::default();
        let r = small_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = random_set(&mut rng, 8, 10.0);
        let mut est = ChannelEstimator::with_nodes(p, r, 60).unwrap();
        let mut grown = MeasurementSet::default();
        let probes: Vec<Point> = (0..10)
            .map(|_| Point::new(rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)))
            .collect();
        let mut last: Vec<f64> = probes.iter().map(|q| est.kernel(q, q)).collect();
        for (q, y) in set.iter() {
            grown.push(q, y).unwrap();
            let post = est.fit(&grown).unwrap();
            for (probe, prev) in probes.iter().zip(last.iter_mut()) {
                let v = post.variance(probe);
                assert!(v <= *prev + 1e-9, "{v} > {prev}");
                *prev = v;
            }
        }
    }

    #[test]
    fn fft_field_matches_direct() {
        let p = ChannelParams::default();
        let r = small_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let set = random_set(&mut rng, 5, 10.0);
        let mut est = ChannelEstimator::with_nodes(p, r, 40).unwrap();
        let post = est.fit(&set).unwrap();
        let grid = post.field(&r, 1.0, true).unwrap();
        let var = grid.var.as_ref().unwrap();
        for (k, q) in grid.points().enumerate() {
            let (m, v) = (post.mean(&q), post.variance(&q));
            assert!((grid.mean[k] - m).abs() <= 1e-8 * m.abs().max(1.0), "{} vs {m}", grid.mean[k]);
            assert!((var[k] - v).abs() <= 1e-7 * post.variance(&q).max(1.0), "{} vs {v}", var[k]);
        }
        // A misaligned resolution goes through direct evaluation.
        let direct = post.field(&r, 0.7, false).unwrap();
        let q = Point::new(direct.xs[3], direct.ys[5]);
        assert_eq!(direct.mean[direct.index(3, 5)], post.mean(&q));
    }

    #[test]
    fn peak_of_strong_single_measurement() {
        let p = ChannelParams::default();
        let r = PriorRegion::default();
        let q1 = Point::new(12.0, -7.0);
        let set = MeasurementSet::new(vec![q1], vec![-20.0]).unwrap();
        let post = ChannelEstimator::with_nodes(p, r, 50).unwrap().fit(&set).unwrap();
        // Resolution 2 is aligned with the 2 m quadrature spacing (FFT path).
        let coarse = post.peak(&r, 2.0).unwrap();
        let mut best = (f64::NEG_INFINITY, Point::zeros());
        for &x in &grid_axis(-50.0, 50.0, 2.0) {
            for &y in &grid_axis(-50.0, 50.0, 2.0) {
                let q = Point::new(x, y);
                let m = post.mean(&q);
                if m > best.0 {
                    best = (m, q);
                }
            }
        }
        assert_eq!(coarse, best.1);
        let fine = post.peak(&r, 1.0).unwrap();
        assert!((coarse - fine).abs().max() <= 2.0, "{coarse} vs {fine}");
    }

    #[test]
    fn peak_translates_with_data_and_prior() {
        let p = ChannelParams::default();
        let r = small_prior();
        let set = MeasurementSet::new(
            vec![Point::new(-3.0, 1.0), Point::new(2.0, 4.0), Point::new(5.0, -2.0)],
            vec![-40.0, -55.0, -70.0],
        )
        .unwrap();
        let shift = Point::new(6.0, -4.0);
        let moved = MeasurementSet::new(
            set.locations().iter().map(|q| q + shift).collect(),
            set.values().to_vec(),
        )
        .unwrap();
        let a = ChannelEstimator::with_nodes(p, r, 40).unwrap().fit(&set).unwrap();
        let rs = r.translated(shift);
        let b = ChannelEstimator::with_nodes(p, rs, 40).unwrap().fit(&moved).unwrap();
        let pa = a.peak(&r, 1.0).unwrap();
        let pb = b.peak(&rs, 1.0).unwrap();
        assert!((pb - (pa + shift)).abs().max() <= 1.0 + 1e-9, "{pa} {pb}");
    }

    #[test]
    fn duplicate_free_refit_reuses_cache() {
        let p = ChannelParams::default();
        let mut est = ChannelEstimator::with_nodes(p, small_prior(), 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = random_set(&mut rng, 4, 10.0);
        let first = est.fit(&set).unwrap();
        let again = est.fit(&set).unwrap();
        assert_eq!(first.alpha_weights(), again.alpha_weights());
        assert_eq!(est.cache.cached_locations(), 4);
    }
}
