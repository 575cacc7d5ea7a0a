//! Regular evaluation grids and FFT evaluation of `k_gamma` over them.
//!
//! When the grid origin coincides with the prior's lower corner and the grid
//! step is a whole multiple of the quadrature spacing, `Gamma(q_a; b_m)` only
//! depends on the index offset `a - m`, so `sum_m Gamma(q_a; b_m) u(b_m)` is a
//! 2-D linear convolution and the whole grid costs a few FFTs.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::kgamma::GammaQuadrature;
use super::{path_loss_at_distance, Point, PriorRegion};

/// `lower + k * res` for `k = 0..=floor((upper - lower) / res)`.
pub fn grid_axis(lower: f64, upper: f64, res: f64) -> Vec<f64> {
    let count = ((upper - lower) / res + 1e-9).floor() as usize + 1;
    (0..count).map(|k| lower + k as f64 * res).collect()
}

/// Posterior mean (and optionally variance) on a regular grid, x-major:
/// value `(xs[i], ys[j])` lives at index `i * ys.len() + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Option<Vec<f64>>,
}

impl FieldGrid {
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ys.len() + j
    }

    /// Grid argmax of the mean; ties go to the smaller x, then the smaller y.
    pub fn argmax(&self) -> Point {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..self.xs.len() {
            for j in 0..self.ys.len() {
                let v = self.mean[self.index(i, j)];
                if v > best_v {
                    best_v = v;
                    best = (i, j);
                }
            }
        }
        Point::new(self.xs[best.0], self.ys[best.1])
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.xs
            .iter()
            .flat_map(move |&x| self.ys.iter().map(move |&y| Point::new(x, y)))
    }
}

/// Precomputed transforms for one (quadrature, grid) pair.
pub(crate) struct Convolver {
    n: usize,
    px: usize,
    py: usize,
    step: (usize, usize),
    counts: (usize, usize),
    gamma_hat: Vec<Complex64>,
    gamma_sq_hat: Vec<Complex64>,
    fx: Arc<dyn Fft<f64>>,
    fy: Arc<dyn Fft<f64>>,
    ix: Arc<dyn Fft<f64>>,
    iy: Arc<dyn Fft<f64>>,
}

fn whole_ratio(res: f64, h: f64) -> Option<usize> {
    let r = res / h;
    let k = r.round();
    (k >= 1.0 && (r - k).abs() <= 1e-9 * r).then_some(k as usize)
}

impl Convolver {
    /// `None` when the grid is not aligned with the quadrature nodes.
    pub(crate) fn new(quad: &GammaQuadrature, region: &PriorRegion, res: f64) -> Option<Self> {
        if region != quad.prior() {
            return None;
        }
        let n = quad.nodes_per_axis();
        let (hx, hy) = quad.spacing();
        let rx = whole_ratio(res, hx)?;
        let ry = whole_ratio(res, hy)?;
        let (lo, hi) = (region.lower(), region.upper());
        let kx = grid_axis(lo.x, hi.x, res).len();
        let ky = grid_axis(lo.y, hi.y, res).len();
        let ax = (kx - 1) * rx + 1;
        let ay = (ky - 1) * ry + 1;
        let (px, py) = (ax + n - 1, ay + n - 1);

        let params = quad.params();
        let mut table = vec![Complex64::default(); px * py];
        let mut table_sq = vec![Complex64::default(); px * py];
        for i in 0..px {
            let dx = (i as f64 - (n as f64 - 1.0) - 0.5) * hx;
            for j in 0..py {
                let dy = (j as f64 - (n as f64 - 1.0) - 0.5) * hy;
                let g = path_loss_at_distance(params, dx.hypot(dy));
                table[i * py + j] = Complex64::new(g, 0.0);
                table_sq[i * py + j] = Complex64::new(g * g, 0.0);
            }
        }

        let mut planner = FftPlanner::new();
        let mut conv = Self {
            n,
            px,
            py,
            step: (rx, ry),
            counts: (kx, ky),
            gamma_hat: Vec::new(),
            gamma_sq_hat: Vec::new(),
            fx: planner.plan_fft_forward(px),
            fy: planner.plan_fft_forward(py),
            ix: planner.plan_fft_inverse(px),
            iy: planner.plan_fft_inverse(py),
        };
        conv.forward(&mut table);
        conv.forward(&mut table_sq);
        conv.gamma_hat = table;
        conv.gamma_sq_hat = table_sq;
        Some(conv)
    }

    pub(crate) fn counts(&self) -> (usize, usize) {
        self.counts
    }

    fn transform(&self, data: &mut [Complex64], along_y: &Arc<dyn Fft<f64>>, along_x: &Arc<dyn Fft<f64>>) {
        along_y.process(data);
        let mut t = vec![Complex64::default(); data.len()];
        for i in 0..self.px {
            for j in 0..self.py {
                t[j * self.px + i] = data[i * self.py + j];
            }
        }
        along_x.process(&mut t);
        for i in 0..self.px {
            for j in 0..self.py {
                data[i * self.py + j] = t[j * self.px + i];
            }
        }
    }

    fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.fy, &self.fx);
    }

    fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.iy, &self.ix);
        let scale = 1.0 / (self.px * self.py) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn apply(&self, kernel_hat: &[Complex64], u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut data = vec![Complex64::default(); self.px * self.py];
        for i in 0..n {
            for j in 0..n {
                data[i * self.py + j] = Complex64::new(u[i * n + j], 0.0);
            }
        }
        self.forward(&mut data);
        for (d, k) in data.iter_mut().zip(kernel_hat) {
            *d *= k;
        }
        self.inverse(&mut data);
        let (kx, ky) = self.counts;
        let mut out = Vec::with_capacity(kx * ky);
        for a in 0..kx {
            for b in 0..ky {
                let i = a * self.step.0 + n - 1;
                let j = b * self.step.1 + n - 1;
                out.push(data[i * self.py + j].re);
            }
        }
        out
    }

    /// `sum_m Gamma(q; b_m) u(b_m)` at every grid point.
    pub(crate) fn gamma_sum(&self, u: &[f64]) -> Vec<f64> {
        self.apply(&self.gamma_hat, u)
    }

    /// `sum_m Gamma(q; b_m)^2` at every grid point.
    pub(crate) fn gamma_sq_sum(&self) -> Vec<f64> {
        self.apply(&self.gamma_sq_hat, &vec![1.0; self.n * self.n])
    }
}
