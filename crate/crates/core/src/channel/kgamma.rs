//! The path-loss kernel marginalized over a uniform transmitter prior,
//! `k_gamma(qi, qj) = E[Gamma(qi; b) Gamma(qj; b)]`, by midpoint quadrature.

use std::collections::HashMap;
use std::sync::Arc;

use super::{k_delta, path_loss_at_distance, ChannelParams, Point, PriorRegion};

pub const DEFAULT_PRIOR_NODES: usize = 200;

/// Midpoint nodes over the prior rectangle. Every node carries weight `1/N^2`
/// because the prior density is `1/area`.
#[derive(Debug, Clone)]
pub struct GammaQuadrature {
    params: ChannelParams,
    prior: PriorRegion,
    nodes_per_axis: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl GammaQuadrature {
    pub fn new(params: ChannelParams, prior: PriorRegion, nodes_per_axis: usize) -> Self {
        let n = nodes_per_axis.max(1);
        let (lo, hi) = (prior.lower(), prior.upper());
        let hx = (hi.x - lo.x) / n as f64;
        let hy = (hi.y - lo.y) / n as f64;
        Self {
            params,
            prior,
            nodes_per_axis: n,
            xs: (0..n).map(|i| lo.x + (i as f64 + 0.5) * hx).collect(),
            ys: (0..n).map(|j| lo.y + (j as f64 + 0.5) * hy).collect(),
        }
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn prior(&self) -> &PriorRegion {
        &self.prior
    }

    /// Node spacing along each axis.
    pub fn spacing(&self) -> (f64, f64) {
        let (lo, hi) = (self.prior.lower(), self.prior.upper());
        let n = self.nodes_per_axis as f64;
        ((hi.x - lo.x) / n, (hi.y - lo.y) / n)
    }

    /// `Gamma(q; b)` at every node, x-major.
    pub fn gamma_vector(&self, q: &Point) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.xs.len() * self.ys.len());
        for &bx in &self.xs {
            let dx = q.x - bx;
            for &by in &self.ys {
                let dy = q.y - by;
                out.push(path_loss_at_distance(&self.params, dx.hypot(dy)));
            }
        }
        out
    }

    /// Quadrature of the product of two node vectors. Symmetric bit for bit.
    pub fn expectation(&self, a: &[f64], b: &[f64]) -> f64 {
        let total: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        total / a.len() as f64
    }

    pub fn k_gamma(&self, qi: &Point, qj: &Point) -> f64 {
        self.expectation(&self.gamma_vector(qi), &self.gamma_vector(qj))
    }
}

pub fn k_gamma(params: &ChannelParams, prior: &PriorRegion, qi: &Point, qj: &Point) -> f64 {
    k_gamma_with_nodes(params, prior, qi, qj, DEFAULT_PRIOR_NODES)
}

pub fn k_gamma_with_nodes(
    params: &ChannelParams,
    prior: &PriorRegion,
    qi: &Point,
    qj: &Point,
    nodes_per_axis: usize,
) -> f64 {
    GammaQuadrature::new(*params, *prior, nodes_per_axis).k_gamma(qi, qj)
}

/// Full covariance `k_delta + k_gamma`.
pub fn kernel(params: &ChannelParams, prior: &PriorRegion, qi: &Point, qj: &Point) -> f64 {
    k_delta(params, qi, qj) + k_gamma(params, prior, qi, qj)
}

type Key = (u64, u64);

fn key(q: &Point) -> Key {
    (q.x.to_bits(), q.y.to_bits())
}

/// Node vectors and pairwise `k_gamma` values keyed by exact location, reused
/// across refits of a growing measurement set.
#[derive(Debug, Clone)]
pub struct GammaCache {
    quad: Arc<GammaQuadrature>,
    vectors: HashMap<Key, Arc<Vec<f64>>>,
    pairs: HashMap<(Key, Key), f64>,
}

impl GammaCache {
    pub fn new(quad: GammaQuadrature) -> Self {
        Self {
            quad: Arc::new(quad),
            vectors: HashMap::new(),
            pairs: HashMap::new(),
        }
    }

    pub fn quadrature(&self) -> &Arc<GammaQuadrature> {
        &self.quad
    }

    pub fn vector(&mut self, q: &Point) -> Arc<Vec<f64>> {
        let quad = &self.quad;
        self.vectors
            .entry(key(q))
            .or_insert_with(|| Arc::new(quad.gamma_vector(q)))
            .clone()
    }

    pub fn k_gamma(&mut self, qi: &Point, qj: &Point) -> f64 {
        let (a, b) = (key(qi), key(qj));
        let pair = if a <= b { (a, b) } else { (b, a) };
        if let Some(&v) = self.pairs.get(&pair) {
            return v;
        }
        let vi = self.vector(qi);
        let vj = self.vector(qj);
        let v = self.quad.expectation(&vi, &vj);
        self.pairs.insert(pair, v);
        v
    }

    pub fn cached_locations(&self) -> usize {
        self.vectors.len()
    }
}
