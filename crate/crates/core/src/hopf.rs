//! The generalized Hopf formula for linear dynamics with a time-optimal
//! (indicator) running cost and an optional locked control prefix.
//!
//! For a horizon `t`, initial state `x` and convex terminal cost `J`,
//!
//! ```text
//! phi(x, t) = -min_p { J*(e^{-tA^T} p) + int_0^t H(s, p) ds - <x, p> }
//! ```
//!
//! where `H(s, p) = ||-B^T e^{-sA^T} p||_*` once the new plan is in control
//! (`s >= tau`) and `H(s, p) = -p^T e^{-sA} B a_prev(s + delta_prev)` while the
//! previously committed control is still being executed (`s < tau`).
//! The objective is convex in `p`; it is minimized with multi-started L-BFGS.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lbfgs::{self, LbfgsOptions};
use crate::lincontrol::{mat_exp, LinearSystem};
use crate::quadrature::{gauss_legendre, Rule};
use crate::timeopt::PreviousPlan;

/// Goal set `{x : (x - c)^T W^{-1} (x - c) <= 1}` with implicit surface
/// `J(x) = (x - c)^T W^{-1} (x - c) - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidalTarget {
    center: DVector<f64>,
    shape: DMatrix<f64>,
    shape_inv: DMatrix<f64>,
}

impl EllipsoidalTarget {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        let n = center.len();
        if shape.nrows() != n || shape.ncols() != n {
            return Err(invalid(format!(
                "shape must be {n}x{n}, got {}x{}",
                shape.nrows(),
                shape.ncols()
            )));
        }
        if center.iter().chain(shape.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("target must be finite"));
        }
        let scale = shape.abs().max().max(1.0);
        if (&shape - shape.transpose()).abs().max() > 1e-12 * scale {
            return Err(invalid("shape matrix must be symmetric"));
        }
        let eig = shape.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(invalid("shape matrix must be positive definite"));
        }
        let shape_inv = shape
            .clone()
            .cholesky()
            .ok_or_else(|| invalid("shape matrix must be positive definite"))?
            .inverse();
        Ok(Self {
            center,
            shape,
            shape_inv,
        })
    }

    /// Ball of the given radius around `center`.
    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        let n = center.len();
        Self::new(center, DMatrix::identity(n, n) * (radius * radius))
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `J(x)`: negative inside the ellipsoid, zero on its boundary.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        d.dot(&(&self.shape_inv * &d)) - 1.0
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.shape_inv * (x - &self.center)) * 2.0
    }

    /// Convex conjugate `J*(p) = p^T W p / 4 + <p, c> + 1`.
    pub fn conjugate(&self, p: &DVector<f64>) -> f64 {
        0.25 * p.dot(&(&self.shape * p)) + p.dot(&self.center) + 1.0
    }

    pub fn conjugate_gradient(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.shape * p * 0.5 + &self.center
    }
}

#[derive(Debug, Clone)]
pub struct HopfProblem {
    pub system: Arc<LinearSystem>,
    pub target: EllipsoidalTarget,
    pub x: DVector<f64>,
    pub t: f64,
    pub tau: f64,
    /// Plan whose control is executed on `[0, tau)`. `None` means zero control.
    pub previous: Option<PreviousPlan>,
}

impl HopfProblem {
    pub fn new(
        system: Arc<LinearSystem>,
        target: EllipsoidalTarget,
        x: DVector<f64>,
        t: f64,
        tau: f64,
        previous: Option<PreviousPlan>,
    ) -> Result<Self> {
        let n = system.state_dim();
        if target.dim() != n || x.len() != n {
            return Err(invalid(format!(
                "dimension mismatch: system {n}, target {}, state {}",
                target.dim(),
                x.len()
            )));
        }
        if !(t >= 0.0 && t.is_finite()) {
            return Err(invalid(format!("horizon must be finite and >= 0, got {t}")));
        }
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(invalid(format!("delay must be finite and >= 0, got {tau}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("state must be finite"));
        }
        Ok(Self {
            system,
            target,
            x,
            t,
            tau,
            previous,
        })
    }

    /// Control already committed for `s < tau`.
    pub fn committed_control(&self, s: f64) -> Result<DVector<f64>> {
        match &self.previous {
            Some(prev) => prev.eval(s),
            None => Ok(DVector::zeros(self.system.control_dim())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HopfConfig {
    /// Gauss–Legendre points on the locked piece `[0, min(tau, t)]`.
    pub delay_nodes: usize,
    /// Gauss–Legendre points on the free piece `[tau, t]`.
    pub free_nodes: usize,
    /// Minimum number of equal panels per piece (each panel gets the full rule).
    pub panels: usize,
    /// Pieces longer than this (seconds) get more panels. The norm in the
    /// integrand dips sharply when the costate swings through zero, and a
    /// single long panel misses the dip.
    pub max_panel_width: f64,
    /// The norm is smoothed as `sqrt(|v|^2 + eps^2) - eps`.
    pub smoothing: f64,
    pub lbfgs: LbfgsOptions,
    /// Norms of the starts placed along the direction of `grad J(x)`.
    pub start_norms: Vec<f64>,
    pub random_starts: usize,
    pub seed: u64,
}

impl HopfConfig {
    fn panel_count(&self, length: f64) -> usize {
        panel_count(self.panels, self.max_panel_width, length)
    }
}

fn panel_count(min_panels: usize, max_width: f64, length: f64) -> usize {
    let by_width = if max_width > 0.0 {
        (length / max_width).ceil() as usize
    } else {
        1
    };
    min_panels.max(by_width).max(1)
}

impl Default for HopfConfig {
    fn default() -> Self {
        Self {
            delay_nodes: 16,
            free_nodes: 32,
            panels: 1,
            max_panel_width: 2.0,
            smoothing: 1e-9,
            lbfgs: LbfgsOptions::default(),
            start_norms: vec![0.1, 1.0, 10.0],
            random_starts: 2,
            seed: 0x5eed_4097,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopfSolution {
    pub p_star: DVector<f64>,
    /// `phi(x, t)`.
    pub value: f64,
    pub objective_value: f64,
    pub iterations: usize,
    pub starts_used: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// The discretized Hopf objective with all matrix exponentials precomputed.
#[derive(Debug, Clone)]
pub struct HopfObjective {
    target: EllipsoidalTarget,
    x: DVector<f64>,
    /// `e^{-t A^T}`.
    terminal_map: DMatrix<f64>,
    /// Rows `k*m..(k+1)*m` hold `-r B^T e^{-s_k A^T}` for free node `k`.
    free_maps: DMatrix<f64>,
    free_weights: Vec<f64>,
    control_dim: usize,
    /// Integral of the locked-control Hamiltonian, which is linear in `p`.
    locked_linear: DVector<f64>,
    smoothing: f64,
    affine: Option<AffineFree>,
}

/// Free piece for systems with `(A^T)^2 = 0`, where
/// `-r B^T e^{-s A^T} p = c0 p - s c1 p` is affine in `s`. Its norm has a
/// single minimum, with a kink or a sharp bend there when the line passes
/// through or near zero, so panels are graded toward it for each `p`.
#[derive(Debug, Clone)]
struct AffineFree {
    c0: DMatrix<f64>,
    c1: DMatrix<f64>,
    lo: f64,
    hi: f64,
    ref_nodes: Vec<f64>,
    ref_weights: Vec<f64>,
    min_panels: usize,
    max_panel_width: f64,
}

impl AffineFree {
    /// Minimizer of `|a - s b|` over the free piece.
    fn split(&self, a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
        let bb = b.norm_squared();
        if bb == 0.0 {
            return None;
        }
        Some((a.dot(b) / bb).clamp(self.lo, self.hi))
    }

    /// Breakpoints of `[lo, hi]` graded geometrically toward `s0`, one of its
    /// ends. The integrand is analytic within `width` of `s0`, so grading stops
    /// once panels are that small.
    fn graded(lo: f64, hi: f64, s0: f64, width: f64) -> Vec<(f64, f64)> {
        const MAX_LEVELS: usize = 40;
        let len = hi - lo;
        let toward_hi = s0 >= hi;
        let mut out = Vec::new();
        let mut h = len;
        for _ in 0..MAX_LEVELS {
            let next = 0.25 * h;
            if h <= width {
                break;
            }
            out.push(if toward_hi { (hi - h, hi - next) } else { (lo + next, lo + h) });
            h = next;
        }
        out.push(if toward_hi { (hi - h, hi) } else { (lo, lo + h) });
        out
    }

    /// Integral of the smoothed norm over `[lo, s0] + [s0, hi]` and its gradient.
    fn integrate(&self, a: &DVector<f64>, b: &DVector<f64>, s0: f64, eps: f64) -> (f64, DVector<f64>) {
        let m = a.len();
        let mut value = 0.0;
        let mut acc0 = DVector::zeros(m);
        let mut acc1 = DVector::zeros(m);
        let nb = b.norm();
        let gap = (a - b * s0).norm().max(eps);
        let width = gap / nb;
        let pieces = Self::graded(self.lo, s0, s0, width)
            .into_iter()
            .chain(Self::graded(s0, self.hi, s0, width));
        for (lo, hi) in pieces {
            let panels = panel_count(self.min_panels, self.max_panel_width, hi - lo);
            let rule = Rule::composite_from(&self.ref_nodes, &self.ref_weights, lo, hi, panels);
            for (&s, &w) in rule.nodes.iter().zip(&rule.weights) {
                let v = a - b * s;
                let r = (v.norm_squared() + eps * eps).sqrt();
                value += w * (r - eps);
                if r > 0.0 {
                    acc0.axpy(w / r, &v, 1.0);
                    acc1.axpy(w * s / r, &v, 1.0);
                }
            }
        }
        (value, self.c0.tr_mul(&acc0) - self.c1.tr_mul(&acc1))
    }
}

impl HopfObjective {
    pub fn new(problem: &HopfProblem, config: &HopfConfig) -> Result<Self> {
        let sys = &problem.system;
        let n = sys.state_dim();
        let m = sys.control_dim();
        let at = sys.a().transpose();
        let radius = sys.control_set().radius();
        let split = problem.tau.min(problem.t);

        let terminal_map = mat_exp(&at, -problem.t)?;

        let free = Rule::composite(split, problem.t, config.free_nodes, config.panel_count(problem.t - split));
        let mut free_maps = DMatrix::zeros(free.len() * m, n);
        let neg_bt = sys.b().transpose() * (-radius);
        for (k, &s) in free.nodes.iter().enumerate() {
            let block = &neg_bt * mat_exp(&at, -s)?;
            free_maps.view_mut((k * m, 0), (m, n)).copy_from(&block);
        }

        let mut locked_linear = DVector::zeros(n);
        if problem.previous.is_some() {
            let locked = Rule::composite(0.0, split, config.delay_nodes, config.panel_count(split));
            for (&s, &w) in locked.nodes.iter().zip(&locked.weights) {
                let a_prev = problem.committed_control(s)?;
                let col = mat_exp(sys.a(), -s)? * (sys.b() * a_prev);
                locked_linear.axpy(-w, &col, 1.0);
            }
        }

        let affine = if (&at * &at).iter().all(|v| *v == 0.0) && problem.t > split {
            let (ref_nodes, ref_weights) = gauss_legendre(config.free_nodes);
            Some(AffineFree {
                c1: &neg_bt * &at,
                c0: neg_bt,
                lo: split,
                hi: problem.t,
                ref_nodes,
                ref_weights,
                min_panels: config.panels,
                max_panel_width: config.max_panel_width,
            })
        } else {
            None
        };

        Ok(Self {
            target: problem.target.clone(),
            x: problem.x.clone(),
            terminal_map,
            free_maps,
            free_weights: free.weights,
            control_dim: m,
            locked_linear,
            smoothing: config.smoothing,
            affine,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Objective value and its exact gradient.
    pub fn eval(&self, p: &DVector<f64>) -> (f64, DVector<f64>) {
        let q = &self.terminal_map * p;
        let mut value = self.target.conjugate(&q);
        let mut grad = self.terminal_map.tr_mul(&self.target.conjugate_gradient(&q));

        let m = self.control_dim;
        let eps = self.smoothing;
        if let Some(af) = &self.affine {
            let a = &af.c0 * p;
            let b = &af.c1 * p;
            if let Some(s0) = af.split(&a, &b) {
                let (v, g) = af.integrate(&a, &b, s0, eps);
                value += v + self.locked_linear.dot(p) - self.x.dot(p);
                grad += g + &self.locked_linear - &self.x;
                return (value, grad);
            }
        }
        let v = &self.free_maps * p;
        let mut coeff = DVector::zeros(v.len());
        for (k, &w) in self.free_weights.iter().enumerate() {
            let block = v.rows(k * m, m);
            let r = (block.norm_squared() + eps * eps).sqrt();
            value += w * (r - eps);
            if r > 0.0 {
                coeff.rows_mut(k * m, m).copy_from(&(block * (w / r)));
            }
        }
        grad += self.free_maps.tr_mul(&coeff);

        value += self.locked_linear.dot(p) - self.x.dot(p);
        grad += &self.locked_linear;
        grad -= &self.x;
        (value, grad)
    }
}

/// `J(x)` of the target.
pub fn target_value(target: &EllipsoidalTarget, x: &DVector<f64>) -> f64 {
    target.value(x)
}

/// `J*(p)` of the target.
pub fn target_conjugate(target: &EllipsoidalTarget, p: &DVector<f64>) -> f64 {
    target.conjugate(p)
}

/// Unsmoothed Hamiltonian of the transformed system at time `s`.
pub fn hamiltonian_hat(problem: &HopfProblem, s: f64, p: &DVector<f64>) -> Result<f64> {
    if !(0.0..=problem.t).contains(&s) {
        return Err(invalid(format!("s = {s} outside [0, {}]", problem.t)));
    }
    let sys = &problem.system;
    if s >= problem.tau {
        let v = -(sys.b().transpose() * (mat_exp(&sys.a().transpose(), -s)? * p));
        Ok(sys.control_set().dual_norm(&v))
    } else {
        let a_prev = problem.committed_control(s)?;
        let col = mat_exp(sys.a(), -s)? * (sys.b() * a_prev);
        Ok(-p.dot(&col))
    }
}

pub fn hopf_objective(
    problem: &HopfProblem,
    p: &DVector<f64>,
    config: &HopfConfig,
) -> Result<(f64, DVector<f64>)> {
    if p.len() != problem.system.state_dim() || p.iter().any(|v| !v.is_finite()) {
        return Err(invalid("costate must be finite with the state dimension"));
    }
    Ok(HopfObjective::new(problem, config)?.eval(p))
}

pub fn solve_hopf(problem: &HopfProblem, config: &HopfConfig) -> Result<HopfSolution> {
    solve_hopf_from(problem, config, None)
}

/// Like [`solve_hopf`], with an optional extra start (e.g. the minimizer of a
/// nearby problem) tried after the standard ones.
pub fn solve_hopf_from(
    problem: &HopfProblem,
    config: &HopfConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<HopfSolution> {
    let n = problem.system.state_dim();
    if problem.t == 0.0 {
        // Hopf at t = 0 is biconjugation.
        let value = problem.target.value(&problem.x);
        return Ok(HopfSolution {
            p_star: problem.target.gradient(&problem.x),
            value,
            objective_value: -value,
            iterations: 0,
            starts_used: 0,
            grad_norm: 0.0,
            converged: true,
        });
    }

    let objective = HopfObjective::new(problem, config)?;
    let mut starts = initial_costates(problem, config);
    if let Some(w) = warm_start {
        if w.len() == n && w.iter().all(|v| v.is_finite()) {
            starts.push(w.clone());
        }
    }

    let mut best: Option<lbfgs::Minimum> = None;
    for p0 in &starts {
        let run = lbfgs::minimize(|p| objective.eval(p), p0.clone(), &config.lbfgs);
        if !run.value.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => run.value < b.value || (run.value == b.value && run.grad_norm < b.grad_norm),
        };
        if better {
            best = Some(run);
        }
    }
    let best = best.ok_or_else(|| invalid("Hopf objective is not finite at any start"))?;
    Ok(HopfSolution {
        value: -best.value,
        objective_value: best.value,
        iterations: best.iterations,
        starts_used: starts.len(),
        grad_norm: best.grad_norm,
        converged: best.grad_norm <= config.lbfgs.grad_tol,
        p_star: best.x,
    })
}

fn initial_costates(problem: &HopfProblem, config: &HopfConfig) -> Vec<DVector<f64>> {
    let n = problem.system.state_dim();
    let g = problem.target.gradient(&problem.x);
    let gn = g.norm();
    let dir = if gn > 0.0 && gn.is_finite() {
        g / gn
    } else {
        let mut e = DVector::zeros(n);
        e[0] = 1.0;
        e
    };
    let mut starts: Vec<DVector<f64>> = config.start_norms.iter().map(|&s| &dir * s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.random_starts {
        starts.push(DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)));
    }
    starts
}

/// Optimal costate `e^{-s A^T} p*` along the trajectory.
pub fn costate_at(p_star: &DVector<f64>, system: &LinearSystem, s: f64) -> Result<DVector<f64>> {
    if !(s >= 0.0) {
        return Err(invalid(format!("s must be >= 0, got {s}")));
    }
    Ok(mat_exp(&system.a().transpose(), -s)? * p_star)
}
