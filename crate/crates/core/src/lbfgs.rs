//! Limited-memory BFGS with a backtracking Armijo line search (plus the
//! approximate Wolfe acceptance test of Hager and Zhang for noisy plateaus).

use std::collections::VecDeque;

use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub armijo: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            armijo: 1e-4,
            grad_tol: 1e-8,
            max_iter: 500,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
    /// No step along steepest descent satisfied the Armijo condition; the
    /// iterate is at the floating-point resolution of the objective.
    LineSearchStalled,
    NonFiniteObjective,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
}

impl Minimum {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }
}

/// Minimize `f` from `x0`. `f` returns the value and gradient.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &LbfgsOptions) -> Minimum
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.memory);

    let finish = |x, fx, g: DVector<f64>, it, ev, status| {
        let grad_norm = g.norm();
        Minimum {
            x,
            value: fx,
            gradient: g,
            grad_norm,
            iterations: it,
            evaluations: ev,
            status,
        }
    };

    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return finish(x, fx, g, 0, evaluations, Status::NonFiniteObjective);
    }

    let mut iter = 0;
    while iter < opts.max_iter {
        if g.norm() <= opts.grad_tol {
            return finish(x, fx, g, iter, evaluations, Status::Converged);
        }
        iter += 1;

        let mut d = two_loop(&g, &history);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            history.clear();
            d = -&g;
            slope = -g.norm_squared();
        }
        let mut step = if history.is_empty() { (1.0 / g.norm()).min(1.0) } else { 1.0 };

        let mut accepted = None;
        loop {
            for _ in 0..opts.max_backtracks {
                let trial = &x + &d * step;
                let (ft, gt) = f(&trial);
                evaluations += 1;
                if ft.is_finite() && ft <= fx + opts.armijo * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                // Near the optimum of a large objective the decrease drops below
                // round-off; fall back to the approximate Wolfe test, which
                // relies on the directional derivative instead.
                let slope_t = gt.dot(&d);
                if ft.is_finite()
                    && ft <= fx + 1e-12 * fx.abs().max(1.0)
                    && slope_t >= 0.9 * slope
                    && slope_t <= (2.0 * opts.armijo - 1.0) * slope
                {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() || history.is_empty() {
                break;
            }
            // Quasi-Newton direction failed; retry once along steepest descent.
            history.clear();
            d = -&g;
            slope = -g.norm_squared();
            step = (1.0 / g.norm()).min(1.0);
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            return finish(x, fx, g, iter, evaluations, Status::LineSearchStalled);
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }

    let status = if g.norm() <= opts.grad_tol {
        Status::Converged
    } else {
        Status::MaxIterations
    };
    finish(x, fx, g, iter, evaluations, status)
}

fn two_loop(g: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}
