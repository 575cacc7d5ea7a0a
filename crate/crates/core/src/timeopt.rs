//! Minimum time-to-reach, optimal control extraction, and delay-aware control
//! schedules that chain across re-planning cycles.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{invalid, Error, Result};
use crate::hopf::{solve_hopf_from, EllipsoidalTarget, HopfConfig, HopfProblem};
use crate::lincontrol::{mat_exp, ControlLaw, LinearSystem};

/// Below this costate norm the control direction is undefined and zero is used.
pub const CONTROL_ZERO_THRESHOLD: f64 = 1e-12;

/// The plan being executed when a new one is computed, together with the time
/// `delta` that had elapsed on it when the new plan takes over.
#[derive(Debug, Clone)]
pub struct PreviousPlan {
    pub schedule: Arc<ControlSchedule>,
    pub delta: f64,
}

impl PreviousPlan {
    pub fn new(schedule: Arc<ControlSchedule>, delta: f64) -> Self {
        Self { schedule, delta }
    }

    /// The previous plan's control, re-based to the new plan's clock.
    pub fn eval(&self, s: f64) -> Result<DVector<f64>> {
        self.schedule.eval(s + self.delta)
    }
}

/// Control of one plan: the Pontryagin control from costate `p` for `s >= tau`,
/// the previous plan (or zero) before that.
#[derive(Debug, Clone)]
pub struct ControlSchedule {
    p: DVector<f64>,
    tau: f64,
    previous: Option<PreviousPlan>,
    system: Arc<LinearSystem>,
}

impl ControlSchedule {
    pub fn new(
        p: DVector<f64>,
        tau: f64,
        previous: Option<PreviousPlan>,
        system: Arc<LinearSystem>,
    ) -> Self {
        Self {
            p,
            tau,
            previous,
            system,
        }
    }

    pub fn costate(&self) -> &DVector<f64> {
        &self.p
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn previous(&self) -> Option<&PreviousPlan> {
        self.previous.as_ref()
    }

    pub fn system(&self) -> &Arc<LinearSystem> {
        &self.system
    }

    pub fn eval(&self, s: f64) -> Result<DVector<f64>> {
        if !(s >= 0.0) {
            return Err(invalid(format!("schedule evaluated at negative time {s}")));
        }
        if s >= self.tau {
            return self.own_control(s);
        }
        match &self.previous {
            Some(prev) => prev.eval(s),
            None => Ok(DVector::zeros(self.system.control_dim())),
        }
    }

    /// `argmax_a <-B^T e^{-sA^T} p, a>` over the control set.
    pub fn own_control(&self, s: f64) -> Result<DVector<f64>> {
        let lambda = mat_exp(&self.system.a().transpose(), -s)? * &self.p;
        let v = -(self.system.b().transpose() * lambda);
        Ok(self
            .system
            .control_set()
            .maximizer(&v, CONTROL_ZERO_THRESHOLD))
    }
}

impl ControlLaw for ControlSchedule {
    fn control(&self, s: f64) -> Result<DVector<f64>> {
        self.eval(s)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if self.tau > 0.0 {
            out.push(self.tau);
            if let Some(prev) = &self.previous {
                out.extend(
                    prev.schedule
                        .breakpoints()
                        .into_iter()
                        .map(|b| b - prev.delta)
                        .filter(|&b| b > 0.0 && b < self.tau),
                );
            }
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }
}

pub fn make_schedule(
    p_star: DVector<f64>,
    tau: f64,
    previous: Option<PreviousPlan>,
    system: Arc<LinearSystem>,
) -> Result<ControlSchedule> {
    if !(tau >= 0.0) {
        return Err(invalid(format!("tau must be >= 0, got {tau}")));
    }
    if let Some(prev) = &previous {
        if !(prev.delta >= 0.0) {
            return Err(invalid(format!("delta must be >= 0, got {}", prev.delta)));
        }
    }
    Ok(ControlSchedule::new(p_star, tau, previous, system))
}

/// Hamiltonian of the untransformed system used for `d phi / dt = -H`.
///
/// The branch is chosen by the current horizon: `t_current >= tau` uses the
/// dual norm, otherwise the committed control evaluated at `t_current`.
pub fn newton_hamiltonian(
    x: &DVector<f64>,
    p: &DVector<f64>,
    system: &LinearSystem,
    t_current: f64,
    tau: f64,
    previous: Option<&PreviousPlan>,
) -> Result<f64> {
    let drift = -(system.a() * x).dot(p);
    if t_current >= tau {
        let v = -(system.b().transpose() * p);
        Ok(drift + system.control_set().dual_norm(&v))
    } else {
        let a_prev = match previous {
            Some(prev) => prev.eval(t_current)?,
            None => DVector::zeros(system.control_dim()),
        };
        Ok(drift - p.dot(&(system.b() * a_prev)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinTimeConfig {
    /// Stop when `|phi(x, t) - phi_target| <= phi_tol`.
    pub phi_tol: f64,
    /// Level the Newton iteration aims at. Zero reaches the boundary; a small
    /// negative value lands just inside the goal.
    pub phi_target: f64,
    pub t_max: f64,
    pub max_iters: usize,
    /// Seed each Hopf solve with the previous iterate's costate as an extra start.
    pub warm_start: bool,
    pub hopf: HopfConfig,
}

impl Default for MinTimeConfig {
    fn default() -> Self {
        Self {
            phi_tol: 1e-3,
            phi_target: 0.0,
            t_max: 1e4,
            max_iters: 100,
            warm_start: true,
            hopf: HopfConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinTimeResult {
    pub t_star: f64,
    pub p_star: DVector<f64>,
    /// Hopf evaluations spent (bracketing, Newton and bisection steps).
    pub newton_iters: usize,
    pub final_phi: f64,
    pub converged: bool,
    /// The initial state already lies in the goal; `t_star = 0`.
    pub inside_goal: bool,
    /// Final bracket `[t_lo, t_hi]` with `phi - target` positive at `t_lo` and
    /// negative at `t_hi`.
    pub bracket: (f64, f64),
    /// Inner Hopf solves whose gradient tolerance was not met.
    pub inner_unconverged: usize,
    pub schedule: Arc<ControlSchedule>,
}

pub fn min_time_to_reach(
    x: &DVector<f64>,
    system: &Arc<LinearSystem>,
    target: &EllipsoidalTarget,
    tau: f64,
    previous: Option<PreviousPlan>,
    config: &MinTimeConfig,
) -> Result<MinTimeResult> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(invalid(format!("tau must be finite and >= 0, got {tau}")));
    }
    let n = system.state_dim();
    if x.len() != n || target.dim() != n {
        return Err(invalid(format!(
            "dimension mismatch: system {n}, target {}, state {}",
            target.dim(),
            x.len()
        )));
    }
    if !(config.phi_tol > 0.0) || !config.phi_target.is_finite() {
        return Err(invalid("phi_tol must be positive and phi_target finite"));
    }
    let finish = |t_star: f64, p: DVector<f64>, iters, phi, inside, bracket, unconv| -> Result<MinTimeResult> {
        let schedule = make_schedule(p.clone(), tau, previous.clone(), system.clone())?;
        Ok(MinTimeResult {
            t_star,
            p_star: p,
            newton_iters: iters,
            final_phi: phi,
            converged: true,
            inside_goal: inside,
            bracket,
            inner_unconverged: unconv,
            schedule: Arc::new(schedule),
        })
    };

    let j0 = target.value(x);
    if j0 <= 0.0 {
        return finish(0.0, target.gradient(x), 0, j0, true, (0.0, 0.0), 0);
    }
    let g0 = j0 - config.phi_target;
    if g0.abs() <= config.phi_tol {
        return finish(0.0, target.gradient(x), 0, j0, false, (0.0, 0.0), 0);
    }

    let mut iters = 0usize;
    let mut unconverged = 0usize;
    let mut warm: Option<DVector<f64>> = None;
    let mut evaluate = |t: f64, warm: &mut Option<DVector<f64>>| -> Result<(f64, DVector<f64>)> {
        let problem = HopfProblem::new(system.clone(), target.clone(), x.clone(), t, tau, previous.clone())?;
        let start = if config.warm_start { warm.as_ref() } else { None };
        let sol = solve_hopf_from(&problem, &config.hopf, start)?;
        if !sol.converged {
            unconverged += 1;
        }
        *warm = Some(sol.p_star.clone());
        Ok((sol.value, sol.p_star))
    };

    // Bracket the root of phi - target by doubling.
    let mut t_lo = 0.0;
    let mut t = tau.max(1.0);
    let (mut t_cur, mut phi_cur, mut p_cur);
    let mut t_hi = loop {
        if iters >= config.max_iters {
            return Err(Error::NonConvergence {
                iterations: iters,
                last_t: t,
                last_phi: f64::NAN,
            });
        }
        let (phi, p) = evaluate(t, &mut warm)?;
        iters += 1;
        (t_cur, phi_cur, p_cur) = (t, phi, p);
        let g = phi - config.phi_target;
        if g.abs() <= config.phi_tol {
            return finish(t, p_cur, iters, phi, false, (t_lo, t), unconverged);
        }
        if g < 0.0 {
            break t;
        }
        t_lo = t;
        t *= 2.0;
        if t > config.t_max {
            return Err(Error::HorizonUnreachable { t_max: config.t_max });
        }
    };

    // Safeguarded Newton: t+ = t + (phi - target) / H, bisection when outside the bracket.
    loop {
        if iters >= config.max_iters {
            return Err(Error::NonConvergence {
                iterations: iters,
                last_t: t_cur,
                last_phi: phi_cur,
            });
        }
        let h = newton_hamiltonian(x, &p_cur, system, t_cur, tau, previous.as_ref())?;
        let g_cur = phi_cur - config.phi_target;
        let newton = if h.abs() >= 1e-12 { t_cur + g_cur / h } else { f64::NAN };
        let t_next = if newton.is_finite() && newton > t_lo && newton < t_hi {
            newton
        } else {
            0.5 * (t_lo + t_hi)
        };
        let (phi, p) = evaluate(t_next, &mut warm)?;
        iters += 1;
        (t_cur, phi_cur, p_cur) = (t_next, phi, p);
        let g = phi - config.phi_target;
        if g.abs() <= config.phi_tol {
            return finish(t_cur, p_cur, iters, phi, false, (t_lo, t_hi), unconverged);
        }
        if g > 0.0 {
            t_lo = t_cur;
        } else {
            t_hi = t_cur;
        }
        if t_hi - t_lo <= 1e-12 * t_hi.max(1.0) {
            return Err(Error::NonConvergence {
                iterations: iters,
                last_t: t_cur,
                last_phi: phi_cur,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lincontrol::propagate;
    use nalgebra::DMatrix;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn planar() -> Arc<LinearSystem> {
        Arc::new(LinearSystem::planar_double_integrator())
    }

    fn goal(peak: (f64, f64)) -> EllipsoidalTarget {
        EllipsoidalTarget::new(
            dv(&[peak.0, peak.1, 0.0, 0.0]),
            DMatrix::from_diagonal(&dv(&[1.0, 1.0, 0.01, 0.01])),
        )
        .unwrap()
    }

    #[test]
    fn base_schedule_is_zero_before_tau() {
        let s = ControlSchedule::new(dv(&[1.0, 2.0, 3.0, 4.0]), 2.0, None, planar());
        for t in [0.0, 1.0, 1.9999] {
            assert_eq!(s.eval(t).unwrap(), DVector::zeros(2));
        }
        assert!((s.eval(2.0).unwrap().norm() - 1.0).abs() < 1e-12);
        assert!(s.eval(-0.1).is_err());
    }

    #[test]
    fn control_is_normalized_negative_velocity_costate() {
        let s = ControlSchedule::new(dv(&[0.0, 0.0, 3.0, 4.0]), 0.0, None, planar());
        let u = s.eval(0.0).unwrap();
        assert!((u - dv(&[-0.6, -0.8])).norm() < 1e-15);
        // Oracle: argmax over sampled unit controls of <-B a, p>.
        let p = dv(&[0.0, 0.0, 3.0, 4.0]);
        let best = (0..36_000)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / 36_000.0;
                (th, -(p[2] * th.cos() + p[3] * th.sin()))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert!((best.cos() + 0.6).abs() < 1e-3 && (best.sin() + 0.8).abs() < 1e-3);
    }

    #[test]
    fn vanishing_costate_gives_zero_control() {
        let s = ControlSchedule::new(DVector::zeros(4), 0.0, None, planar());
        assert_eq!(s.eval(3.0).unwrap(), DVector::zeros(2));
        // (p3 - s p1, p4 - s p2) vanishes at s = 2.
        let s = ControlSchedule::new(dv(&[1.0, 1.0, 2.0, 2.0]), 0.0, None, planar());
        assert_eq!(s.eval(2.0).unwrap(), DVector::zeros(2));
        assert!((s.eval(1.0).unwrap().norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fallback_delegates_once_to_formula_branch() {
        let sys = planar();
        let first = Arc::new(ControlSchedule::new(dv(&[0.1, -0.2, 1.0, 0.5]), 2.0, None, sys.clone()));
        let second = make_schedule(
            dv(&[-0.3, 0.2, 0.4, -1.0]),
            2.0,
            Some(PreviousPlan::new(first.clone(), 10.0)),
            sys.clone(),
        )
        .unwrap();
        for k in 0..200 {
            let s = k as f64 * 0.01;
            assert_eq!(second.eval(s).unwrap(), first.eval(s + 10.0).unwrap());
            assert_eq!(second.eval(s).unwrap(), first.own_control(s + 10.0).unwrap());
        }
        assert_eq!(second.eval(2.0).unwrap(), second.own_control(2.0).unwrap());
        assert_eq!(second.breakpoints(), vec![2.0]);
    }

    #[test]
    fn newton_hamiltonian_examples() {
        let sys = LinearSystem::planar_double_integrator();
        let p = dv(&[0.7, -1.1, 3.0, 4.0]);
        let h = newton_hamiltonian(&DVector::zeros(4), &p, &sys, 5.0, 0.0, None).unwrap();
        assert!((h - 5.0).abs() < 1e-14);

        let x = dv(&[45.0, 30.0, -10.0, 0.0]);
        let h = newton_hamiltonian(&x, &p, &sys, 5.0, 2.0, None).unwrap();
        // -(Ax).p = -(-10 p1) = 10 p1
        let expected = 10.0 * p[0] + (p[2] * p[2] + p[3] * p[3]).sqrt();
        assert!((h - expected).abs() < 1e-12);

        // Locked branch with zero previous control leaves only the drift term.
        let h = newton_hamiltonian(&x, &p, &sys, 1.0, 2.0, None).unwrap();
        assert!((h - 10.0 * p[0]).abs() < 1e-12);
    }

    #[test]
    fn inside_goal_returns_zero_time() {
        let g = goal((0.0, 0.0));
        let x = dv(&[0.1, 0.2, 0.0, 0.01]);
        let r = min_time_to_reach(&x, &planar(), &g, 2.0, None, &MinTimeConfig::default()).unwrap();
        assert!(r.inside_goal);
        assert_eq!(r.t_star, 0.0);
        assert!(r.final_phi < 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = goal((0.0, 0.0));
        let x = dv(&[0.1, 0.2]);
        let r = min_time_to_reach(&x, &planar(), &g, 0.0, None, &MinTimeConfig::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn scenario_converges_within_stopping_rule() {
        let g = goal((0.0, 0.0));
        let x = dv(&[45.0, 30.0, -10.0, 0.0]);
        let cfg = MinTimeConfig::default();
        let r = min_time_to_reach(&x, &planar(), &g, 2.0, None, &cfg).unwrap();
        assert!(r.converged);
        assert!(r.final_phi.abs() <= 1e-3, "{}", r.final_phi);
        assert!(r.newton_iters <= 50, "{}", r.newton_iters);
        assert!(r.bracket.0 <= r.t_star && r.t_star <= r.bracket.1);

        // Executing the extracted control lands on the goal boundary.
        let traj = propagate(&planar(), &x, r.schedule.as_ref(), r.t_star, 0.01).unwrap();
        let jf = g.value(traj.final_state());
        assert!(jf.abs() < 5e-3, "J at t* = {jf}");
        // Admissible control along the plan.
        assert!(traj.controls.iter().all(|u| u.norm() <= 1.0 + 1e-12));
    }

    #[test]
    fn zero_delay_matches_undelayed_solve() {
        let sys = planar();
        let g = goal((5.0, -3.0));
        let x = dv(&[20.0, 10.0, -2.0, 1.0]);
        let prev = Arc::new(ControlSchedule::new(dv(&[0.3, 0.1, -1.0, 2.0]), 0.0, None, sys.clone()));
        let cfg = MinTimeConfig::default();
        let a = min_time_to_reach(&x, &sys, &g, 0.0, None, &cfg).unwrap();
        let b = min_time_to_reach(&x, &sys, &g, 0.0, Some(PreviousPlan::new(prev, 10.0)), &cfg).unwrap();
        assert!((a.t_star - b.t_star).abs() <= 1e-6);
        assert!((a.final_phi - b.final_phi).abs() <= 1e-6);
    }

    #[test]
    fn negative_target_lands_inside() {
        let g = goal((0.0, 0.0));
        let x = dv(&[10.0, 5.0, 0.0, 1.0]);
        let cfg = MinTimeConfig {
            phi_target: -5e-4,
            phi_tol: 4e-4,
            ..MinTimeConfig::default()
        };
        let r = min_time_to_reach(&x, &planar(), &g, 0.0, None, &cfg).unwrap();
        assert!(r.final_phi <= -1e-4 && r.final_phi >= -9e-4, "{}", r.final_phi);
        let traj = propagate(&planar(), &x, r.schedule.as_ref(), r.t_star, 0.01).unwrap();
        assert!(g.value(traj.final_state()) <= 0.0);
    }
}
