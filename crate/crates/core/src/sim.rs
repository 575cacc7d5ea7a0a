//! Closed-loop re-planning: a vehicle with double-integrator dynamics
//! estimates the channel online and repeatedly re-plans a minimum-time
//! approach to the current peak estimate.
//!
//! Every cycle fits the channel to all measurements so far, picks the peak of
//! the posterior mean, solves for the minimum time to an ellipsoid around it,
//! and executes the plan for `delta` seconds while sampling the channel every
//! `sample_spacing` meters of travel. The first `tau` seconds of each plan
//! replay the previous plan, modeling the time the computation takes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::{
    measure, sample_truth, ChannelEstimator, ChannelParams, MeasurementSet, NoiseStream, Point, PriorRegion,
    TruthField,
};
use crate::error::{invalid, Result};
use crate::hopf::EllipsoidalTarget;
use crate::lincontrol::{propagate, LinearSystem, Trajectory};
use crate::timeopt::{min_time_to_reach, ControlSchedule, MinTimeConfig, PreviousPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub system: LinearSystem,
    pub channel_params: ChannelParams,
    pub prior: PriorRegion,
    pub q_b_true: Point,
    pub x0: DVector<f64>,
    pub tau: f64,
    pub delta: f64,
    /// Velocity semi-axis of the goal ellipsoid, m/s.
    pub v_max: f64,
    /// Distance travelled between channel samples, m.
    pub sample_spacing: f64,
    pub max_cycles: usize,
    pub seed: u64,
    pub dt: f64,
    pub peak_resolution: f64,
    pub min_time: MinTimeConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        let channel_params = ChannelParams::default();
        Self {
            system: LinearSystem::planar_double_integrator(),
            channel_params,
            prior: PriorRegion::default(),
            q_b_true: Point::new(25.0, -25.0),
            x0: DVector::from_column_slice(&[45.0, 30.0, -10.0, 0.0]),
            tau: 2.0,
            delta: 10.0,
            v_max: 0.1,
            sample_spacing: channel_params.eta,
            max_cycles: 20,
            seed: 0,
            dt: 0.01,
            peak_resolution: 1.0,
            min_time: sim_min_time_config(),
        }
    }
}

/// Newton settings used in the loop: aim slightly inside the goal so the
/// executed plan actually enters it, while keeping `|phi| <= 1e-3`.
pub fn sim_min_time_config() -> MinTimeConfig {
    MinTimeConfig {
        phi_target: -5e-4,
        phi_tol: 4e-4,
        ..MinTimeConfig::default()
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.channel_params.validate()?;
        let n = self.system.state_dim();
        if n < 2 {
            return Err(invalid("the first two state components must be the position"));
        }
        if self.x0.len() != n || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("x0 must be a finite {n}-vector")));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(invalid("tau must be >= 0"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(invalid("delta must be > 0"));
        }
        if !(self.tau < self.delta) {
            return Err(invalid(format!("tau ({}) must be below delta ({})", self.tau, self.delta)));
        }
        if self.max_cycles < 1 {
            return Err(invalid("max_cycles must be >= 1"));
        }
        for (name, v) in [
            ("v_max", self.v_max),
            ("sample_spacing", self.sample_spacing),
            ("dt", self.dt),
            ("peak_resolution", self.peak_resolution),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.q_b_true.x.is_finite() && self.q_b_true.y.is_finite()) {
            return Err(invalid("q_b_true must be finite"));
        }
        Ok(())
    }
}

/// Ellipsoid around `(peak, 0, 0)` with unit position and `v_max` velocity
/// semi-axes.
pub fn build_goal(peak: Point, v_max: f64) -> Result<EllipsoidalTarget> {
    if !(v_max > 0.0 && v_max.is_finite()) {
        return Err(invalid(format!("v_max must be positive, got {v_max}")));
    }
    let v2 = v_max * v_max;
    EllipsoidalTarget::new(
        DVector::from_column_slice(&[peak.x, peak.y, 0.0, 0.0]),
        DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 1.0, v2, v2])),
    )
}

/// Arc-length bookkeeping between samples; persists across cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleAnchor {
    pub last_sample_point: Point,
    /// Distance travelled since `last_sample_point`.
    pub travelled: f64,
}

impl SampleAnchor {
    pub fn at(q: Point) -> Self {
        Self {
            last_sample_point: q,
            travelled: 0.0,
        }
    }
}

fn position(x: &DVector<f64>) -> Point {
    Point::new(x[0], x[1])
}

/// Points along `segment` where the travelled distance reaches multiples of
/// `spacing`, linearly interpolated between samples.
pub fn sample_points(segment: &Trajectory, anchor: &mut SampleAnchor, spacing: f64) -> Result<Vec<Point>> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(invalid(format!("sample spacing must be positive, got {spacing}")));
    }
    let mut out = Vec::new();
    for pair in segment.states.windows(2) {
        let (mut from, to) = (position(&pair[0]), position(&pair[1]));
        let mut remaining = (to - from).norm();
        while anchor.travelled + remaining >= spacing {
            let need = spacing - anchor.travelled;
            let q = from + (to - from) * (need / remaining);
            out.push(q);
            anchor.last_sample_point = q;
            anchor.travelled = 0.0;
            remaining -= need;
            from = q;
        }
        anchor.travelled += remaining;
    }
    Ok(out)
}

/// Measures the channel at the sample points along `segment`. Points that
/// coincide with an earlier measurement are skipped.
pub fn collect_measurements(
    truth: &mut TruthField,
    segment: &Trajectory,
    anchor: &mut SampleAnchor,
    spacing: f64,
    params: &ChannelParams,
    noise: &mut NoiseStream,
) -> Result<MeasurementSet> {
    let mut set = MeasurementSet::default();
    for q in sample_points(segment, anchor, spacing)? {
        let y = measure(truth, &q, params, noise);
        let _ = set.push(q, y);
    }
    Ok(set)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleRecord {
    pub k: usize,
    /// Simulation time at the start of the cycle.
    pub start_time: f64,
    pub x_start: DVector<f64>,
    pub peak_estimate: Point,
    pub t_star: f64,
    pub p_star: DVector<f64>,
    pub newton_iters: usize,
    pub phi_at_convergence: f64,
    /// Measurements the fit of this cycle used.
    pub measurements_before: usize,
    pub measurements_added: usize,
    /// Full plan on `[0, t_star]`, cycle-local time.
    pub planned_trajectory: Trajectory,
    /// What was executed, cycle-local time.
    pub executed_segment: Trajectory,
    #[serde(skip)]
    pub schedule: Option<Arc<ControlSchedule>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GoalReached,
    MaxCycles,
    SolverFailure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub cycles: Vec<CycleRecord>,
    pub terminated: Termination,
    /// Diagnostic when `terminated` is a solver failure.
    pub failure: Option<String>,
    pub final_state: DVector<f64>,
    pub total_sim_time: f64,
    pub measurements: MeasurementSet,
}

impl SimResult {
    /// Goal of the last cycle that planned.
    pub fn last_goal(&self, v_max: f64) -> Option<EllipsoidalTarget> {
        self.cycles.last().and_then(|c| build_goal(c.peak_estimate, v_max).ok())
    }
}

pub fn run_rtoc(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let params = config.channel_params;
    let system = Arc::new(config.system.clone());
    let mut truth = sample_truth(&params, config.q_b_true, config.seed);
    let mut noise = NoiseStream::new(config.seed);
    let mut estimator = ChannelEstimator::new(params, config.prior)?;

    let mut x = config.x0.clone();
    let q0 = position(&x);
    let mut measurements = MeasurementSet::default();
    measurements.push(q0, measure(&mut truth, &q0, &params, &mut noise))?;
    let mut anchor = SampleAnchor::at(q0);

    let mut cycles = Vec::new();
    let mut time = 0.0;
    let mut previous: Option<PreviousPlan> = None;
    let mut terminated = Termination::MaxCycles;
    let mut failure = None;

    for k in 0..config.max_cycles {
        let fitted = estimator
            .fit(&measurements)
            .and_then(|post| post.peak(&config.prior, config.peak_resolution));
        let peak = match fitted {
            Ok(p) => p,
            Err(e) => {
                terminated = Termination::SolverFailure;
                failure = Some(e.to_string());
                break;
            }
        };
        let goal = build_goal(peak, config.v_max)?;
        let plan = match min_time_to_reach(&x, &system, &goal, config.tau, previous.clone(), &config.min_time) {
            Ok(p) => p,
            Err(e) => {
                terminated = Termination::SolverFailure;
                failure = Some(e.to_string());
                break;
            }
        };

        let schedule = plan.schedule.clone();
        let planned = propagate(&system, &x, schedule.as_ref(), plan.t_star, config.dt)?;
        let mut executed = propagate(&system, &x, schedule.as_ref(), config.delta.min(plan.t_star), config.dt)?;
        let entered = executed.states.iter().position(|s| goal.value(s) <= 0.0);
        if let Some(i) = entered {
            executed.truncate_at(i);
        }

        let new = collect_measurements(
            &mut truth,
            &executed,
            &mut anchor,
            config.sample_spacing,
            &params,
            &mut noise,
        )?;
        let before = measurements.len();
        for (q, y) in new.iter() {
            let _ = measurements.push(q, y);
        }

        let elapsed = executed.final_time();
        cycles.push(CycleRecord {
            k,
            start_time: time,
            x_start: x.clone(),
            peak_estimate: peak,
            t_star: plan.t_star,
            p_star: plan.p_star.clone(),
            newton_iters: plan.newton_iters,
            phi_at_convergence: plan.final_phi,
            measurements_before: before,
            measurements_added: measurements.len() - before,
            planned_trajectory: planned,
            executed_segment: executed.clone(),
            schedule: Some(schedule.clone()),
        });
        time += elapsed;
        x = executed.final_state().clone();
        previous = Some(PreviousPlan::new(schedule, elapsed));

        if entered.is_some() {
            terminated = Termination::GoalReached;
            break;
        }
    }

    Ok(SimResult {
        cycles,
        terminated,
        failure,
        final_state: x,
        total_sim_time: time,
        measurements,
    })
}
