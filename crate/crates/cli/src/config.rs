//! TOML run configuration. Field names follow `SimConfig`; every key is
//! optional and falls back to the default scenario. Unknown keys are rejected.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use hopf_rtoc::channel::{ChannelParams, Point, PriorRegion};
use hopf_rtoc::hopf::EllipsoidalTarget;
use hopf_rtoc::lincontrol::{ControlSet, LinearSystem};
use hopf_rtoc::sim::{build_goal, sim_min_time_config, SimConfig};
use hopf_rtoc::timeopt::MinTimeConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    // Braced so that unknown keys next to `kind` are still rejected.
    PlanarDoubleIntegrator {},
    #[serde(rename = "double-integrator-1d")]
    DoubleIntegrator1d {},
    /// Row-major `a` (n x n) and `b` (n x m), Euclidean control ball.
    Custom {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default = "unit")]
        control_radius: f64,
    },
}

fn unit() -> f64 {
    1.0
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec::PlanarDoubleIntegrator {}
    }
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, CliError> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Config(format!("{name} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl SystemSpec {
    pub fn build(&self) -> Result<LinearSystem, CliError> {
        match self {
            SystemSpec::PlanarDoubleIntegrator {} => Ok(LinearSystem::planar_double_integrator()),
            SystemSpec::DoubleIntegrator1d {} => Ok(LinearSystem::double_integrator_1d()),
            SystemSpec::Custom { a, b, control_radius } => LinearSystem::new(
                matrix(a, "system.a")?,
                matrix(b, "system.b")?,
                ControlSet::Euclidean { radius: *control_radius },
            )
            .map_err(|e| CliError::Config(e.to_string())),
        }
    }
}

/// Overrides for the Newton iteration. Unset keys keep the command's default.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinTimeSection {
    pub phi_tol: Option<f64>,
    pub phi_target: Option<f64>,
    pub t_max: Option<f64>,
    pub max_iters: Option<usize>,
    pub warm_start: Option<bool>,
}

impl MinTimeSection {
    pub fn apply(&self, mut base: MinTimeConfig) -> MinTimeConfig {
        if let Some(v) = self.phi_tol {
            base.phi_tol = v;
        }
        if let Some(v) = self.phi_target {
            base.phi_target = v;
        }
        if let Some(v) = self.t_max {
            base.t_max = v;
        }
        if let Some(v) = self.max_iters {
            base.max_iters = v;
        }
        if let Some(v) = self.warm_start {
            base.warm_start = v;
        }
        base
    }
}

/// Explicit goal for `mintime`: `{x : (x - center)^T diag(shape)^-1 (x - center) <= 1}`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSection {
    pub center: Vec<f64>,
    pub shape_diag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub channel_params: ChannelParams,
    pub prior: PriorRegion,
    pub q_b_true: [f64; 2],
    pub x0: Vec<f64>,
    pub tau: f64,
    pub delta: f64,
    pub v_max: f64,
    /// Defaults to `channel_params.eta`.
    pub sample_spacing: Option<f64>,
    pub max_cycles: usize,
    pub seed: u64,
    pub dt: f64,
    pub peak_resolution: f64,
    pub min_time: MinTimeSection,
    /// Goal for `mintime`; without it the goal is built around `q_b_true`.
    pub goal: Option<GoalSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            system: SystemSpec::default(),
            channel_params: sim.channel_params,
            prior: sim.prior,
            q_b_true: [sim.q_b_true.x, sim.q_b_true.y],
            x0: sim.x0.iter().copied().collect(),
            tau: sim.tau,
            delta: sim.delta,
            v_max: sim.v_max,
            sample_spacing: None,
            max_cycles: sim.max_cycles,
            seed: sim.seed,
            dt: sim.dt,
            peak_resolution: sim.peak_resolution,
            min_time: MinTimeSection::default(),
            goal: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let cfg = SimConfig {
            system: self.system.build()?,
            channel_params: self.channel_params,
            prior: self.prior,
            q_b_true: Point::new(self.q_b_true[0], self.q_b_true[1]),
            x0: DVector::from_column_slice(&self.x0),
            tau: self.tau,
            delta: self.delta,
            v_max: self.v_max,
            sample_spacing: self.sample_spacing.unwrap_or(self.channel_params.eta),
            max_cycles: self.max_cycles,
            seed: self.seed,
            dt: self.dt,
            peak_resolution: self.peak_resolution,
            min_time: self.min_time.apply(sim_min_time_config()),
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn min_time_config(&self) -> MinTimeConfig {
        self.min_time.apply(MinTimeConfig::default())
    }

    pub fn goal(&self) -> Result<EllipsoidalTarget, CliError> {
        let target = match &self.goal {
            Some(g) => {
                if g.center.len() != g.shape_diag.len() {
                    return Err(CliError::Config("goal.center and goal.shape_diag differ in length".into()));
                }
                EllipsoidalTarget::new(
                    DVector::from_column_slice(&g.center),
                    DMatrix::from_diagonal(&DVector::from_column_slice(&g.shape_diag)),
                )
            }
            None => build_goal(Point::new(self.q_b_true[0], self.q_b_true[1]), self.v_max),
        };
        target.map_err(|e| CliError::Config(e.to_string()))
    }
}
