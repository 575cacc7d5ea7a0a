use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use hopf_rtoc::channel::{ChannelEstimator, MeasurementSet};
use hopf_rtoc::sim::{run_rtoc, SimResult, Termination};
use hopf_rtoc::timeopt::min_time_to_reach;
use hopf_rtoc::Error;

use crate::config::RunConfig;
use crate::output::{grid_csv, measurements_csv, read_measurements, trajectory_csv, trajectory_rows, write_atomic};
use crate::CliError;

/// What a command prints on standard output plus its exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub record: Value,
    pub exit: u8,
}

fn floats(v: impl IntoIterator<Item = f64>) -> Value {
    Value::from(v.into_iter().collect::<Vec<_>>())
}

pub fn mintime(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let system = std::sync::Arc::new(cfg.system.build()?);
    let x = nalgebra::DVector::from_column_slice(&cfg.x0);
    if x.len() != system.state_dim() {
        return Err(CliError::Config(format!(
            "x0 has {} entries, system state has {}",
            x.len(),
            system.state_dim()
        )));
    }
    let goal = cfg.goal()?;
    let mt = cfg.min_time_config();
    match min_time_to_reach(&x, &system, &goal, cfg.tau, None, &mt) {
        Ok(res) => Ok(Outcome {
            record: json!({
                "status": "converged",
                "t_star": res.t_star,
                "p_star": floats(res.p_star.iter().copied()),
                "newton_iters": res.newton_iters,
                "phi": res.final_phi,
                "inside_goal": res.inside_goal,
                "inner_unconverged": res.inner_unconverged,
            }),
            exit: 0,
        }),
        Err(e @ (Error::NonConvergence { .. } | Error::HorizonUnreachable { .. })) => Ok(Outcome {
            record: json!({ "status": "not-converged", "error": e.to_string() }),
            exit: 2,
        }),
        Err(e) => Err(CliError::Config(e.to_string())),
    }
}

pub fn channel(cfg: &RunConfig, measurements: &Path, out_dir: &Path) -> Result<Outcome, CliError> {
    let set = read_measurements(measurements)?;
    let mut estimator =
        ChannelEstimator::new(cfg.channel_params, cfg.prior).map_err(|e| CliError::Config(e.to_string()))?;
    let posterior = estimator.fit(&set).map_err(|e| CliError::Numerical(e.to_string()))?;
    let grid = posterior
        .field(&cfg.prior, cfg.peak_resolution, true)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let peak = grid.argmax();
    let path = out_dir.join("channel_grid.csv");
    write_atomic(&path, &grid_csv(&grid)?)?;
    Ok(Outcome {
        record: json!({
            "peak": [peak.x, peak.y],
            "measurements": set.len(),
            "grid": path.display().to_string(),
        }),
        exit: 0,
    })
}

fn prefix(set: &MeasurementSet, n: usize) -> MeasurementSet {
    MeasurementSet::new(set.locations()[..n].to_vec(), set.values()[..n].to_vec())
        .expect("prefix of a valid set")
}

/// Paths written by `simulate`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub trajectory: PathBuf,
    pub measurements: PathBuf,
    pub planned: Vec<PathBuf>,
    pub grids: Vec<PathBuf>,
    pub summary: PathBuf,
}

pub fn simulate(cfg: &RunConfig, out_dir: &Path, quiet: bool) -> Result<Outcome, CliError> {
    let sim = cfg.sim_config()?;
    if sim.system.state_dim() != 4 || sim.system.control_dim() != 2 {
        return Err(CliError::Config(
            "simulate needs a planar system with state (qx, qy, vx, vy) and a 2-D control".into(),
        ));
    }
    let result = run_rtoc(&sim).map_err(|e| CliError::Config(e.to_string()))?;
    if !quiet {
        for c in &result.cycles {
            eprintln!(
                "cycle {}: peak ({}, {}), t* = {:.3} s, {} new measurements",
                c.k, c.peak_estimate.x, c.peak_estimate.y, c.t_star, c.measurements_added
            );
        }
    }
    let artifacts = write_run(&result, cfg, out_dir)?;
    let exit = if result.terminated == Termination::SolverFailure { 2 } else { 0 };
    Ok(Outcome {
        record: json!({
            "terminated": result.terminated,
            "cycles": result.cycles.len(),
            "final_state": floats(result.final_state.iter().copied()),
            "total_sim_time": result.total_sim_time,
            "summary": artifacts.summary.display().to_string(),
        }),
        exit,
    })
}

pub fn write_run(result: &SimResult, cfg: &RunConfig, out_dir: &Path) -> Result<RunArtifacts, CliError> {
    let mut executed = Vec::new();
    let mut planned = Vec::new();
    let mut grids = Vec::new();
    let mut estimator =
        ChannelEstimator::new(cfg.channel_params, cfg.prior).map_err(|e| CliError::Config(e.to_string()))?;
    let mut cycles = Vec::new();
    for c in &result.cycles {
        executed.extend(trajectory_rows(&c.executed_segment, c.start_time, c.k));

        let plan_path = out_dir.join(format!("planned_cycle_{}.csv", c.k));
        write_atomic(&plan_path, &trajectory_csv(trajectory_rows(&c.planned_trajectory, c.start_time, c.k))?)?;

        // The fit this cycle planned with used the first `measurements_before` samples.
        let posterior = estimator
            .fit(&prefix(&result.measurements, c.measurements_before))
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let grid = posterior
            .field(&cfg.prior, cfg.peak_resolution, true)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let grid_path = out_dir.join(format!("channel_grid_cycle_{}.csv", c.k));
        write_atomic(&grid_path, &grid_csv(&grid)?)?;

        cycles.push(json!({
            "k": c.k,
            "start_time": c.start_time,
            "x_start": floats(c.x_start.iter().copied()),
            "peak_estimate": [c.peak_estimate.x, c.peak_estimate.y],
            "t_star": c.t_star,
            "p_star": floats(c.p_star.iter().copied()),
            "newton_iters": c.newton_iters,
            "phi_at_convergence": c.phi_at_convergence,
            "measurements_before": c.measurements_before,
            "measurements_added": c.measurements_added,
            "executed_duration": c.executed_segment.final_time(),
            "planned": file_name(&plan_path),
            "channel_grid": file_name(&grid_path),
        }));
        planned.push(plan_path);
        grids.push(grid_path);
    }

    let trajectory = out_dir.join("trajectory.csv");
    write_atomic(&trajectory, &trajectory_csv(executed)?)?;
    let measurements = out_dir.join("measurements.csv");
    write_atomic(&measurements, &measurements_csv(&result.measurements)?)?;

    let summary_value = json!({
        "terminated": result.terminated,
        "failure": result.failure,
        "seed": cfg.seed,
        "total_sim_time": result.total_sim_time,
        "final_state": floats(result.final_state.iter().copied()),
        "q_b_true": cfg.q_b_true,
        "measurements": result.measurements.len(),
        "cycles": cycles,
        "trajectory": file_name(&trajectory),
        "measurements_file": file_name(&measurements),
    });
    let mut text = serde_json::to_string_pretty(&summary_value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    let summary = out_dir.join("summary.json");
    write_atomic(&summary, text.as_bytes())?;

    Ok(RunArtifacts {
        trajectory,
        measurements,
        planned,
        grids,
        summary,
    })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
