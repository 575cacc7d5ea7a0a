//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line and then asserts on the same condition.

use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hopf_rtoc::channel::{
    fit, kernel, k_gamma, ChannelParams, MeasurementSet, Point, PriorRegion,
};
use hopf_rtoc::hopf::{solve_hopf, EllipsoidalTarget, HopfConfig, HopfObjective, HopfProblem};
use hopf_rtoc::lincontrol::LinearSystem;
use hopf_rtoc::sim::{run_rtoc, SimConfig, SimResult, Termination};
use hopf_rtoc::timeopt::{make_schedule, min_time_to_reach, MinTimeConfig, PreviousPlan};

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn planar() -> Arc<LinearSystem> {
    Arc::new(LinearSystem::planar_double_integrator())
}

fn random_diag_target(rng: &mut ChaCha8Rng, n: usize, spread: f64, w: (f64, f64)) -> EllipsoidalTarget {
    let c = DVector::from_fn(n, |_, _| rng.random_range(-spread..spread));
    let shape = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(w.0..w.1)));
    EllipsoidalTarget::new(c, shape).unwrap()
}

fn random_plan(rng: &mut ChaCha8Rng, system: &Arc<LinearSystem>, delta: f64) -> PreviousPlan {
    let p = DVector::from_fn(system.state_dim(), |_, _| rng.random_range(-2.0..2.0));
    let schedule = make_schedule(p, 2.0, None, system.clone()).unwrap();
    PreviousPlan::new(Arc::new(schedule), delta)
}

/// The twenty closed-loop runs shared by criteria 5, 6 and 9, with the wall time
/// they took.
fn sim_runs() -> &'static (Vec<SimResult>, Duration) {
    static RUNS: OnceLock<(Vec<SimResult>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let seeds: Vec<u64> = (0..20).collect();
        let mut results: Vec<(u64, SimResult)> = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(5)
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|&seed| {
                                let cfg = SimConfig { seed, ..SimConfig::default() };
                                (seed, run_rtoc(&cfg).expect("valid config"))
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
        results.sort_by_key(|(s, _)| *s);
        (results.into_iter().map(|(_, r)| r).collect(), start.elapsed())
    })
}

#[test]
fn criterion_1_small_horizon_recovers_terminal_cost() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let system = planar();
    let config = HopfConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let target = random_diag_target(&mut rng, 4, 5.0, (0.5, 4.0));
        let x = DVector::from_vec(vec![
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ]);
        let expected = target.value(&x);
        let problem = HopfProblem::new(system.clone(), target, x, 1e-9, 0.0, None).unwrap();
        let sol = solve_hopf(&problem, &config).unwrap();
        worst = worst.max((sol.value - expected).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-4 && elapsed < Duration::from_secs(10);
    report(1, pass, format!("max |phi - J| = {worst:.3e}, {elapsed:.2?}"));
    assert!(pass);
}

/// Minimum time for the scalar double integrator to reach the ball of radius
/// `r` around the origin, by enumerating one-switch bang-bang controls: `sign`
/// for `t1`, then `-sign` for `t2`, both on a `step` grid.
fn bang_bang_oracle(d: f64, v: f64, r: f64, step: f64) -> f64 {
    let inside = |p: f64, w: f64| p * p + w * w <= r * r;
    if inside(d, v) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for sign in [1.0, -1.0] {
        let mut i = 0usize;
        loop {
            let t1 = i as f64 * step;
            if t1 >= best {
                break;
            }
            let p1 = d + v * t1 + 0.5 * sign * t1 * t1;
            let v1 = v + sign * t1;
            // During the second arc the velocity is v1 - sign * t2, which has to
            // be within r of zero for the state to be inside the ball.
            let centre = sign * v1;
            let lo = ((centre - r) / step).floor().max(0.0) as usize;
            let hi = ((centre + r) / step).ceil().max(0.0) as usize;
            for j in lo..=hi {
                let t2 = j as f64 * step;
                if t1 + t2 >= best {
                    break;
                }
                let p2 = p1 + v1 * t2 - 0.5 * sign * t2 * t2;
                let v2 = v1 - sign * t2;
                if inside(p2, v2) {
                    best = t1 + t2;
                    break;
                }
            }
            i += 1;
            if t1 > 50.0 {
                break;
            }
        }
    }
    best
}

#[test]
fn criterion_2_bang_bang_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let system = Arc::new(LinearSystem::double_integrator_1d());
    let r = 1e-2;
    let target = EllipsoidalTarget::ball(DVector::zeros(2), r).unwrap();
    let config = MinTimeConfig::default();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..20 {
        let (d, v) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
        let oracle = bang_bang_oracle(d, v, r, 1e-4);
        match min_time_to_reach(&DVector::from_vec(vec![d, v]), &system, &target, 0.0, None, &config) {
            Ok(res) => worst = worst.max((res.t_star - oracle).abs()),
            Err(e) => {
                println!("  ({d:.4}, {v:.4}): {e}");
                failures += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && worst <= 2e-2 && elapsed < Duration::from_secs(60);
    report(2, pass, format!("max |t* - oracle| = {worst:.3e} s, {failures} failures, {elapsed:.2?}"));
    assert!(pass);
}

/// `min_u J(x(t))` for the planar double integrator with piecewise-constant
/// controls on `steps` intervals, by accelerated projected gradient on the
/// product of unit balls.
fn direct_optimum(x: &DVector<f64>, target: &EllipsoidalTarget, t: f64, steps: usize, iters: usize) -> f64 {
    let h = t / steps as f64;
    // Exact effect of a unit control held on [s_k, s_k + h]: position gains
    // ((t - s_k)^2 - (t - s_k - h)^2) / 2, velocity gains h.
    let gains: Vec<f64> = (0..steps)
        .map(|k| {
            let a = t - k as f64 * h;
            let b = a - h;
            0.5 * (a * a - b * b)
        })
        .collect();
    let free = DVector::from_vec(vec![x[0] + t * x[2], x[1] + t * x[3], x[2], x[3]]);
    let w_inv = target.shape().clone().try_inverse().unwrap();
    let c = target.center().clone();
    let endpoint = |u: &[[f64; 2]]| {
        let mut y = free.clone();
        for (k, uk) in u.iter().enumerate() {
            y[0] += gains[k] * uk[0];
            y[1] += gains[k] * uk[1];
            y[2] += h * uk[0];
            y[3] += h * uk[1];
        }
        y
    };
    let cost = |y: &DVector<f64>| {
        let e = y - &c;
        e.dot(&(&w_inv * &e)) - 1.0
    };
    // Lipschitz constant of the gradient: 2 ||W^-1|| ||G||^2.
    let g_sq: f64 = gains.iter().map(|g| g * g).sum::<f64>() + steps as f64 * h * h;
    let w_norm = w_inv.clone().symmetric_eigen().eigenvalues.max();
    let step = 1.0 / (2.0 * w_norm * g_sq);

    let project = |v: [f64; 2]| {
        let n = v[0].hypot(v[1]);
        if n > 1.0 {
            [v[0] / n, v[1] / n]
        } else {
            v
        }
    };
    let mut u = vec![[0.0; 2]; steps];
    let mut z = u.clone();
    let mut theta = 1.0f64;
    for _ in 0..iters {
        let y = endpoint(&z);
        let grad_y = &w_inv * (&y - &c) * 2.0;
        let next: Vec<[f64; 2]> = z
            .iter()
            .enumerate()
            .map(|(k, zk)| {
                let g = [gains[k] * grad_y[0] + h * grad_y[2], gains[k] * grad_y[1] + h * grad_y[3]];
                project([zk[0] - step * g[0], zk[1] - step * g[1]])
            })
            .collect();
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;
        z = next
            .iter()
            .zip(&u)
            .map(|(n, o)| [n[0] + beta * (n[0] - o[0]), n[1] + beta * (n[1] - o[1])])
            .collect();
        u = next;
        theta = theta_next;
    }
    cost(&endpoint(&u))
}

#[test]
fn criterion_3_direct_trajectory_optimization() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let system = planar();
    let config = HopfConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let target = random_diag_target(&mut rng, 4, 2.0, (0.5, 3.0));
        let x = DVector::from_vec(vec![
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ]);
        let t = rng.random_range(1.0..4.0);
        let problem = HopfProblem::new(system.clone(), target.clone(), x.clone(), t, 0.0, None).unwrap();
        let hopf = solve_hopf(&problem, &config).unwrap().value;
        let direct = direct_optimum(&x, &target, t, 200, 10_000);
        println!("  t = {t:.3}: hopf {hopf:.6}, direct {direct:.6}");
        worst = worst.max((hopf - direct).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-2 && elapsed < Duration::from_secs(300);
    report(3, pass, format!("max |phi - direct| = {worst:.3e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_4_zero_delay_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let system = planar();
    let config = MinTimeConfig::default();
    let (mut dt, mut dphi) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let target = EllipsoidalTarget::ball(
            DVector::from_vec(vec![rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.0, 0.0]),
            rng.random_range(0.5..2.0),
        )
        .unwrap();
        let x = DVector::from_vec(vec![
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]);
        let prev = random_plan(&mut rng, &system, 10.0);
        let delayed = min_time_to_reach(&x, &system, &target, 0.0, Some(prev), &config).unwrap();
        let plain = min_time_to_reach(&x, &system, &target, 0.0, None, &config).unwrap();
        dt = dt.max((delayed.t_star - plain.t_star).abs());
        dphi = dphi.max((delayed.final_phi - plain.final_phi).abs());
    }
    let pass = dt <= 1e-6 && dphi <= 1e-6;
    report(4, pass, format!("max |dt*| = {dt:.3e}, max |dphi| = {dphi:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_5_delay_lock_and_continuity() {
    let (runs, _) = sim_runs();
    let tau = SimConfig::default().tau;
    let (mut mismatches, mut checked) = (0usize, 0usize);
    let mut worst_jump: f64 = 0.0;
    for run in runs {
        for pair in run.cycles.windows(2) {
            let (prev, cur) = (&pair[0], &pair[1]);
            let delta = prev.executed_segment.final_time();
            let prev_schedule = prev.schedule.as_ref().unwrap();
            let cur_schedule = cur.schedule.as_ref().unwrap();
            let seg = &cur.executed_segment;
            for (s, u) in seg.times.iter().zip(&seg.controls) {
                if *s < tau {
                    checked += 1;
                    if *u != prev_schedule.eval(s + delta).unwrap() {
                        mismatches += 1;
                    }
                }
            }
            // Off-grid instants too: RK4 also evaluates between grid points.
            for i in 0..200 {
                let s = tau * i as f64 / 200.0;
                checked += 1;
                if cur_schedule.eval(s).unwrap() != prev_schedule.eval(s + delta).unwrap() {
                    mismatches += 1;
                }
            }
            worst_jump = worst_jump.max((prev.executed_segment.final_state() - &cur.x_start).norm());
            worst_jump = worst_jump.max((&seg.states[0] - &cur.x_start).norm());
        }
    }
    let pass = mismatches == 0 && checked > 0 && worst_jump <= 1e-9;
    report(
        5,
        pass,
        format!("{mismatches} mismatches over {checked} locked evaluations, max jump {worst_jump:.3e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_newton_stopping_rule() {
    let (runs, _) = sim_runs();
    let mut worst: f64 = 0.0;
    let (mut count, mut inside) = (0, 0);
    for run in runs {
        for c in &run.cycles {
            // Starting inside the goal gives t* = 0 and phi = J(x) without any
            // Newton step; the stopping rule does not apply there.
            if c.t_star == 0.0 && c.newton_iters == 0 {
                inside += 1;
                continue;
            }
            worst = worst.max(c.phi_at_convergence.abs());
            count += 1;
        }
    }
    // Standalone solves, each re-checked with an independent Hopf evaluation at t*.
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let system = planar();
    let config = MinTimeConfig::default();
    let mut worst_recheck: f64 = 0.0;
    for _ in 0..10 {
        let target = EllipsoidalTarget::ball(
            DVector::from_vec(vec![rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.0, 0.0]),
            1.0,
        )
        .unwrap();
        let x = DVector::from_vec(vec![
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]);
        let prev = random_plan(&mut rng, &system, 10.0);
        let res = min_time_to_reach(&x, &system, &target, 2.0, Some(prev.clone()), &config).unwrap();
        if !res.converged || res.inside_goal {
            continue;
        }
        worst = worst.max(res.final_phi.abs());
        count += 1;
        let problem = HopfProblem::new(system.clone(), target, x, res.t_star, 2.0, Some(prev)).unwrap();
        let phi = solve_hopf(&problem, &config.hopf).unwrap().value;
        worst_recheck = worst_recheck.max(phi.abs());
    }
    let pass = worst <= 1e-3 && worst_recheck <= 1e-3;
    report(
        6,
        pass,
        format!("{count} solves ({inside} started inside the goal), max reported |phi| = {worst:.3e}, max rechecked |phi| = {worst_recheck:.3e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let system = planar();
    let config = HopfConfig::default();
    let mut worst: f64 = 0.0;
    let mut points = 0;
    while points < 100 {
        let target = random_diag_target(&mut rng, 4, 10.0, (0.1, 4.0));
        let x = DVector::from_fn(4, |_, _| rng.random_range(-20.0..20.0));
        let t = rng.random_range(0.5..15.0);
        let (tau, prev) = if points % 2 == 0 {
            (0.0, None)
        } else {
            (2.0, Some(random_plan(&mut rng, &system, 10.0)))
        };
        let problem = HopfProblem::new(system.clone(), target, x, t, tau, prev).unwrap();
        let objective = HopfObjective::new(&problem, &config).unwrap();
        let norm = 10f64.powf(rng.random_range(-3.0..1.0));
        let dir = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let p = dir.normalize() * norm;
        if p.norm() <= 1e-6 {
            continue;
        }
        let (_, g) = objective.eval(&p);
        let fd = DVector::from_fn(4, |i, _| {
            let h = 1e-6 * p[i].abs().max(1e-2);
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus[i] += h;
            minus[i] -= h;
            (objective.eval(&plus).0 - objective.eval(&minus).0) / (2.0 * h)
        });
        worst = worst.max((&fd - &g).norm() / g.norm().max(1e-12));
        points += 1;
    }
    let pass = worst <= 1e-5;
    report(7, pass, format!("max relative error {worst:.3e} over {points} points"));
    assert!(pass);
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.random_range(-half..half), rng.random_range(-half..half)))
        .collect()
}

#[test]
fn criterion_8_channel_posterior() {
    let start = Instant::now();
    let params = ChannelParams::default();
    let prior = PriorRegion::default();
    let mut rng = ChaCha8Rng::seed_from_u64(808);

    // (a) one measurement: alpha = y / (k + s^2), mean = k y / (k + s^2),
    // variance = k - k^2 / (k + s^2).
    let q1 = Point::new(-12.0, 7.5);
    let y1 = -97.0;
    let post = fit(&MeasurementSet::new(vec![q1], vec![y1]).unwrap(), &params, &prior).unwrap();
    let q = Point::new(3.0, -4.0);
    let k11 = kernel(&params, &prior, &q1, &q1);
    let kq1 = kernel(&params, &prior, &q, &q1);
    let kqq = kernel(&params, &prior, &q, &q);
    let s2 = params.sigma_rho * params.sigma_rho;
    let mean_err = (post.mean(&q) - kq1 * y1 / (k11 + s2)).abs() / (kq1 * y1 / (k11 + s2)).abs();
    let var_err = (post.variance(&q) - (kqq - kq1 * kq1 / (k11 + s2))).abs() / kqq;
    let a = mean_err <= 1e-12 && var_err <= 1e-12;

    // (b) nearly noise-free data is interpolated.
    let quiet = ChannelParams {
        sigma_rho: 1e-3,
        ..params
    };
    let pts = random_points(&mut rng, 15, 40.0);
    let ys: Vec<f64> = pts.iter().map(|_| rng.random_range(-120.0..-60.0)).collect();
    let post = fit(&MeasurementSet::new(pts.clone(), ys.clone()).unwrap(), &quiet, &prior).unwrap();
    let interp = pts
        .iter()
        .zip(&ys)
        .map(|(q, y)| (post.mean(q) - y).abs())
        .fold(0.0f64, f64::max);
    let b = interp <= 1e-3;

    // (c) Gram matrices of 50 points are PSD up to rounding.
    let mut min_ratio = f64::INFINITY;
    for _ in 0..3 {
        let pts = random_points(&mut rng, 50, 50.0);
        let ys = vec![-100.0; 50];
        let post = fit(&MeasurementSet::new(pts, ys).unwrap(), &params, &prior).unwrap();
        let gram = post.gram().clone();
        let trace = gram.trace();
        min_ratio = min_ratio.min(gram.symmetric_eigen().eigenvalues.min() / trace);
    }
    let c = min_ratio >= -1e-8;

    // (d) k_gamma against Monte Carlo over the uniform transmitter prior.
    let gamma = |q: &Point, bx: f64, by: f64| {
        let d = (q.x - bx).hypot(q.y - by).max(1e-3);
        params.c_pl - 10.0 * params.n_pl * d.log10()
    };
    let mut worst_z: f64 = 0.0;
    for _ in 0..10 {
        let qi = Point::new(rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0));
        let qj = Point::new(rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0));
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let (bx, by) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let v = gamma(&qi, bx, by) * gamma(&qj, bx, by);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / (n as f64 - 1.0)).sqrt();
        worst_z = worst_z.max((k_gamma(&params, &prior, &qi, &qj) - mean).abs() / se);
    }
    let d = worst_z <= 3.0;

    let elapsed = start.elapsed();
    let pass = a && b && c && d && elapsed < Duration::from_secs(300);
    report(
        8,
        pass,
        format!(
            "(a) mean {mean_err:.1e} var {var_err:.1e}; (b) {interp:.2e}; (c) min eig/trace {min_ratio:.2e}; \
             (d) max |z| {worst_z:.2}; {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_9_closed_loop_scenario() {
    let (runs, elapsed) = sim_runs();
    let cfg = SimConfig::default();
    let q_b = cfg.q_b_true;
    let a = runs
        .iter()
        .all(|r| r.terminated == Termination::GoalReached && r.cycles.len() <= 20);
    let first = median(runs.iter().map(|r| (r.cycles[0].peak_estimate - q_b).norm()).collect());
    let last = median(
        runs.iter()
            .map(|r| (r.cycles.last().unwrap().peak_estimate - q_b).norm())
            .collect(),
    );
    let dist = median(
        runs.iter()
            .map(|r| (Point::new(r.final_state[0], r.final_state[1]) - q_b).norm())
            .collect(),
    );
    for (seed, r) in runs.iter().enumerate() {
        let peak = r.cycles.last().unwrap().peak_estimate;
        println!(
            "  seed {seed}: {:?} after {} cycles, final peak ({:.0}, {:.0})",
            r.terminated,
            r.cycles.len(),
            peak.x,
            peak.y
        );
    }
    let (b, c) = (last < first, dist < 10.0);
    let pass = a && b && c && *elapsed < Duration::from_secs(600);
    report(
        9,
        pass,
        format!(
            "(a) {}; (b) median peak error {last:.1} m vs cycle-0 {first:.1} m; (c) median final distance {dist:.1} m; {elapsed:.2?}",
            if a { "all reached the goal" } else { "some runs did not reach the goal" }
        ),
    );
    assert!(pass);
}
