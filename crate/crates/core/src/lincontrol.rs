//! Linear-system primitives: the `(A, B)` pair with its control set, the
//! matrix exponential, and fixed-step propagation under a control law.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Admissible control set. Only the Euclidean ball is shipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "norm_kind", rename_all = "snake_case")]
pub enum ControlSet {
    Euclidean { radius: f64 },
}

impl ControlSet {
    pub fn unit_ball() -> Self {
        ControlSet::Euclidean { radius: 1.0 }
    }

    pub fn radius(&self) -> f64 {
        match *self {
            ControlSet::Euclidean { radius } => radius,
        }
    }

    /// Support function of the set, `sup_{a in set} <a, v>`.
    ///
    /// For the Euclidean ball this is the dual (again Euclidean) norm scaled
    /// by the radius.
    pub fn dual_norm(&self, v: &DVector<f64>) -> f64 {
        match *self {
            ControlSet::Euclidean { radius } => radius * v.norm(),
        }
    }

    /// A maximizer of `<a, v>` over the set, or zero when `v` is (numerically)
    /// zero and the maximizer is not unique.
    pub fn maximizer(&self, v: &DVector<f64>, zero_threshold: f64) -> DVector<f64> {
        match *self {
            ControlSet::Euclidean { radius } => {
                let n = v.norm();
                if n < zero_threshold {
                    DVector::zeros(v.len())
                } else {
                    v * (radius / n)
                }
            }
        }
    }
}

/// Linear dynamics `x' = A x + B a` with `a` constrained to a control set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    control_set: ControlSet,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, control_set: ControlSet) -> Result<Self> {
        if !a.is_square() {
            return Err(invalid(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(invalid(format!(
                "B has {} rows but A is {}x{}",
                b.nrows(),
                a.nrows(),
                a.ncols()
            )));
        }
        if b.ncols() == 0 || a.nrows() == 0 {
            return Err(invalid("state and control dimensions must be positive"));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("A and B must be finite"));
        }
        let radius = control_set.radius();
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid(format!("control set radius must be positive, got {radius}")));
        }
        Ok(Self { a, b, control_set })
    }

    /// Planar double integrator: state `(qx, qy, vx, vy)`, control is acceleration
    /// in the unit Euclidean ball.
    pub fn planar_double_integrator() -> Self {
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        Self::new(a, b, ControlSet::unit_ball()).expect("valid system")
    }

    /// Scalar double integrator: state `(position, velocity)`, `|u| <= 1`.
    pub fn double_integrator_1d() -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        Self::new(a, b, ControlSet::unit_ball()).expect("valid system")
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn control_set(&self) -> &ControlSet {
        &self.control_set
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Largest 1-norm for which the degree-13 Padé approximant is accurate to unit roundoff.
const THETA_13: f64 = 5.371920351148152;

/// `exp(s * M)` by scaling and squaring with a `[13/13]` Padé approximant.
pub fn mat_exp(m: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(invalid(format!("mat_exp needs a square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    if !s.is_finite() || m.iter().any(|v| !v.is_finite()) {
        return Err(invalid("mat_exp input must be finite"));
    }
    let n = m.nrows();
    let x = m * s;
    let norm = one_norm(&x);
    if norm == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let squarings = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let x = x * 2f64.powi(-squarings);

    let ident = DMatrix::<f64>::identity(n, n);
    let x2 = &x * &x;
    let x4 = &x2 * &x2;
    let x6 = &x4 * &x2;
    let b = &PADE13;
    let u_inner = &x6 * (&x6 * b[13] + &x4 * b[11] + &x2 * b[9])
        + &x6 * b[7]
        + &x4 * b[5]
        + &x2 * b[3]
        + &ident * b[1];
    let u = &x * u_inner;
    let v = &x6 * (&x6 * b[12] + &x4 * b[10] + &x2 * b[8])
        + &x6 * b[6]
        + &x4 * b[4]
        + &x2 * b[2]
        + &ident * b[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| invalid("Padé denominator is singular"))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// A control law `s -> a(s)` that may be discontinuous at known times.
pub trait ControlLaw {
    fn control(&self, s: f64) -> Result<DVector<f64>>;

    /// Times in `(0, inf)` where the law may jump. The integrator never steps
    /// across one of these.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl<F> ControlLaw for F
where
    F: Fn(f64) -> DVector<f64>,
{
    fn control(&self, s: f64) -> Result<DVector<f64>> {
        Ok(self(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Control applied at each time (the right-continuous value at breakpoints).
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one sample")
    }

    /// Keep samples `0..=index`.
    pub fn truncate_at(&mut self, index: usize) {
        self.times.truncate(index + 1);
        self.states.truncate(index + 1);
        self.controls.truncate(index + 1);
    }
}

/// Sample times on `[0, horizon]`: multiples of `dt`, the horizon itself, and
/// every breakpoint inside the interval. Grid points within `1e-9` of a
/// breakpoint are snapped onto it.
pub fn time_grid(horizon: f64, dt: f64, breakpoints: &[f64]) -> Vec<f64> {
    const SNAP: f64 = 1e-9;
    let mut grid = vec![0.0];
    let mut i = 1usize;
    loop {
        let t = i as f64 * dt;
        if t >= horizon - SNAP {
            break;
        }
        grid.push(t);
        i += 1;
    }
    if horizon > 0.0 {
        grid.push(horizon);
    }
    for &bp in breakpoints {
        if !(bp > 0.0 && bp < horizon) {
            continue;
        }
        let pos = grid.partition_point(|&t| t < bp);
        let near_left = pos > 0 && (bp - grid[pos - 1]).abs() <= SNAP;
        let near_right = pos < grid.len() && (grid[pos] - bp).abs() <= SNAP;
        if near_right {
            if pos != grid.len() - 1 && pos != 0 {
                grid[pos] = bp;
            }
        } else if near_left {
            if pos - 1 != 0 {
                grid[pos - 1] = bp;
            }
        } else {
            grid.insert(pos, bp);
        }
    }
    grid
}

/// Integrate `x' = A x + B a(s)` from `x0` over `[0, horizon]` with classical
/// fourth-order Runge–Kutta.
pub fn propagate(
    system: &LinearSystem,
    x0: &DVector<f64>,
    control: &dyn ControlLaw,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory> {
    if x0.len() != system.state_dim() {
        return Err(invalid(format!(
            "initial state has dimension {}, system has {}",
            x0.len(),
            system.state_dim()
        )));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(invalid(format!("horizon must be finite and >= 0, got {horizon}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("dt must be positive, got {dt}")));
    }
    let breakpoints = control.breakpoints();
    let times = time_grid(horizon, dt, &breakpoints);
    let is_breakpoint = |t: f64| breakpoints.iter().any(|&b| b == t);

    let eval = |s: f64| -> Result<DVector<f64>> {
        let u = control.control(s)?;
        if u.len() != system.control_dim() {
            return Err(invalid(format!(
                "control has dimension {}, system expects {}",
                u.len(),
                system.control_dim()
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Propagation { s });
        }
        Ok(u)
    };

    let mut states = Vec::with_capacity(times.len());
    let mut controls = Vec::with_capacity(times.len());
    let mut x = x0.clone();
    let mut u = eval(0.0)?;
    states.push(x.clone());
    controls.push(u.clone());

    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let h = t1 - t0;
        let mid = eval(t0 + 0.5 * h)?;
        // Left limit at a breakpoint so the step sees only one control branch.
        let end = if is_breakpoint(t1) {
            eval(t1.next_down())?
        } else {
            eval(t1)?
        };
        let k1 = system.derivative(&x, &u);
        let k2 = system.derivative(&(&x + &k1 * (0.5 * h)), &mid);
        let k3 = system.derivative(&(&x + &k2 * (0.5 * h)), &mid);
        let k4 = system.derivative(&(&x + &k3 * h), &end);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        u = eval(t1)?;
        states.push(x.clone());
        controls.push(u.clone());
    }

    Ok(Trajectory {
        times,
        states,
        controls,
    })
}
