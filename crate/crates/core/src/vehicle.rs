//! Kinematic bicycle model with a first-order steering actuator.
//!
//! The state carries the *actual* steering angle `delta_a`; the control input
//! carries the *commanded* angle. The steering state follows
//! `d(delta_a)/dt = K_delta * (delta_cmd - delta_a)` and is discretized
//! exactly, so the model is valid for any step length.

use nalgebra::{DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub const STATE_DIM: usize = 5;
pub const INPUT_DIM: usize = 2;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type InputVector = SVector<f64, INPUT_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputMatrix = SMatrix<f64, STATE_DIM, INPUT_DIM>;

/// Below this value of `|kappa * l|` the arc update falls back to its series
/// expansion.
pub const ARC_SERIES_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VehicleError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("step response is defined from the first step (i >= 1)")]
    ZeroIndex,
    #[error("rollout schedule is empty")]
    EmptySchedule,
    #[error("no dynamics observed")]
    NoDynamics,
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("times and responses differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(&'static str),
    #[error("trace line {line}: {msg}")]
    Trace { line: u64, msg: String },
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub p_x: f64,
    pub p_y: f64,
    pub theta: f64,
    pub v: f64,
    pub delta_a: f64,
}

impl VehicleState {
    pub fn new(p_x: f64, p_y: f64, theta: f64, v: f64, delta_a: f64) -> Self {
        Self {
            p_x,
            p_y,
            theta,
            v,
            delta_a,
        }
    }

    pub fn to_vector(&self) -> StateVector {
        StateVector::new(self.p_x, self.p_y, self.theta, self.v, self.delta_a)
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self::new(x[0], x[1], x[2], x[3], x[4])
    }

    pub fn to_vector_d(&self) -> DVector<f64> {
        DVector::from_column_slice(self.to_vector().as_slice())
    }

    /// Panics if `v` has fewer than five entries.
    pub fn from_vector_d(v: &DVector<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    /// `self - other` with the heading difference wrapped into `(-pi, pi]`.
    pub fn difference(&self, other: &VehicleState) -> StateVector {
        let mut d = self.to_vector() - other.to_vector();
        d[2] = normalize_angle(d[2]);
        d
    }

    /// `self + dx`, heading re-normalized.
    pub fn offset(&self, dx: &StateVector) -> VehicleState {
        let mut s = VehicleState::from_vector(&(self.to_vector() + dx));
        s.theta = normalize_angle(s.theta);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub accel: f64,
    pub delta_cmd: f64,
}

impl ControlInput {
    pub fn new(accel: f64, delta_cmd: f64) -> Self {
        Self { accel, delta_cmd }
    }

    pub fn to_vector(&self) -> InputVector {
        InputVector::new(self.accel, self.delta_cmd)
    }

    pub fn from_vector(u: &InputVector) -> Self {
        Self::new(u[0], u[1])
    }

    pub fn to_vector_d(&self) -> DVector<f64> {
        DVector::from_column_slice(self.to_vector().as_slice())
    }

    pub fn from_vector_d(v: &DVector<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn is_finite(&self) -> bool {
        self.accel.is_finite() && self.delta_cmd.is_finite()
    }

    pub fn within_bounds(&self, params: &VehicleParams) -> bool {
        self.accel >= params.a_min
            && self.accel <= params.a_max
            && self.delta_cmd.abs() <= params.delta_max
    }

    /// Saturates both channels to the admissible box. Returns the clipped
    /// input and whether any clipping happened.
    pub fn saturate(&self, params: &VehicleParams) -> (ControlInput, bool) {
        let accel = self.accel.clamp(params.a_min, params.a_max);
        let delta_cmd = self.delta_cmd.clamp(-params.delta_max, params.delta_max);
        let clipped = accel != self.accel || delta_cmd != self.delta_cmd;
        (ControlInput { accel, delta_cmd }, clipped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// Wheelbase [m].
    pub wheelbase: f64,
    /// Steering-ratio correction applied to the curvature.
    #[serde(default = "default_steer_ratio")]
    pub steer_ratio: f64,
    /// Inverse time constant of the steering actuator [1/s].
    pub k_delta: f64,
    pub delta_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

fn default_steer_ratio() -> f64 {
    1.0
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            steer_ratio: 1.0,
            k_delta: 30.0,
            delta_max: 0.5,
            a_min: -8.0,
            a_max: 3.0,
            v_min: 1.0,
            v_max: 40.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let all = [
            self.wheelbase,
            self.steer_ratio,
            self.k_delta,
            self.delta_max,
            self.a_min,
            self.a_max,
            self.v_min,
            self.v_max,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(VehicleError::NonFinite("vehicle parameters"));
        }
        if self.wheelbase <= 0.0 {
            return Err(VehicleError::InvalidParams("wheelbase must be positive"));
        }
        if self.k_delta <= 0.0 {
            return Err(VehicleError::InvalidParams("k_delta must be positive"));
        }
        if self.delta_max <= 0.0 {
            return Err(VehicleError::InvalidParams("delta_max must be positive"));
        }
        if self.v_min >= self.v_max {
            return Err(VehicleError::InvalidParams("v_min must be below v_max"));
        }
        if self.a_min >= self.a_max {
            return Err(VehicleError::InvalidParams("a_min must be below a_max"));
        }
        Ok(())
    }

    pub fn curvature(&self, delta_a: f64) -> f64 {
        delta_a.tan() * self.steer_ratio / self.wheelbase
    }

    fn dcurvature(&self, delta_a: f64) -> f64 {
        let c = delta_a.cos();
        self.steer_ratio / (self.wheelbase * c * c)
    }
}

// sin(h)/h and its derivative, stable near zero.
fn sinc(h: f64) -> f64 {
    if h.abs() < ARC_SERIES_THRESHOLD {
        1.0 - h * h / 6.0
    } else {
        h.sin() / h
    }
}

fn dsinc(h: f64) -> f64 {
    if h.abs() < 1e-3 {
        -h / 3.0 + h * h * h / 30.0
    } else {
        (h * h.cos() - h.sin()) / (h * h)
    }
}

fn check_step_args(state: &VehicleState, input: &ControlInput, dt: f64) -> Result<(), VehicleError> {
    if !state.is_finite() {
        return Err(VehicleError::NonFinite("state"));
    }
    if !input.is_finite() {
        return Err(VehicleError::NonFinite("input"));
    }
    if !dt.is_finite() {
        return Err(VehicleError::NonFinite("dt"));
    }
    if dt <= 0.0 {
        return Err(VehicleError::NonPositiveDuration(dt));
    }
    Ok(())
}

/// Advances the model by `dt` under a constant input.
///
/// Position follows the exact circular arc of curvature
/// `kappa = tan(delta_a) * C_r / L` over travel distance
/// `l = v*dt + a*dt^2/2`. The arc is written as
/// `l * cos(theta + kappa*l/2) * sinc(kappa*l/2)`, which equals
/// `(sin(theta + kappa*l) - sin(theta)) / kappa` and stays well conditioned as
/// `kappa -> 0`.
pub fn step(
    state: &VehicleState,
    input: &ControlInput,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState, VehicleError> {
    check_step_args(state, input, dt)?;
    Ok(step_unchecked(state, input, dt, params))
}

pub(crate) fn step_unchecked(
    state: &VehicleState,
    input: &ControlInput,
    dt: f64,
    params: &VehicleParams,
) -> VehicleState {
    let l = state.v * dt + 0.5 * input.accel * dt * dt;
    let kappa = params.curvature(state.delta_a);
    let turn = kappa * l;
    let half = 0.5 * turn;
    let (dx, dy) = if turn.abs() < ARC_SERIES_THRESHOLD {
        // second-order expansion of the arc
        let (s, c) = state.theta.sin_cos();
        (l * c - 0.5 * kappa * l * l * s, l * s + 0.5 * kappa * l * l * c)
    } else {
        let sc = sinc(half);
        let (s, c) = (state.theta + half).sin_cos();
        (l * c * sc, l * s * sc)
    };
    let decay = (-params.k_delta * dt).exp();
    VehicleState {
        p_x: state.p_x + dx,
        p_y: state.p_y + dy,
        theta: normalize_angle(state.theta + turn),
        v: state.v + input.accel * dt,
        delta_a: input.delta_cmd - (input.delta_cmd - state.delta_a) * decay,
    }
}

/// Jacobians of [`step`] with respect to state and input.
pub fn linearize(
    state: &VehicleState,
    input: &ControlInput,
    dt: f64,
    params: &VehicleParams,
) -> Result<(StateMatrix, InputMatrix), VehicleError> {
    check_step_args(state, input, dt)?;
    let l = state.v * dt + 0.5 * input.accel * dt * dt;
    let dl_dv = dt;
    let dl_da = 0.5 * dt * dt;
    let kappa = params.curvature(state.delta_a);
    let dkappa = params.dcurvature(state.delta_a);
    let h = 0.5 * kappa * l;
    let phi = state.theta + h;
    let (sp, cp) = phi.sin_cos();
    let sc = sinc(h);
    let dsc = dsinc(h);

    // dx = l cos(phi) S(h), dy = l sin(phi) S(h), phi = theta + h, h = kappa l / 2
    let dx_dtheta = -l * sp * sc;
    let dy_dtheta = l * cp * sc;
    let dx_dl = cp * sc - l * sp * sc * 0.5 * kappa + l * cp * dsc * 0.5 * kappa;
    let dy_dl = sp * sc + l * cp * sc * 0.5 * kappa + l * sp * dsc * 0.5 * kappa;
    let dx_dkappa = -l * sp * sc * 0.5 * l + l * cp * dsc * 0.5 * l;
    let dy_dkappa = l * cp * sc * 0.5 * l + l * sp * dsc * 0.5 * l;

    let decay = (-params.k_delta * dt).exp();

    let mut a = StateMatrix::identity();
    a[(0, 2)] = dx_dtheta;
    a[(0, 3)] = dx_dl * dl_dv;
    a[(0, 4)] = dx_dkappa * dkappa;
    a[(1, 2)] = dy_dtheta;
    a[(1, 3)] = dy_dl * dl_dv;
    a[(1, 4)] = dy_dkappa * dkappa;
    a[(2, 3)] = kappa * dl_dv;
    a[(2, 4)] = l * dkappa;
    a[(4, 4)] = decay;

    let mut b = InputMatrix::zeros();
    b[(0, 0)] = dx_dl * dl_da;
    b[(1, 0)] = dy_dl * dl_da;
    b[(2, 0)] = kappa * dl_da;
    b[(3, 0)] = dt;
    b[(4, 1)] = 1.0 - decay;
    Ok((a, b))
}

/// Unit step response of the steering actuator after `i` periods of length
/// `dt`: `1 - exp(-K * i * dt)`.
pub fn step_response(i: usize, dt: f64, k_delta: f64) -> Result<f64, VehicleError> {
    if i == 0 {
        return Err(VehicleError::ZeroIndex);
    }
    if !(dt.is_finite() && k_delta.is_finite()) {
        return Err(VehicleError::NonFinite("step response arguments"));
    }
    if dt <= 0.0 {
        return Err(VehicleError::NonPositiveDuration(dt));
    }
    Ok(1.0 - (-k_delta * i as f64 * dt).exp())
}

fn step_response_sse(k: f64, times: &[f64], responses: &[f64]) -> f64 {
    times
        .iter()
        .zip(responses)
        .map(|(&t, &r)| {
            let e = r - (1.0 - (-k * t).exp());
            e * e
        })
        .sum()
}

/// Least-squares fit of `1 - exp(-K t)` to a recorded unit-step response.
///
/// The search brackets the minimum on a logarithmic grid over
/// `(0, K_hi]` and refines it by golden-section search. `K_hi` is set so that
/// the model is saturated at the earliest positive sample time.
pub fn fit_time_constant(times: &[f64], responses: &[f64]) -> Result<f64, VehicleError> {
    if times.len() != responses.len() {
        return Err(VehicleError::LengthMismatch(times.len(), responses.len()));
    }
    if times.len() < 2 {
        return Err(VehicleError::InsufficientSamples {
            need: 2,
            got: times.len(),
        });
    }
    if times.iter().chain(responses).any(|v| !v.is_finite()) {
        return Err(VehicleError::NonFinite("step response samples"));
    }
    let first = responses[0];
    if responses.iter().all(|&r| (r - first).abs() < 1e-12) {
        return Err(VehicleError::NoDynamics);
    }
    let t_min = times
        .iter()
        .copied()
        .filter(|&t| t > 0.0)
        .fold(f64::INFINITY, f64::min);
    let t_max = times.iter().copied().fold(0.0, f64::max);
    if !t_min.is_finite() {
        return Err(VehicleError::NoDynamics);
    }
    let k_hi = 50.0 / t_min;
    let k_lo = 1e-3 / t_max;

    const GRID: usize = 400;
    let ratio = (k_hi / k_lo).ln();
    let grid_k = |i: usize| k_lo * (ratio * i as f64 / (GRID - 1) as f64).exp();
    let best = (0..GRID)
        .map(|i| (i, step_response_sse(grid_k(i), times, responses)))
        .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc })
        .0;
    let mut lo = grid_k(best.saturating_sub(1));
    let mut hi = grid_k((best + 1).min(GRID - 1));

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = step_response_sse(c, times, responses);
    let mut fd = step_response_sse(d, times, responses);
    for _ in 0..200 {
        if (hi - lo) <= 1e-12 * hi.max(1.0) {
            break;
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = step_response_sse(c, times, responses);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = step_response_sse(d, times, responses);
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A recorded steering step: rows of `t`, `delta_cmd`, `delta_a` with a
/// header. Extra columns are ignored, so a simulation log works as long as
/// the command is held constant over the rows given.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t: Vec<f64>,
    pub delta_cmd: Vec<f64>,
    pub delta_a: Vec<f64>,
}

#[derive(Deserialize)]
struct StepRow {
    t: f64,
    delta_cmd: f64,
    delta_a: f64,
}

impl StepTrace {
    pub fn read(reader: impl std::io::Read) -> Result<Self, VehicleError> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut out = StepTrace {
            t: Vec::new(),
            delta_cmd: Vec::new(),
            delta_a: Vec::new(),
        };
        for row in rd.deserialize::<StepRow>() {
            let row = row.map_err(|e| VehicleError::Trace {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            out.t.push(row.t);
            out.delta_cmd.push(row.delta_cmd);
            out.delta_a.push(row.delta_a);
        }
        Ok(out)
    }

    /// Times from the first row and the response scaled so the step goes
    /// from 0 to 1.
    pub fn normalized(&self) -> Result<(Vec<f64>, Vec<f64>), VehicleError> {
        let (Some(&t0), Some(&a0), Some(&cmd)) = (self.t.first(), self.delta_a.first(), self.delta_cmd.first()) else {
            return Err(VehicleError::InsufficientSamples { need: 2, got: 0 });
        };
        if let Some(i) = self.delta_cmd.iter().position(|c| (c - cmd).abs() > 1e-12) {
            return Err(VehicleError::Trace {
                line: i as u64 + 2,
                msg: "command changes during the step".into(),
            });
        }
        let size = cmd - a0;
        if size.abs() < 1e-12 {
            return Err(VehicleError::NoDynamics);
        }
        let times = self.t.iter().map(|t| t - t0).collect();
        let resp = self.delta_a.iter().map(|a| (a - a0) / size).collect();
        Ok((times, resp))
    }

    /// Least-squares actuator constant and the RMS of the fit residual.
    pub fn fit(&self) -> Result<(f64, f64), VehicleError> {
        let (t, r) = self.normalized()?;
        let k = fit_time_constant(&t, &r)?;
        let rms = (step_response_sse(k, &t, &r) / t.len() as f64).sqrt();
        Ok((k, rms))
    }
}

/// Integrates a piecewise-constant input schedule, splitting each segment
/// into equal substeps no longer than `max_substep`.
pub fn rollout(
    state: &VehicleState,
    schedule: &[(ControlInput, f64)],
    max_substep: f64,
    params: &VehicleParams,
) -> Result<VehicleState, VehicleError> {
    if schedule.is_empty() {
        return Err(VehicleError::EmptySchedule);
    }
    if !state.is_finite() {
        return Err(VehicleError::NonFinite("state"));
    }
    if !(max_substep.is_finite() && max_substep > 0.0) {
        return Err(VehicleError::NonPositiveDuration(max_substep));
    }
    for (u, d) in schedule {
        if !u.is_finite() || !d.is_finite() {
            return Err(VehicleError::NonFinite("schedule"));
        }
        if *d <= 0.0 {
            return Err(VehicleError::NonPositiveDuration(*d));
        }
    }
    let mut s = *state;
    for (u, d) in schedule {
        let n = substep_count(*d, max_substep);
        let h = d / n as f64;
        for _ in 0..n {
            s = step_unchecked(&s, u, h, params);
        }
    }
    Ok(s)
}

pub(crate) fn substep_count(duration: f64, max_substep: f64) -> usize {
    ((duration / max_substep) - 1e-9).ceil().max(1.0) as usize
}
