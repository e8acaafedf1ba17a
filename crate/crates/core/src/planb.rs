//! Delay and actuator compensation wrapped around an opaque tracking
//! controller.
//!
//! The wrapped controller is rolled out on a lag-free copy of the vehicle
//! starting from the delay-shifted state. Its steering sequence is then
//! pre-distorted so that the first-order actuator reproduces it as closely as
//! possible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::Path;
use crate::qp::{self, QpError, QpStatus, QuadraticProgram};
use crate::vehicle::{self, normalize_angle, ControlInput, VehicleError, VehicleParams, VehicleState};

#[derive(Debug, Error)]
pub enum PlanBError {
    #[error("controller returned non-finite output {input:?} at rollout step {step} from state {state:?}")]
    NonFiniteCommand {
        step: usize,
        state: VehicleState,
        input: ControlInput,
    },
    #[error("expected {expected} commands, got {got}")]
    Length { expected: usize, got: usize },
    #[error("starting steering angle {0} outside actuator range")]
    StartOutOfRange(f64),
    #[error("invalid compensation config: {0}")]
    InvalidConfig(String),
    #[error("compensation QP ended with status {0:?}")]
    Solver(QpStatus),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
}

/// Any deterministic tracking policy mapping the current state and a reference
/// path to a command.
pub trait BlackBoxController {
    fn command(&self, state: &VehicleState, reference: &Path) -> ControlInput;
}

impl<F> BlackBoxController for F
where
    F: Fn(&VehicleState, &Path) -> ControlInput,
{
    fn command(&self, state: &VehicleState, reference: &Path) -> ControlInput {
        self(state, reference)
    }
}

/// Pure pursuit with a fixed lookahead distance and a proportional speed loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurePursuit {
    pub lookahead: f64,
    pub target_speed: f64,
    pub speed_gain: f64,
    pub params: VehicleParams,
}

impl PurePursuit {
    pub fn new(lookahead: f64, target_speed: f64, params: VehicleParams) -> Self {
        Self {
            lookahead,
            target_speed,
            speed_gain: 1.0,
            params,
        }
    }

    /// Steering angle that puts the vehicle on the circle through `target`.
    pub fn steering_towards(&self, state: &VehicleState, target: [f64; 2]) -> f64 {
        let dx = target[0] - state.p_x;
        let dy = target[1] - state.p_y;
        let ld = dx.hypot(dy);
        if ld < 1e-9 {
            return 0.0;
        }
        let alpha = normalize_angle(dy.atan2(dx) - state.theta);
        let kappa = 2.0 * alpha.sin() / ld;
        (kappa * self.params.wheelbase / self.params.steer_ratio).atan()
    }
}

impl BlackBoxController for PurePursuit {
    fn command(&self, state: &VehicleState, reference: &Path) -> ControlInput {
        let proj = reference.project([state.p_x, state.p_y]);
        let target = reference.point_at(proj.s + self.lookahead);
        let delta = self.steering_towards(state, target);
        let accel = self.speed_gain * (self.target_speed - state.v);
        ControlInput::new(accel, delta).saturate(&self.params).0
    }
}

/// Closed-loop rollout of `ctrl` on the lag-free model: before every step the
/// steering state is set to the commanded angle.
pub fn rollout_blackbox(
    ctrl: &dyn BlackBoxController,
    x_shifted: &VehicleState,
    reference: &Path,
    steps: usize,
    dt: f64,
    params: &VehicleParams,
) -> Result<Vec<ControlInput>, PlanBError> {
    let mut x = *x_shifted;
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let u = ctrl.command(&x, reference);
        if !u.is_finite() {
            return Err(PlanBError::NonFiniteCommand { step, state: x, input: u });
        }
        x.delta_a = u.delta_cmd;
        x = vehicle::step(&x, &u, dt, params)?;
        out.push(u);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationConfig {
    pub horizon: usize,
    pub q_ac: DMatrix<f64>,
    pub r_ac: DMatrix<f64>,
    pub dt: f64,
    pub k_delta: f64,
    pub delta_max: f64,
    /// Enforce the steering range inside the QP instead of clipping the
    /// solution afterwards.
    pub box_constraints: bool,
}

impl CompensationConfig {
    /// Identity tracking weight and a small effort weight.
    pub fn new(horizon: usize, dt: f64, params: &VehicleParams) -> Self {
        Self {
            horizon,
            q_ac: DMatrix::identity(horizon, horizon),
            r_ac: DMatrix::identity(horizon, horizon) * 1e-4,
            dt,
            k_delta: params.k_delta,
            delta_max: params.delta_max,
            box_constraints: false,
        }
    }

    pub fn with_weights(mut self, q_ac: DMatrix<f64>, r_ac: DMatrix<f64>) -> Self {
        self.q_ac = q_ac;
        self.r_ac = r_ac;
        self
    }

    pub fn validate(&self) -> Result<(), PlanBError> {
        let n = self.horizon;
        if n == 0 {
            return Err(PlanBError::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(PlanBError::InvalidConfig(format!("dt = {}", self.dt)));
        }
        if !(self.k_delta.is_finite() && self.k_delta > 0.0) {
            return Err(PlanBError::InvalidConfig(format!("k_delta = {}", self.k_delta)));
        }
        if !(self.delta_max.is_finite() && self.delta_max > 0.0) {
            return Err(PlanBError::InvalidConfig(format!("delta_max = {}", self.delta_max)));
        }
        for (name, m) in [("q_ac", &self.q_ac), ("r_ac", &self.r_ac)] {
            if m.shape() != (n, n) {
                return Err(PlanBError::InvalidConfig(format!("{name} must be {n}x{n}")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(PlanBError::InvalidConfig(format!("{name} has non-finite entries")));
            }
            let sym = (m + m.transpose()) * 0.5;
            if (m - &sym).amax() > 1e-9 * (1.0 + m.amax()) {
                return Err(PlanBError::InvalidConfig(format!("{name} is not symmetric")));
            }
            let min_eig = sym.symmetric_eigenvalues().min();
            if min_eig < -1e-9 * (1.0 + m.amax()) {
                return Err(PlanBError::InvalidConfig(format!("{name} is not positive semidefinite")));
            }
        }
        Ok(())
    }

    fn responses(&self) -> Result<Vec<f64>, PlanBError> {
        (1..=self.horizon)
            .map(|i| vehicle::step_response(i, self.dt, self.k_delta).map_err(PlanBError::from))
            .collect()
    }

    /// Linear map of the superposition model: outputs = `m * U + c * u_start`.
    fn superposition(&self) -> Result<(DMatrix<f64>, DVector<f64>), PlanBError> {
        let n = self.horizon;
        let r = self.responses()?;
        let resp = |j: usize| if j == 0 { 0.0 } else { r[j - 1] };
        let mut m = DMatrix::zeros(n, n);
        let mut c = DVector::zeros(n);
        for k in 1..=n {
            for i in 1..=k {
                m[(k - 1, i - 1)] = resp(k - i + 1) - resp(k - i);
            }
            c[k - 1] = 1.0 - resp(k);
        }
        Ok((m, c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compensation {
    pub commands: Vec<f64>,
    /// True when at least one command had to be clipped to the steering range.
    pub clipped: bool,
}

/// Steering sequence whose predicted actuator output best tracks `u_hat`.
pub fn compensate(u_hat: &[f64], u_start: f64, cfg: &CompensationConfig) -> Result<Compensation, PlanBError> {
    cfg.validate()?;
    let n = cfg.horizon;
    if u_hat.len() != n {
        return Err(PlanBError::Length { expected: n, got: u_hat.len() });
    }
    if !u_start.is_finite() || u_start.abs() > cfg.delta_max + 1e-12 {
        return Err(PlanBError::StartOutOfRange(u_start));
    }
    let (m, c) = cfg.superposition()?;
    let target = DVector::from_column_slice(u_hat) - c * u_start;
    let mtq = m.transpose() * &cfg.q_ac;
    let p = (&mtq * &m + &cfg.r_ac) * 2.0;
    let q = -(mtq * target) * 2.0;
    let mut problem = QuadraticProgram::new(p, q)?;
    if cfg.box_constraints {
        let hi = DVector::from_element(n, cfg.delta_max);
        problem = problem.with_bounds(&(-&hi), &hi)?;
    }
    let sol = qp::solve(&problem, 1e-10, 20_000);
    if !sol.is_optimal() {
        return Err(PlanBError::Solver(sol.status));
    }
    let mut clipped = false;
    let commands = sol
        .x
        .iter()
        .map(|&u| {
            let v = u.clamp(-cfg.delta_max, cfg.delta_max);
            if (v - u).abs() > 1e-9 {
                clipped = true;
            }
            v
        })
        .collect();
    if clipped {
        log::warn!("compensated steering clipped to +/-{} rad", cfg.delta_max);
    }
    Ok(Compensation { commands, clipped })
}

/// Actuator angle at the end of each period under the piecewise-constant
/// commands `u`, starting at rest at `u_start`.
pub fn predicted_actuator_output(u: &[f64], u_start: f64, cfg: &CompensationConfig) -> Result<Vec<f64>, PlanBError> {
    let r: Vec<f64> = (1..=u.len())
        .map(|i| vehicle::step_response(i, cfg.dt, cfg.k_delta))
        .collect::<Result<_, _>>()?;
    Ok((1..=u.len())
        .map(|k| {
            let mut y = u_start;
            let mut prev = u_start;
            for i in 1..=k {
                y += (u[i - 1] - prev) * r[k - i];
                prev = u[i - 1];
            }
            y
        })
        .collect())
}

/// Objective of the compensation problem for a candidate sequence.
pub fn compensation_cost(u: &[f64], u_hat: &[f64], u_start: f64, cfg: &CompensationConfig) -> Result<f64, PlanBError> {
    let y = DVector::from_vec(predicted_actuator_output(u, u_start, cfg)?);
    let e = DVector::from_column_slice(u_hat) - y;
    let uv = DVector::from_column_slice(u);
    Ok((e.transpose() * &cfg.q_ac * &e)[0] + (uv.transpose() * &cfg.r_ac * &uv)[0])
}
