//! Robust tube MPC with a delay-shifted initial state.
//!
//! The nominal problem is linearized along the reference and condensed onto
//! the free initial nominal state and the nominal controls. The true state is
//! kept near the nominal trajectory by `u = ubar + K (x - xbar)`.

use crate::polytope::{pontryagin_diff, power_sum, HPolytope, LinearImage, PolytopeError, SupportFunction, Zonotope};
use crate::qp::{self, QpError, QpSettings, QpStatus, QuadraticProgram, WarmStart};
use crate::vehicle::{self, normalize_angle, ControlInput, VehicleError, VehicleParams, VehicleState};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RICCATI_TOL: f64 = 1e-9;
pub const RICCATI_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfeasibleGroup {
    InitialMembership,
    StateConstraint,
    ControlConstraint,
}

impl std::fmt::Display for InfeasibleGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InfeasibleGroup::InitialMembership => "initial-membership",
            InfeasibleGroup::StateConstraint => "state-constraint",
            InfeasibleGroup::ControlConstraint => "control-constraint",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TubeError {
    #[error("unstabilizable linearization: {0}")]
    Unstabilizable(String),
    #[error("tube too large: tightened {0} set is empty")]
    TubeTooLarge(&'static str),
    #[error("nominal problem infeasible ({0})")]
    Infeasible(InfeasibleGroup),
    #[error("QP solver hit the iteration limit")]
    MaxIter,
    #[error("delay steps {s} outside 1..={horizon}")]
    DelaySteps { s: usize, horizon: usize },
    #[error("plan index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("disturbance set must contain the origin in its interior")]
    DisturbanceNotAroundOrigin,
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
}

/// Stabilizing state feedback `u = K x` for `x+ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGain {
    pub k: DMatrix<f64>,
    pub spectral_radius: f64,
    pub iterations: usize,
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> Option<f64> {
    if m.nrows() == 0 {
        return Some(0.0);
    }
    let schur = nalgebra::linalg::Schur::try_new(m.clone(), 1e-14, 10_000)?;
    Some(schur.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max))
}

/// LQR gain from the discrete Riccati recursion, iterated to a fixed point.
pub fn compute_feedback_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<FeedbackGain, TubeError> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(TubeError::InvalidConfig("gain dimensions".into()));
    }
    let mut p = q.clone();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=RICCATI_MAX_ITER {
        iterations = it;
        let s = r + b.transpose() * &p * b;
        let Some(s_inv) = s.clone().try_inverse() else {
            return Err(TubeError::Unstabilizable("singular input weighting".into()));
        };
        let k = -(&s_inv * b.transpose() * &p * a);
        let a_cl = a + b * &k;
        let next = q + k.transpose() * r * &k + a_cl.transpose() * &p * &a_cl;
        let next = (&next + next.transpose()) * 0.5;
        let diff = (&next - &p).amax();
        p = next;
        if !p.iter().all(|v| v.is_finite()) {
            break;
        }
        if diff <= RICCATI_TOL * p.amax().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(TubeError::Unstabilizable(format!("Riccati recursion did not converge in {iterations} iterations")));
    }
    let s = r + b.transpose() * &p * b;
    let k = -(s.try_inverse().ok_or_else(|| TubeError::Unstabilizable("singular input weighting".into()))? * b.transpose() * &p * a);
    let rho = spectral_radius(&(a + b * &k)).ok_or_else(|| TubeError::Unstabilizable("eigenvalue computation failed".into()))?;
    if rho >= 1.0 {
        return Err(TubeError::Unstabilizable(format!("closed-loop spectral radius {rho}")));
    }
    Ok(FeedbackGain {
        k,
        spectral_radius: rho,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    pub qp: QpSettings,
}

impl MpcConfig {
    pub fn new(horizon: usize, dt: f64, q: DMatrix<f64>, r: DMatrix<f64>, q_terminal: DMatrix<f64>) -> Result<Self, TubeError> {
        let cfg = Self {
            horizon,
            dt,
            q,
            r,
            q_terminal,
            qp: QpSettings::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TubeError> {
        if self.horizon < 2 {
            return Err(TubeError::InvalidConfig("horizon must be at least 2".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(TubeError::InvalidConfig("dt must be positive".into()));
        }
        let psd = |m: &DMatrix<f64>, strict: bool| {
            m.is_square() && m.iter().all(|v| v.is_finite()) && {
                let s = (m + m.transpose()) * 0.5;
                let min = s.symmetric_eigen().eigenvalues.min();
                if strict {
                    min > 0.0
                } else {
                    min >= -1e-12
                }
            }
        };
        if !psd(&self.q, false) || !psd(&self.q_terminal, false) {
            return Err(TubeError::InvalidConfig("Q and Q_N must be positive semidefinite".into()));
        }
        if !psd(&self.r, true) {
            return Err(TubeError::InvalidConfig("R must be positive definite".into()));
        }
        if self.q.shape() != self.q_terminal.shape() {
            return Err(TubeError::InvalidConfig("Q and Q_N differ in size".into()));
        }
        Ok(())
    }

    pub fn horizon_time(&self) -> f64 {
        self.horizon as f64 * self.dt
    }
}

/// Target states `x_ref,0..=N` and the matching feedforward controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
}

impl ReferenceTrajectory {
    pub fn new(states: Vec<VehicleState>, controls: Vec<ControlInput>) -> Result<Self, TubeError> {
        if states.len() < 2 || controls.len() + 1 != states.len() {
            return Err(TubeError::InvalidConfig(format!(
                "reference needs N+1 states and N controls, got {} and {}",
                states.len(),
                controls.len()
            )));
        }
        if !states.iter().all(VehicleState::is_finite) || !controls.iter().all(ControlInput::is_finite) {
            return Err(TubeError::InvalidConfig("non-finite reference".into()));
        }
        Ok(Self { states, controls })
    }

    /// Infers feedforward controls from consecutive states: acceleration
    /// from the speed change and the steering command that moves the lagged
    /// steering angle from one sample to the next.
    pub fn from_states(states: Vec<VehicleState>, dt: f64, params: &VehicleParams) -> Result<Self, TubeError> {
        let decay = (-params.k_delta * dt).exp();
        let controls = states
            .windows(2)
            .map(|w| {
                let accel = (w[1].v - w[0].v) / dt;
                let cmd = (w[1].delta_a - w[0].delta_a * decay) / (1.0 - decay);
                ControlInput::new(accel, cmd)
            })
            .collect();
        Self::new(states, controls)
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Decision variables of one solved nominal problem.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalPlan {
    pub xbar: Vec<VehicleState>,
    pub ubar: Vec<ControlInput>,
    pub t_start: f64,
    pub dt: f64,
}

impl NominalPlan {
    pub fn horizon(&self) -> usize {
        self.ubar.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub state: HPolytope,
    pub control: HPolytope,
    pub disturbance: Zonotope,
    pub invariant: HPolytope,
    pub gain: DMatrix<f64>,
}

impl ConstraintSet {
    pub fn new(state: HPolytope, control: HPolytope, disturbance: Zonotope, invariant: HPolytope, gain: DMatrix<f64>) -> Result<Self, TubeError> {
        let nx = disturbance.dim();
        if state.dim() != nx || invariant.dim() != nx || gain.ncols() != nx || gain.nrows() != control.dim() {
            return Err(TubeError::InvalidConfig("constraint set dimensions".into()));
        }
        if !origin_in_interior(&disturbance) {
            return Err(TubeError::DisturbanceNotAroundOrigin);
        }
        let sets = Self {
            state,
            control,
            disturbance,
            invariant,
            gain,
        };
        tighten(&sets)?;
        Ok(sets)
    }
}

fn origin_in_interior(w: &Zonotope) -> bool {
    let d = w.dim();
    if d == 0 || w.num_generators() < d {
        return false;
    }
    let rank = w.generators().clone().svd(false, false).rank(1e-12);
    if rank < d {
        return false;
    }
    // strictly inside iff the origin is inside the zonotope shrunk slightly
    let shrunk = Zonotope::new(w.center().clone(), w.generators() * (1.0 - 1e-9)).expect("finite");
    shrunk.contains(&DVector::zeros(d))
}

/// `X (-) Z` and `U (-) K Z`.
pub fn tighten(sets: &ConstraintSet) -> Result<(HPolytope, HPolytope), TubeError> {
    let x = pontryagin_diff(&sets.state, &sets.invariant).map_err(|e| match e {
        PolytopeError::EmptyDifference => TubeError::TubeTooLarge("state"),
        e => e.into(),
    })?;
    let kz = LinearImage::new(&sets.gain, &sets.invariant)?;
    let u = pontryagin_diff(&sets.control, &kz).map_err(|e| match e {
        PolytopeError::EmptyDifference => TubeError::TubeTooLarge("control"),
        e => e.into(),
    })?;
    Ok((x, u))
}

/// Affine time-varying model `x_{k+1} = A_k x_k + B_k u_k + c_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvModel {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
}

impl LtvModel {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a.first().map_or(0, |a| a.nrows())
    }

    pub fn input_dim(&self) -> usize {
        self.b.first().map_or(0, |b| b.ncols())
    }

    pub fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a[k] * x + &self.b[k] * u + &self.c[k]
    }
}

/// The condensed nominal problem in plain vector form.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvProblem {
    pub model: LtvModel,
    pub x_ref: Vec<DVector<f64>>,
    pub u_ref: Vec<DVector<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    /// `x_pred - xbar_0` must lie in this set.
    pub membership: Option<(DVector<f64>, HPolytope)>,
    /// Applied to every nominal state `xbar_0..=xbar_N`.
    pub state: Option<HPolytope>,
    /// Applied to every nominal control.
    pub control: Option<HPolytope>,
    /// Extra per-step sets, entry `k` constraining `xbar_k`. Empty or of
    /// length `N + 1`.
    pub stage_states: Vec<HPolytope>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtvSolution {
    pub xbar: Vec<DVector<f64>>,
    pub ubar: Vec<DVector<f64>>,
    pub cost: f64,
    pub warm_start: WarmStart,
    pub iterations: usize,
}

struct Condensed {
    // xbar_k = m[k] * z + off[k], z = [xbar_0; u_0; ...; u_{N-1}]
    m: Vec<DMatrix<f64>>,
    off: Vec<DVector<f64>>,
    nz: usize,
}

fn condense(model: &LtvModel) -> Condensed {
    let n = model.horizon();
    let nx = model.state_dim();
    let nu = model.input_dim();
    let nz = nx + nu * n;
    let mut m = Vec::with_capacity(n + 1);
    let mut off = Vec::with_capacity(n + 1);
    let mut m0 = DMatrix::zeros(nx, nz);
    m0.view_mut((0, 0), (nx, nx)).fill_with_identity();
    m.push(m0);
    off.push(DVector::zeros(nx));
    for k in 0..n {
        let mut next = &model.a[k] * &m[k];
        let mut cols = next.view_mut((0, nx + k * nu), (nx, nu));
        cols += &model.b[k];
        m.push(next);
        off.push(&model.a[k] * &off[k] + &model.c[k]);
    }
    Condensed { m, off, nz }
}

fn input_selector(nx: usize, nu: usize, nz: usize, k: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(nu, nz);
    s.view_mut((0, nx + k * nu), (nu, nu)).fill_with_identity();
    s
}

impl LtvProblem {
    fn validate(&self) -> Result<(), TubeError> {
        let n = self.model.horizon();
        let nx = self.model.state_dim();
        let nu = self.model.input_dim();
        let ok = n >= 1
            && self.model.b.len() == n
            && self.model.c.len() == n
            && self.model.a.iter().all(|a| a.shape() == (nx, nx))
            && self.model.b.iter().all(|b| b.shape() == (nx, nu))
            && self.model.c.iter().all(|c| c.len() == nx)
            && self.x_ref.len() == n + 1
            && self.u_ref.len() == n
            && self.x_ref.iter().all(|x| x.len() == nx)
            && self.u_ref.iter().all(|u| u.len() == nu)
            && self.q.shape() == (nx, nx)
            && self.q_terminal.shape() == (nx, nx)
            && self.r.shape() == (nu, nu)
            && self.membership.as_ref().map_or(true, |(x, m)| x.len() == nx && m.dim() == nx)
            && self.state.as_ref().map_or(true, |s| s.dim() == nx)
            && self.control.as_ref().map_or(true, |c| c.dim() == nu)
            && (self.stage_states.is_empty() || self.stage_states.len() == n + 1)
            && self.stage_states.iter().all(|s| s.dim() == nx);
        if ok {
            Ok(())
        } else {
            Err(TubeError::InvalidConfig("inconsistent LTV problem dimensions".into()))
        }
    }

    /// Builds the QP; the three flags select which constraint groups are
    /// included.
    fn build(&self, cond: &Condensed, membership: bool, state: bool, control: bool) -> Result<(QuadraticProgram, f64), TubeError> {
        let n = self.model.horizon();
        let nx = self.model.state_dim();
        let nu = self.model.input_dim();
        let nz = cond.nz;
        let mut p = DMatrix::zeros(nz, nz);
        let mut q = DVector::zeros(nz);
        let mut constant = 0.0;
        for k in 0..=n {
            let w = if k == n { &self.q_terminal } else { &self.q };
            let mt_w = cond.m[k].transpose() * w;
            let dev = &cond.off[k] - &self.x_ref[k];
            p += &mt_w * &cond.m[k] * 2.0;
            q += &mt_w * &dev * 2.0;
            constant += dev.dot(&(w * &dev));
        }
        for k in 0..n {
            let s = input_selector(nx, nu, nz, k);
            let st_r = s.transpose() * &self.r;
            p += &st_r * &s * 2.0;
            q -= &st_r * &self.u_ref[k] * 2.0;
            constant += self.u_ref[k].dot(&(&self.r * &self.u_ref[k]));
        }
        let (g, h) = self.constraint_rows(cond, membership, state, control);
        let qp = QuadraticProgram::new(p, q)?.with_inequalities(g, h)?;
        Ok((qp, constant))
    }

    fn constraint_rows(&self, cond: &Condensed, membership: bool, state: bool, control: bool) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.model.horizon();
        let nx = self.model.state_dim();
        let nu = self.model.input_dim();
        let nz = cond.nz;
        let mut rows: Vec<DMatrix<f64>> = Vec::new();
        let mut rhs: Vec<DVector<f64>> = Vec::new();
        if membership {
            if let Some((x_pred, set)) = &self.membership {
                // H (x_pred - xbar_0) <= h
                rows.push(-(set.normals() * &cond.m[0]));
                rhs.push(set.offsets() - set.normals() * x_pred);
            }
        }
        if state {
            if let Some(set) = &self.state {
                for k in 0..=n {
                    rows.push(set.normals() * &cond.m[k]);
                    rhs.push(set.offsets() - set.normals() * &cond.off[k]);
                }
            }
            for (k, set) in self.stage_states.iter().enumerate() {
                rows.push(set.normals() * &cond.m[k]);
                rhs.push(set.offsets() - set.normals() * &cond.off[k]);
            }
        }
        if control {
            if let Some(set) = &self.control {
                for k in 0..n {
                    rows.push(set.normals() * input_selector(nx, nu, nz, k));
                    rhs.push(set.offsets().clone());
                }
            }
        }
        let total: usize = rows.iter().map(|r| r.nrows()).sum();
        let mut g = DMatrix::zeros(total, nz);
        let mut h = DVector::zeros(total);
        let mut at = 0;
        for (r, b) in rows.iter().zip(&rhs) {
            g.rows_mut(at, r.nrows()).copy_from(r);
            h.rows_mut(at, r.nrows()).copy_from(b);
            at += r.nrows();
        }
        (g, h)
    }

    /// Exact feasibility of the selected constraint groups by linear
    /// programming.
    fn feasible(&self, cond: &Condensed, membership: bool, state: bool, control: bool) -> bool {
        let (g, h) = self.constraint_rows(cond, membership, state, control);
        let keep: Vec<usize> = (0..g.nrows()).filter(|&i| g.row(i).iter().any(|v| *v != 0.0)).collect();
        if (0..g.nrows()).any(|i| !keep.contains(&i) && h[i] < 0.0) {
            return false;
        }
        match HPolytope::new(g.select_rows(&keep), h.select_rows(&keep)) {
            Ok(p) => !p.is_empty(),
            Err(_) => true,
        }
    }

    pub fn solve(&self, settings: &QpSettings, warm: Option<&WarmStart>) -> Result<LtvSolution, TubeError> {
        self.validate()?;
        let cond = condense(&self.model);
        if !self.feasible(&cond, true, true, true) {
            return Err(TubeError::Infeasible(self.classify(&cond)));
        }
        let (qp, constant) = self.build(&cond, true, true, true)?;
        let sol = qp::solve_with(&qp, settings, warm);
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::MaxIter => return Err(TubeError::MaxIter),
            QpStatus::Infeasible => return Err(TubeError::Infeasible(self.classify(&cond))),
        }
        let n = self.model.horizon();
        let nx = self.model.state_dim();
        let nu = self.model.input_dim();
        let xbar = (0..=n).map(|k| &cond.m[k] * &sol.x + &cond.off[k]).collect();
        let ubar = (0..n).map(|k| sol.x.rows(nx + k * nu, nu).into_owned()).collect();
        Ok(LtvSolution {
            xbar,
            ubar,
            cost: sol.objective + constant,
            warm_start: sol.warm_start(),
            iterations: sol.iterations,
        })
    }

    /// Adds constraint groups one at a time and reports the first group whose
    /// addition makes the problem infeasible.
    fn classify(&self, cond: &Condensed) -> InfeasibleGroup {
        let stages = [
            (false, false, true, InfeasibleGroup::ControlConstraint),
            (true, false, true, InfeasibleGroup::InitialMembership),
        ];
        for (m, s, c, group) in stages {
            if !self.feasible(cond, m, s, c) {
                return group;
            }
        }
        InfeasibleGroup::StateConstraint
    }

    pub fn cost_of(&self, xbar: &[DVector<f64>], ubar: &[DVector<f64>]) -> f64 {
        let n = self.model.horizon();
        let mut c = 0.0;
        for k in 0..=n {
            let w = if k == n { &self.q_terminal } else { &self.q };
            let d = &xbar[k] - &self.x_ref[k];
            c += d.dot(&(w * &d));
        }
        for k in 0..n {
            let d = &ubar[k] - &self.u_ref[k];
            c += d.dot(&(&self.r * &d));
        }
        c
    }
}

/// Brings the heading of `x` to within pi of `anchor` so differences in the
/// linear model stay small.
fn unwrap_near(x: &VehicleState, anchor: f64) -> VehicleState {
    VehicleState {
        theta: anchor + normalize_angle(x.theta - anchor),
        ..*x
    }
}

fn to_dmatrix<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// LTV model along the reference: `A_k, B_k` from the Jacobian at
/// `(x_ref,k, u_ref,k)` and the affine term chosen so the reference itself
/// is reproduced up to linearization error.
pub fn linearize_reference(reference: &ReferenceTrajectory, dt: f64, params: &VehicleParams) -> Result<LtvModel, TubeError> {
    let n = reference.horizon();
    let mut model = LtvModel {
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
    };
    for k in 0..n {
        let x = &reference.states[k];
        let u = &reference.controls[k];
        let (a, b) = vehicle::linearize(x, u, dt, params)?;
        let next = unwrap_near(&vehicle::step(x, u, dt, params)?, reference.states[k + 1].theta);
        let a = to_dmatrix(&a);
        let b = to_dmatrix(&b);
        let c = next.to_vector_d() - &a * x.to_vector_d() - &b * u.to_vector_d();
        model.a.push(a);
        model.b.push(b);
        model.c.push(c);
    }
    Ok(model)
}

/// Closed-loop error matrix `A + B K` at `state` with the feedforward `input`.
pub fn closed_loop_matrix(state: &VehicleState, input: &ControlInput, gain: &DMatrix<f64>, dt: f64, params: &VehicleParams) -> Result<DMatrix<f64>, TubeError> {
    let (a, b) = vehicle::linearize(state, input, dt, params)?;
    Ok(to_dmatrix(&a) + to_dmatrix(&b) * gain)
}

/// Feedback gain for the vehicle at one operating point.
pub fn vehicle_gain(state: &VehicleState, input: &ControlInput, cfg: &MpcConfig, params: &VehicleParams) -> Result<FeedbackGain, TubeError> {
    // same speed range as the Jacobian family behind the invariant set
    let at = VehicleState {
        v: state.v.clamp(params.v_min, params.v_max),
        ..*state
    };
    let (a, b) = vehicle::linearize(&at, input, cfg.dt, params)?;
    compute_feedback_gain(&to_dmatrix(&a), &to_dmatrix(&b), &cfg.q, &cfg.r)
}

/// `Z (-) (W (+) A W (+) ... (+) A^{s-1} W)`.
pub fn membership_set(invariant: &HPolytope, disturbance: &Zonotope, a: &DMatrix<f64>, s: usize) -> Result<HPolytope, TubeError> {
    let ps = power_sum(a, disturbance, s)?;
    pontryagin_diff(invariant, &ps).map_err(|e| match e {
        PolytopeError::EmptyDifference => TubeError::Infeasible(InfeasibleGroup::InitialMembership),
        e => e.into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayAwareSolution {
    pub plan: NominalPlan,
    pub cost: f64,
    pub warm_start: WarmStart,
    pub membership: HPolytope,
}

/// One cycle of the delay-aware nominal problem from the predicted state
/// `x_pred` at the activation time, with `s` delay steps.
pub fn solve_delay_aware(
    x_pred: &VehicleState,
    reference: &ReferenceTrajectory,
    sets: &ConstraintSet,
    s: usize,
    cfg: &MpcConfig,
    params: &VehicleParams,
    warm: Option<&WarmStart>,
) -> Result<DelayAwareSolution, TubeError> {
    solve_delay_aware_staged(x_pred, reference, sets, &[], s, cfg, params, warm)
}

/// As [`solve_delay_aware`], with additional per-step state sets (one per
/// nominal state, or none) tightened by the invariant set like the common
/// state constraint.
#[allow(clippy::too_many_arguments)]
pub fn solve_delay_aware_staged(
    x_pred: &VehicleState,
    reference: &ReferenceTrajectory,
    sets: &ConstraintSet,
    stages: &[HPolytope],
    s: usize,
    cfg: &MpcConfig,
    params: &VehicleParams,
    warm: Option<&WarmStart>,
) -> Result<DelayAwareSolution, TubeError> {
    if !stages.is_empty() && stages.len() != cfg.horizon + 1 {
        return Err(TubeError::InvalidConfig(format!(
            "{} stage sets for horizon {}",
            stages.len(),
            cfg.horizon
        )));
    }
    if reference.horizon() != cfg.horizon {
        return Err(TubeError::InvalidConfig(format!(
            "reference horizon {} differs from configured horizon {}",
            reference.horizon(),
            cfg.horizon
        )));
    }
    if s < 1 || s > cfg.horizon {
        return Err(TubeError::DelaySteps { s, horizon: cfg.horizon });
    }
    if !x_pred.is_finite() {
        return Err(VehicleError::NonFinite("predicted state").into());
    }
    let (x_tight, u_tight) = tighten(sets)?;
    let mut stage_states: Vec<HPolytope> = Vec::with_capacity(stages.len());
    for (k, x) in stages.iter().enumerate() {
        if k > 0 && stages[k - 1] == *x {
            let prev = stage_states[k - 1].clone();
            stage_states.push(prev);
            continue;
        }
        stage_states.push(pontryagin_diff(x, &sets.invariant).map_err(|e| match e {
            PolytopeError::EmptyDifference => TubeError::TubeTooLarge("state"),
            e => e.into(),
        })?);
    }
    let a_pred = closed_loop_matrix(x_pred, &reference.controls[0], &sets.gain, cfg.dt, params)?;
    let membership = membership_set(&sets.invariant, &sets.disturbance, &a_pred, s)?;
    let model = linearize_reference(reference, cfg.dt, params)?;
    let x_pred_v = unwrap_near(x_pred, reference.states[0].theta).to_vector_d();
    let problem = LtvProblem {
        model,
        x_ref: reference.states.iter().map(VehicleState::to_vector_d).collect(),
        u_ref: reference.controls.iter().map(ControlInput::to_vector_d).collect(),
        q: cfg.q.clone(),
        r: cfg.r.clone(),
        q_terminal: cfg.q_terminal.clone(),
        membership: Some((x_pred_v, membership.clone())),
        state: Some(x_tight),
        control: Some(u_tight),
        stage_states,
    };
    let sol = problem.solve(&cfg.qp, warm)?;
    let plan = NominalPlan {
        xbar: sol.xbar.iter().map(VehicleState::from_vector_d).collect(),
        ubar: sol.ubar.iter().map(ControlInput::from_vector_d).collect(),
        t_start: 0.0,
        dt: cfg.dt,
    };
    Ok(DelayAwareSolution {
        plan,
        cost: sol.cost,
        warm_start: sol.warm_start,
        membership,
    })
}

/// Result of the ancillary law with the saturation flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AncillaryOutput {
    pub input: ControlInput,
    pub saturated: bool,
}

/// `ubar_k + K (x - xbar_k)`, saturated to the actuator limits.
pub fn ancillary_control(x: &VehicleState, plan: &NominalPlan, k: usize, gain: &DMatrix<f64>, params: &VehicleParams) -> Result<AncillaryOutput, TubeError> {
    let (xbar, ubar) = match (plan.xbar.get(k), plan.ubar.get(k)) {
        (Some(x), Some(u)) => (x, u),
        _ => {
            return Err(TubeError::IndexOutOfRange {
                index: k,
                len: plan.ubar.len(),
            })
        }
    };
    Ok(ancillary_law(x, xbar, ubar, gain, params))
}

/// Ancillary law for a single nominal pair.
pub fn ancillary_law(x: &VehicleState, xbar: &VehicleState, ubar: &ControlInput, gain: &DMatrix<f64>, params: &VehicleParams) -> AncillaryOutput {
    let err = x.difference(xbar);
    let err = DVector::from_column_slice(err.as_slice());
    let u = ubar.to_vector_d() + gain * err;
    let (input, saturated) = ControlInput::from_vector_d(&u).saturate(params);
    AncillaryOutput { input, saturated }
}

/// Default weights for the vehicle: position and heading tracking dominate.
pub fn vehicle_weights() -> (DMatrix<f64>, DMatrix<f64>) {
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.5, 0.5, 0.1]));
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 10.0]));
    (q, r)
}

/// Control box `a_min <= a <= a_max`, `|delta_cmd| <= delta_max`.
pub fn control_box(params: &VehicleParams) -> HPolytope {
    HPolytope::from_box(&[params.a_min, -params.delta_max], &[params.a_max, params.delta_max]).expect("valid params")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polytope::TemplateDirections;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn scalar_riccati_fixed_point() {
        let one = m(1, 1, &[1.0]);
        let g = compute_feedback_gain(&one, &one, &one, &one).unwrap();
        // P = (1 + sqrt 5) / 2 solves P^2 - P - 1 = 0; K = -P / (1 + P)
        let p = (1.0 + 5f64.sqrt()) / 2.0;
        assert_abs_diff_eq!(g.k[(0, 0)], -p / (1.0 + p), epsilon = 1e-8);
        assert!((1.0 + g.k[(0, 0)]).abs() < 1.0);
        assert_abs_diff_eq!(g.spectral_radius, 1.0 / (1.0 + p), epsilon = 1e-8);
    }

    #[test]
    fn stable_plant_without_input() {
        let a = m(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let b = DMatrix::zeros(2, 1);
        let g = compute_feedback_gain(&a, &b, &DMatrix::identity(2, 2), &m(1, 1, &[1.0])).unwrap();
        assert_eq!(g.k, DMatrix::zeros(1, 2));
        assert!(g.spectral_radius < 1.0);
    }

    #[test]
    fn unstabilizable_is_an_error() {
        let a = m(1, 1, &[2.0]);
        let b = m(1, 1, &[0.0]);
        assert!(matches!(
            compute_feedback_gain(&a, &b, &m(1, 1, &[1.0]), &m(1, 1, &[1.0])),
            Err(TubeError::Unstabilizable(_))
        ));
    }

    #[test]
    fn random_pairs_are_stabilized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.5..1.5));
            let b = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
            let g = compute_feedback_gain(&a, &b, &DMatrix::identity(3, 3), &DMatrix::identity(2, 2)).unwrap();
            assert!(g.spectral_radius < 1.0);
            assert!(spectral_radius(&(&a + &b * &g.k)).unwrap() < 1.0);
        }
    }

    fn sets_2d(gain: DMatrix<f64>, z: HPolytope) -> ConstraintSet {
        ConstraintSet::new(
            HPolytope::symmetric_box(&[5.0, 5.0]).unwrap(),
            HPolytope::symmetric_box(&[1.0, 1.0]).unwrap(),
            Zonotope::symmetric_box(&[0.01, 0.01]).unwrap(),
            z,
            gain,
        )
        .unwrap()
    }

    #[test]
    fn zero_tube_keeps_sets() {
        let zero = HPolytope::symmetric_box(&[0.0, 0.0]).unwrap();
        let sets = sets_2d(DMatrix::identity(2, 2), zero);
        let (x, u) = tighten(&sets).unwrap();
        assert_eq!(x, sets.state);
        assert_eq!(u, sets.control);
    }

    #[test]
    fn box_control_tightening() {
        let z = HPolytope::symmetric_box(&[0.2, 0.2]).unwrap();
        let sets = sets_2d(DMatrix::identity(2, 2), z);
        let (_, u) = tighten(&sets).unwrap();
        let want = HPolytope::symmetric_box(&[0.8, 0.8]).unwrap();
        assert!((u.offsets() - want.offsets()).amax() < 1e-12);
    }

    #[test]
    fn oversized_tube_is_rejected() {
        let z = HPolytope::symmetric_box(&[0.2, 0.2]).unwrap();
        let r = ConstraintSet::new(
            HPolytope::symmetric_box(&[5.0, 5.0]).unwrap(),
            HPolytope::symmetric_box(&[1.0, 1.0]).unwrap(),
            Zonotope::symmetric_box(&[0.01, 0.01]).unwrap(),
            z,
            DMatrix::identity(2, 2) * 10.0,
        );
        assert_eq!(r, Err(TubeError::TubeTooLarge("control")));
        let flat = Zonotope::symmetric_box(&[0.01, 0.0]).unwrap();
        let r = ConstraintSet::new(
            HPolytope::symmetric_box(&[5.0, 5.0]).unwrap(),
            HPolytope::symmetric_box(&[1.0, 1.0]).unwrap(),
            flat,
            HPolytope::symmetric_box(&[0.1, 0.1]).unwrap(),
            DMatrix::identity(2, 2),
        );
        assert_eq!(r, Err(TubeError::DisturbanceNotAroundOrigin));
    }

    #[test]
    fn tightened_controls_absorb_feedback() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let k = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
            let zw = [rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)];
            let z = HPolytope::symmetric_box(&zw).unwrap();
            let sets = sets_2d(k.clone(), z.clone());
            let Ok((_, u)) = tighten(&sets) else { continue };
            for _ in 0..500 {
                let ub = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
                if !u.contains(&ub) {
                    continue;
                }
                let e = DVector::from_fn(2, |i, _| rng.gen_range(-zw[i]..=zw[i]));
                assert!(sets.control.contains(&(&ub + &k * e)));
            }
        }
    }

    fn double_integrator(n: usize) -> LtvModel {
        let a = m(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = m(2, 1, &[0.005, 0.1]);
        LtvModel {
            a: vec![a; n],
            b: vec![b; n],
            c: vec![DVector::zeros(2); n],
        }
    }

    fn di_problem(x0: &DVector<f64>, n: usize, umax: f64) -> LtvProblem {
        LtvProblem {
            model: double_integrator(n),
            x_ref: vec![DVector::zeros(2); n + 1],
            u_ref: vec![DVector::zeros(1); n],
            q: DMatrix::identity(2, 2),
            r: m(1, 1, &[0.1]),
            q_terminal: DMatrix::identity(2, 2) * 5.0,
            membership: Some((x0.clone(), HPolytope::symmetric_box(&[0.0, 0.0]).unwrap())),
            state: Some(HPolytope::symmetric_box(&[10.0, 10.0]).unwrap()),
            control: Some(HPolytope::symmetric_box(&[umax]).unwrap()),
            stage_states: Vec::new(),
        }
    }

    fn grid_cost(p: &LtvProblem, x0: &DVector<f64>, u: &[f64]) -> f64 {
        let mut xs = vec![x0.clone()];
        for (k, uk) in u.iter().enumerate() {
            let next = p.model.step(k, &xs[k], &DVector::from_element(1, *uk));
            xs.push(next);
        }
        let us: Vec<_> = u.iter().map(|v| DVector::from_element(1, *v)).collect();
        p.cost_of(&xs, &us)
    }

    #[test]
    fn double_integrator_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..3 {
            let x0 = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let umax = 1.0;
            let p = di_problem(&x0, 3, umax);
            let sol = p.solve(&QpSettings::default(), None).unwrap();
            // coarse grid then a 1e-3 grid around the coarse optimum
            let mut best = (f64::INFINITY, [0.0; 3]);
            let coarse: Vec<f64> = (0..=40).map(|i| -umax + 0.05 * i as f64).collect();
            for &a in &coarse {
                for &b in &coarse {
                    for &c in &coarse {
                        let v = grid_cost(&p, &x0, &[a, b, c]);
                        if v < best.0 {
                            best = (v, [a, b, c]);
                        }
                    }
                }
            }
            let center = best.1;
            let fine = |c: f64| (-50..=50).map(move |i| (c + 1e-3 * i as f64).clamp(-umax, umax));
            for a in fine(center[0]) {
                for b in fine(center[1]) {
                    for c in fine(center[2]) {
                        let v = grid_cost(&p, &x0, &[a, b, c]);
                        if v < best.0 {
                            best = (v, [a, b, c]);
                        }
                    }
                }
            }
            assert!(sol.cost <= best.0 + 1e-9);
            assert!((sol.cost - best.0).abs() < 5e-3, "{} vs {}", sol.cost, best.0);
        }
    }

    #[test]
    fn plan_satisfies_dynamics() {
        let x0 = DVector::from_vec(vec![1.5, -0.5]);
        let p = di_problem(&x0, 10, 0.5);
        let sol = p.solve(&QpSettings::default(), None).unwrap();
        for k in 0..10 {
            let next = p.model.step(k, &sol.xbar[k], &sol.ubar[k]);
            assert!((next - &sol.xbar[k + 1]).amax() < 1e-9);
            assert!(sol.ubar[k][0].abs() <= 0.5 + 1e-6);
        }
        assert!((&sol.xbar[0] - &x0).amax() < 1e-6);
    }

    #[test]
    fn perturbing_controls_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x0 = DVector::from_vec(vec![1.0, 0.3]);
        let mut p = di_problem(&x0, 6, 0.8);
        p.membership = Some((x0.clone(), HPolytope::symmetric_box(&[0.0, 0.0]).unwrap()));
        let sol = p.solve(&QpSettings::default(), None).unwrap();
        for _ in 0..200 {
            let us: Vec<DVector<f64>> = sol
                .ubar
                .iter()
                .map(|u| DVector::from_element(1, (u[0] + rng.gen_range(-1e-3..1e-3)).clamp(-0.8, 0.8)))
                .collect();
            let mut xs = vec![x0.clone()];
            for k in 0..6 {
                xs.push(p.model.step(k, &xs[k], &us[k]));
            }
            assert!(p.cost_of(&xs, &us) >= sol.cost - 1e-6);
        }
    }

    #[test]
    fn infeasibility_is_classified() {
        let x0 = DVector::from_vec(vec![0.0, 0.0]);
        let mut p = di_problem(&x0, 4, 1.0);
        p.state = Some(HPolytope::from_box(&[3.0, -10.0], &[4.0, 10.0]).unwrap());
        assert_eq!(p.solve(&QpSettings::default(), None), Err(TubeError::Infeasible(InfeasibleGroup::StateConstraint)));
        let mut p = di_problem(&x0, 4, 1.0);
        p.control = Some(HPolytope::from_box(&[0.5], &[0.4]).unwrap());
        assert_eq!(p.solve(&QpSettings::default(), None), Err(TubeError::Infeasible(InfeasibleGroup::ControlConstraint)));
    }

    #[test]
    fn stage_sets_bind_only_their_step() {
        let x0 = DVector::from_vec(vec![2.0, 0.0]);
        let free = di_problem(&x0, 6, 1.0).solve(&QpSettings::default(), None).unwrap();
        let mut p = di_problem(&x0, 6, 1.0);
        let loose = HPolytope::symmetric_box(&[10.0, 10.0]).unwrap();
        let mut stages = vec![loose; 7];
        let cap = free.xbar[3][0] + 0.01;
        stages[3] = HPolytope::from_box(&[cap, -10.0], &[10.0, 10.0]).unwrap();
        p.stage_states = stages;
        let sol = p.solve(&QpSettings::default(), None).unwrap();
        assert!(sol.xbar[3][0] >= cap - 1e-5);
        assert!((sol.xbar[3][0] - cap).abs() < 1e-4);
        assert!(sol.cost > free.cost);
    }

    fn straight_reference(n: usize, dt: f64, v: f64) -> ReferenceTrajectory {
        let params = VehicleParams::default();
        let states = (0..=n).map(|k| VehicleState::new(v * dt * k as f64, 0.0, 0.0, v, 0.0)).collect();
        ReferenceTrajectory::from_states(states, dt, &params).unwrap()
    }

    fn vehicle_sets(cfg: &MpcConfig, params: &VehicleParams, w: Zonotope, x: &VehicleState, u: &ControlInput) -> ConstraintSet {
        let gain = vehicle_gain(x, u, cfg, params).unwrap();
        let a = closed_loop_matrix(x, u, &gain.k, cfg.dt, params).unwrap();
        let z = crate::polytope::invariant_set_from_matrices(&[a], &w, cfg.horizon, &TemplateDirections::vehicle_default()).unwrap();
        let state = HPolytope::from_box(&[-100.0, -10.0, -4.0, 0.0, -1.0], &[200.0, 10.0, 4.0, 40.0, 1.0]).unwrap();
        ConstraintSet::new(state, control_box(params), w, z, gain.k).unwrap()
    }

    #[test]
    fn on_reference_fixed_point() {
        let params = VehicleParams::default();
        let (q, r) = vehicle_weights();
        let cfg = MpcConfig::new(10, 0.1, q.clone(), r, q).unwrap();
        let reference = straight_reference(10, 0.1, 10.0);
        let w = Zonotope::symmetric_box(&[1e-6; 5]).unwrap();
        let sets = vehicle_sets(&cfg, &params, w, &reference.states[0], &reference.controls[0]);
        let sol = solve_delay_aware(&reference.states[0], &reference, &sets, 1, &cfg, &params, None).unwrap();
        assert!(sol.cost < 1e-8);
        for (u, ur) in sol.plan.ubar.iter().zip(&reference.controls) {
            assert!((u.to_vector_d() - ur.to_vector_d()).amax() < 1e-5);
        }
    }

    #[test]
    fn membership_shrinks_with_delay_steps() {
        let params = VehicleParams::default();
        let (q, r) = vehicle_weights();
        let cfg = MpcConfig::new(10, 0.1, q.clone(), r, q).unwrap();
        let reference = straight_reference(10, 0.1, 10.0);
        let w = Zonotope::symmetric_box(&[0.01, 0.01, 0.002, 0.02, 0.001]).unwrap();
        let sets = vehicle_sets(&cfg, &params, w.clone(), &reference.states[0], &reference.controls[0]);
        let a = closed_loop_matrix(&reference.states[0], &reference.controls[0], &sets.gain, cfg.dt, &params).unwrap();
        let mut prev: Option<HPolytope> = None;
        for s in 1..=cfg.horizon {
            let mset = membership_set(&sets.invariant, &w, &a, s).unwrap();
            if let Some(p) = &prev {
                assert!(mset.offsets().iter().zip(p.offsets().iter()).all(|(a, b)| a <= &(b + 1e-15)));
            }
            // power sums for every admissible s fit inside the invariant set
            let ps = power_sum(&a, &w, s).unwrap();
            for (i, row) in sets.invariant.normals().row_iter().enumerate() {
                assert!(ps.support(&row.transpose()).unwrap() <= sets.invariant.offsets()[i] + 1e-12);
            }
            prev = Some(mset);
        }
    }

    #[test]
    fn ancillary_law_examples() {
        let params = VehicleParams::default();
        let xbar = VehicleState::new(1.0, 2.0, 0.3, 10.0, 0.05);
        let ubar = ControlInput::new(0.5, 0.1);
        let plan = NominalPlan {
            xbar: vec![xbar, xbar],
            ubar: vec![ubar],
            t_start: 0.0,
            dt: 0.1,
        };
        let k = DMatrix::from_fn(2, 5, |i, j| 0.1 * (i + j) as f64 - 0.2);
        let out = ancillary_control(&xbar, &plan, 0, &k, &params).unwrap();
        assert_eq!(out.input, ubar);
        assert!(!out.saturated);
        let x = VehicleState::new(1.1, 1.9, 0.35, 9.5, 0.0);
        let zero = ancillary_control(&x, &plan, 0, &DMatrix::zeros(2, 5), &params).unwrap();
        assert_eq!(zero.input, ubar);
        assert!(matches!(ancillary_control(&x, &plan, 1, &k, &params), Err(TubeError::IndexOutOfRange { .. })));
        let big = ancillary_control(&x, &plan, 0, &(DMatrix::from_element(2, 5, 100.0)), &params).unwrap();
        assert!(big.saturated);
        assert!(big.input.within_bounds(&params));
    }

    #[test]
    fn config_validation() {
        let (q, r) = vehicle_weights();
        assert!(MpcConfig::new(1, 0.1, q.clone(), r.clone(), q.clone()).is_err());
        assert!(MpcConfig::new(5, 0.1, q.clone(), DMatrix::zeros(2, 2), q.clone()).is_err());
        assert!(MpcConfig::new(5, 0.1, -q.clone(), r, q).is_err());
    }
}
