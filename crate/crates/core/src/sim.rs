//! Deterministic discrete-event simulation of the dual-cycle control scheme.
//!
//! The plant is integrated at a fixed physics rate. A planner cycle reads the
//! state, predicts it over the delay bound, and produces a plan that becomes
//! available after a sampled computation latency. Plans are written into a
//! time-indexed command buffer that a faster pre-compensator executes through
//! an actuator-processing delay line.

use std::collections::VecDeque;
use std::io::Write;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::influence::{FilterConfig, FilterState, InfluenceError};
use crate::path::Path;
use crate::planb::{self, BlackBoxController, CompensationConfig, PlanBError};
use crate::polytope::{HPolytope, SupportFunction, Zonotope};
use crate::qp::WarmStart;
use crate::tubempc::{self, ConstraintSet, MpcConfig, ReferenceTrajectory, TubeError};
use crate::vehicle::{self, ControlInput, VehicleError, VehicleParams, VehicleState};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("command buffer does not cover t = {0}")]
    Underrun(f64),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("world: {0}")]
    World(String),
    #[error(transparent)]
    Tube(#[from] TubeError),
    #[error(transparent)]
    PlanB(#[from] PlanBError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One buffered command, valid on `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub t_start: f64,
    pub t_end: f64,
    pub ubar: ControlInput,
    /// Nominal state at `t_start`.
    pub xbar: VehicleState,
    pub gain: Rc<DMatrix<f64>>,
    /// State constraint the nominal state was planned against.
    pub region: Option<Rc<HPolytope>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandBuffer {
    entries: Vec<BufferEntry>,
}

impl CommandBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn end_time(&self) -> Option<f64> {
        self.entries.last().map(|e| e.t_end)
    }

    /// Replaces everything from `t0` on with consecutive entries of length
    /// `dt`. An entry straddling `t0` is cut at `t0`.
    pub fn splice(
        &mut self,
        t0: f64,
        dt: f64,
        xbar: &[VehicleState],
        ubar: &[ControlInput],
        gain: Rc<DMatrix<f64>>,
        regions: &[Rc<HPolytope>],
    ) {
        self.entries.retain(|e| e.t_start < t0);
        if let Some(last) = self.entries.last_mut() {
            if last.t_end > t0 {
                last.t_end = t0;
            }
        }
        for (k, u) in ubar.iter().enumerate() {
            self.entries.push(BufferEntry {
                t_start: t0 + k as f64 * dt,
                t_end: t0 + (k + 1) as f64 * dt,
                ubar: *u,
                xbar: xbar[k],
                gain: gain.clone(),
                region: regions.get(k).cloned(),
            });
        }
    }

    /// Entry with `t_start <= t < t_end`.
    pub fn lookup(&self, t: f64) -> Option<&BufferEntry> {
        let i = self.entries.partition_point(|e| e.t_end <= t);
        self.entries.get(i).filter(|e| e.t_start <= t)
    }

    /// True when `[from, to)` is covered without gaps.
    pub fn covers(&self, from: f64, to: f64) -> bool {
        let mut t = from;
        let mut i = self.entries.partition_point(|e| e.t_end <= from);
        while t < to {
            match self.entries.get(i) {
                Some(e) if e.t_start <= t => {
                    t = e.t_end;
                    i += 1;
                }
                _ => return false,
            }
        }
        true
    }

    /// Drops entries that ended at or before `t`.
    pub fn prune_before(&mut self, t: f64) {
        let i = self.entries.partition_point(|e| e.t_end <= t);
        self.entries.drain(..i);
    }

    /// Nominal state and input at time `t`: the entry's nominal state advanced
    /// by its own command to `t`.
    pub fn nominal_at(&self, t: f64, params: &VehicleParams) -> Option<(VehicleState, &BufferEntry)> {
        let e = self.lookup(t)?;
        let dt = t - e.t_start;
        let x = if dt > 0.0 {
            vehicle::step(&e.xbar, &e.ubar, dt, params).ok()?
        } else {
            e.xbar
        };
        Some((x, e))
    }

    /// Buffered feedforward commands over `[from, from + duration)` as a
    /// rollout schedule. Gaps hold the previous command.
    pub fn schedule(&self, from: f64, duration: f64, hold: ControlInput) -> Vec<(ControlInput, f64)> {
        let to = from + duration;
        let mut out = Vec::new();
        let mut t = from;
        let mut last = hold;
        let mut i = self.entries.partition_point(|e| e.t_end <= from);
        while t < to - 1e-12 {
            match self.entries.get(i) {
                Some(e) if e.t_start <= t + 1e-12 => {
                    let end = e.t_end.min(to);
                    if end > t {
                        out.push((e.ubar, end - t));
                    }
                    last = e.ubar;
                    t = end;
                    i += 1;
                }
                Some(e) => {
                    let end = e.t_start.min(to);
                    out.push((last, end - t));
                    t = end;
                }
                None => {
                    out.push((last, to - t));
                    t = to;
                }
            }
        }
        out
    }
}

/// Executes the buffer at time `t` from the (delay-aligned) state `x`:
/// `ubar + K (x - xbar)` using the active entry.
pub fn precompensator_tick(
    buffer: &CommandBuffer,
    x: &VehicleState,
    t: f64,
    params: &VehicleParams,
) -> Result<tubempc::AncillaryOutput, SimError> {
    let (xbar, e) = buffer.nominal_at(t, params).ok_or(SimError::Underrun(t))?;
    Ok(tubempc::ancillary_law(x, &xbar, &e.ubar, &e.gain, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatencySource {
    Constant { value: f64 },
    /// Samples are replayed in order and wrap around.
    Trace { samples: Vec<f64> },
    /// Log-normal with the given mean and log-space standard deviation.
    LogNormal { mean: f64, sigma_log: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayModel {
    /// Actuator processing delay [s].
    pub t_a: f64,
    pub latency: LatencySource,
}

impl DelayModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.t_a.is_finite() && self.t_a >= 0.0) {
            return Err(SimError::InvalidConfig(format!("t_a = {}", self.t_a)));
        }
        match &self.latency {
            LatencySource::Constant { value } if !(value.is_finite() && *value >= 0.0) => {
                Err(SimError::InvalidConfig(format!("constant latency {value}")))
            }
            LatencySource::Trace { samples } if samples.is_empty() || samples.iter().any(|s| !(s.is_finite() && *s >= 0.0)) => {
                Err(SimError::InvalidConfig("latency trace must be non-empty and non-negative".into()))
            }
            LatencySource::LogNormal { mean, sigma_log } if !(*mean > 0.0 && *sigma_log >= 0.0 && mean.is_finite() && sigma_log.is_finite()) => {
                Err(SimError::InvalidConfig("log-normal latency needs mean > 0, sigma_log >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn sampler(&self, seed: u64) -> LatencySampler {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        LatencySampler {
            source: self.latency.clone(),
            rng,
            index: 0,
        }
    }
}

pub struct LatencySampler {
    source: LatencySource,
    rng: ChaCha8Rng,
    index: usize,
}

impl LatencySampler {
    pub fn sample(&mut self) -> f64 {
        match &self.source {
            LatencySource::Constant { value } => *value,
            LatencySource::Trace { samples } => {
                let v = samples[self.index % samples.len()];
                self.index += 1;
                v
            }
            LatencySource::LogNormal { mean, sigma_log } => {
                let mu = mean.ln() - 0.5 * sigma_log * sigma_log;
                LogNormal::new(mu, *sigma_log).expect("validated").sample(&mut self.rng)
            }
        }
    }
}

/// How the planner accounts for computation and actuator delay.
#[derive(Debug, Clone, PartialEq)]
pub enum DelayCompensation {
    /// Delays are ignored: plans start at the measured state and are used as
    /// soon as they arrive.
    None,
    /// Fixed computation-time bound.
    ConstantBound(f64),
    /// Online bound from the latency filter. `initial` is used until the
    /// first latency has been measured.
    Influence { filter: FilterConfig, initial: f64 },
}

/// Tube MPC planner.
#[derive(Debug, Clone)]
pub struct PlanA {
    pub mpc: MpcConfig,
    pub disturbance: Zonotope,
    pub invariant: HPolytope,
    pub control: HPolytope,
    /// State constraint applied at every step in addition to the world's
    /// per-step regions.
    pub state: HPolytope,
}

/// Compensation wrapper around a black-box tracker. With `enabled` false the
/// tracker's command is applied directly.
pub struct PlanB {
    pub controller: Box<dyn BlackBoxController>,
    pub compensation: CompensationConfig,
    pub enabled: bool,
}

pub enum Controller {
    PlanA(PlanA),
    PlanB(PlanB),
}

/// Reference for one planner cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleReference {
    pub trajectory: ReferenceTrajectory,
    pub emergency: bool,
}

/// Everything scenario-specific the kernel needs.
pub trait World {
    fn path(&self) -> &Path;
    /// Reference of `horizon` steps starting from the predicted state `x` at
    /// `t0`, using only what can be observed at `now`.
    fn reference(&mut self, now: f64, t0: f64, x: &VehicleState, horizon: usize, dt: f64) -> Result<CycleReference, String>;
    /// One state constraint per reference state, seeded at the predicted
    /// state. An empty vector adds no constraints.
    fn regions(&mut self, now: f64, t0: f64, x: &VehicleState, reference: &ReferenceTrajectory, dt: f64) -> Result<Vec<HPolytope>, String>;
    /// Smallest distance between the vehicle footprint and any obstacle
    /// (negative inside), infinite without obstacles.
    fn clearance(&self, t: f64, x: &VehicleState) -> f64;
    fn cross_track(&self, x: &VehicleState) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub duration: f64,
    pub physics_rate: f64,
    pub precompensator_rate: f64,
    pub disturbance: Zonotope,
    /// Interval between disturbance kicks [s].
    pub disturbance_period: f64,
    pub compensation: DelayCompensation,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.physics_rate.is_finite() && self.physics_rate > 0.0) {
            return bad("physics rate must be positive");
        }
        if !(self.precompensator_rate > 0.0 && self.precompensator_rate <= self.physics_rate) {
            return bad("pre-compensator rate must be positive and at most the physics rate");
        }
        if !(self.disturbance_period.is_finite() && self.disturbance_period > 0.0) {
            return bad("disturbance period must be positive");
        }
        if self.disturbance.dim() != vehicle::STATE_DIM {
            return bad("disturbance must be five-dimensional");
        }
        match &self.compensation {
            DelayCompensation::ConstantBound(b) if !(b.is_finite() && *b >= 0.0) => bad("constant bound must be non-negative"),
            DelayCompensation::Influence { filter, initial } => {
                filter.validate()?;
                if !(initial.is_finite() && *initial >= 0.0) {
                    return bad("initial bound must be non-negative");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// One row per physics step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub t: f64,
    pub p_x: f64,
    pub p_y: f64,
    pub theta: f64,
    pub v: f64,
    pub delta_a: f64,
    pub accel: f64,
    pub delta_cmd: f64,
    /// Latest measured computation time.
    pub t_c: f64,
    /// Bound used by the latest completed cycle.
    pub t_hat_c: f64,
    pub bound_violated: u8,
    /// Smallest slack of the state against the region of the executing entry.
    pub slack: f64,
    pub clearance: f64,
    pub cross_track: f64,
    pub event: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleOutcome {
    Activated,
    Late,
    Infeasible,
}

/// One row per planner cycle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRecord {
    pub t_launch: f64,
    pub t_c: f64,
    pub t_hat_c: f64,
    pub outcome: CycleOutcome,
    pub emergency: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimLog {
    pub records: Vec<LogRecord>,
    pub cycles: Vec<CycleRecord>,
    /// Set when the run ended early on a hard controller failure.
    pub failure: Option<String>,
}

pub const LOG_HEADER: [&str; 15] = [
    "t",
    "p_x",
    "p_y",
    "theta",
    "v",
    "delta_a",
    "accel",
    "delta_cmd",
    "t_c",
    "t_hat_c",
    "bound_violated",
    "slack",
    "clearance",
    "cross_track",
    "event",
];

impl SimLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(r)?;
        }
        if self.records.is_empty() {
            wr.write_record(LOG_HEADER)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_cycles_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut wr = csv::Writer::from_writer(w);
        for c in &self.cycles {
            wr.serialize(c)?;
        }
        if self.cycles.is_empty() {
            wr.write_record(["t_launch", "t_c", "t_hat_c", "outcome", "emergency"])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn bound_violations(&self) -> usize {
        self.cycles.iter().filter(|c| c.outcome == CycleOutcome::Late).count()
    }
}

/// Uniform sample from a zonotope's generator box.
pub fn sample_zonotope<R: Rng>(z: &Zonotope, rng: &mut R) -> DVector<f64> {
    let xi = DVector::from_fn(z.num_generators(), |_, _| rng.gen_range(-1.0..=1.0));
    z.center() + z.generators() * xi
}

struct PlanPayload {
    t0: f64,
    dt: f64,
    xbar: Vec<VehicleState>,
    ubar: Vec<ControlInput>,
    gain: Rc<DMatrix<f64>>,
    regions: Vec<Rc<HPolytope>>,
}

enum CycleResult {
    Plan(PlanPayload),
    Infeasible(String),
}

struct Pending {
    arrival: u64,
    activation: u64,
    t_c: f64,
    t_hat_c: f64,
    late: bool,
    emergency: bool,
    result: CycleResult,
    t_launch: f64,
}

struct Kernel<'a> {
    params: &'a VehicleParams,
    dt_p: f64,
    buffer: CommandBuffer,
    // (apply tick, command), in tick order
    delay_line: VecDeque<(u64, ControlInput)>,
    applied: ControlInput,
    last_output: ControlInput,
    warm: Option<WarmStart>,
    precomp_every: u64,
    t_a_hat: f64,
}

impl Kernel<'_> {
    fn time(&self, tick: u64) -> f64 {
        tick as f64 * self.dt_p
    }

    fn ticks(&self, duration: f64) -> u64 {
        (duration / self.dt_p - 1e-9).ceil().max(0.0) as u64
    }

    /// Commands reaching the plant over `[t, t + duration)` from the delay line.
    fn in_flight(&self, tick: u64, duration: f64) -> Vec<(ControlInput, f64)> {
        let t = self.time(tick);
        let end = t + duration;
        let mut out = Vec::new();
        let mut cur = self.applied;
        let mut at = t;
        for &(k, u) in &self.delay_line {
            let tk = self.time(k).max(t);
            if tk >= end {
                break;
            }
            if tk > at {
                out.push((cur, tk - at));
                at = tk;
            }
            cur = u;
        }
        if end > at {
            out.push((cur, end - at));
        }
        out
    }

    fn predict(&self, x: &VehicleState, schedule: &[(ControlInput, f64)]) -> Result<VehicleState, VehicleError> {
        let schedule: Vec<_> = schedule.iter().copied().filter(|(_, d)| *d > 1e-12).collect();
        if schedule.is_empty() {
            return Ok(*x);
        }
        vehicle::rollout(x, &schedule, 0.01, self.params)
    }

    /// State expected `t_a_hat` after the command issued `ahead` ticks from
    /// now takes effect, with the pre-compensator closing the loop on the
    /// buffer and no disturbance.
    fn predict_ahead(&self, x: &VehicleState, tick: u64, ahead: u64) -> Result<VehicleState, VehicleError> {
        let t = self.time(tick);
        let mut state = self.predict(x, &self.in_flight(tick, self.t_a_hat))?;
        let end = tick + ahead;
        let first = tick.div_ceil(self.precomp_every) * self.precomp_every;
        let hold = self.delay_line.back().map(|c| c.1).unwrap_or(self.applied);
        state = self.predict(&state, &[(hold, self.time(first.min(end)) - t)])?;
        let mut last = self.last_output;
        let mut i = first;
        while i < end {
            let ti = self.time(i);
            let u = precompensator_tick(&self.buffer, &state, ti, self.params)
                .map(|o| o.input)
                .unwrap_or(last);
            last = u;
            let next = (i + self.precomp_every).min(end);
            state = self.predict(&state, &[(u, self.time(next) - ti)])?;
            i = next;
        }
        Ok(state)
    }

    fn plan_a(
        &mut self,
        plan: &PlanA,
        world: &mut dyn World,
        now: f64,
        t0: f64,
        x_pred: &VehicleState,
        s: usize,
    ) -> Result<(CycleResult, bool), SimError> {
        let mpc = &plan.mpc;
        let reference = world.reference(now, t0, x_pred, mpc.horizon, mpc.dt).map_err(SimError::World)?;
        let emergency = reference.emergency;
        let traj = reference.trajectory;
        let regions = world.regions(now, t0, x_pred, &traj, mpc.dt).map_err(SimError::World)?;
        let gain = tubempc::vehicle_gain(x_pred, &traj.controls[0], mpc, self.params)?;
        let sets = ConstraintSet::new(
            plan.state.clone(),
            plan.control.clone(),
            plan.disturbance.clone(),
            plan.invariant.clone(),
            gain.k.clone(),
        );
        let sets = match sets {
            Ok(s) => s,
            Err(e @ TubeError::TubeTooLarge(_)) => return Ok((CycleResult::Infeasible(e.to_string()), emergency)),
            Err(e) => return Err(e.into()),
        };
        let s = s.clamp(1, mpc.horizon);
        match tubempc::solve_delay_aware_staged(x_pred, &traj, &sets, &regions, s, mpc, self.params, self.warm.as_ref()) {
            Ok(sol) => {
                self.warm = Some(sol.warm_start);
                Ok((
                    CycleResult::Plan(PlanPayload {
                        t0,
                        dt: mpc.dt,
                        xbar: sol.plan.xbar,
                        ubar: sol.plan.ubar,
                        gain: Rc::new(gain.k),
                        regions: regions.into_iter().map(Rc::new).collect(),
                    }),
                    emergency,
                ))
            }
            Err(e @ (TubeError::Infeasible(_) | TubeError::MaxIter | TubeError::TubeTooLarge(_))) => {
                self.warm = None;
                Ok((CycleResult::Infeasible(e.to_string()), emergency))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn plan_b(&self, plan: &PlanB, world: &mut dyn World, t0: f64, x: &VehicleState) -> Result<CycleResult, SimError> {
        let zero = Rc::new(DMatrix::zeros(vehicle::INPUT_DIM, vehicle::STATE_DIM));
        let path = world.path();
        if !plan.enabled {
            let u = plan.controller.command(x, path);
            if !u.is_finite() {
                return Err(PlanBError::NonFiniteCommand { step: 0, state: *x, input: u }.into());
            }
            let u = u.saturate(self.params).0;
            return Ok(CycleResult::Plan(PlanPayload {
                t0,
                dt: 3600.0,
                xbar: vec![*x],
                ubar: vec![u],
                gain: zero,
                regions: Vec::new(),
            }));
        }
        let comp = &plan.compensation;
        let u_hat = planb::rollout_blackbox(plan.controller.as_ref(), x, path, comp.horizon, comp.dt, self.params)?;
        let steer: Vec<f64> = u_hat.iter().map(|u| u.delta_cmd).collect();
        let start = x.delta_a.clamp(-comp.delta_max, comp.delta_max);
        let steer = planb::compensate(&steer, start, comp)?.commands;
        let ubar: Vec<ControlInput> = u_hat.iter().zip(&steer).map(|(u, d)| ControlInput::new(u.accel, *d)).collect();
        let mut xbar = Vec::with_capacity(ubar.len());
        let mut xs = *x;
        for u in &ubar {
            xbar.push(xs);
            xs = vehicle::step(&xs, u, comp.dt, self.params)?;
        }
        Ok(CycleResult::Plan(PlanPayload {
            t0,
            dt: comp.dt,
            xbar,
            ubar,
            gain: zero,
            regions: Vec::new(),
        }))
    }
}

/// Runs one closed-loop simulation. Configuration errors are returned as
/// errors; controller failures during the run end it early with
/// `SimLog::failure` set.
pub fn run(
    params: &VehicleParams,
    controller: &Controller,
    delays: &DelayModel,
    world: &mut dyn World,
    x0: &VehicleState,
    cfg: &SimConfig,
    seed: u64,
) -> Result<SimLog, SimError> {
    params.validate()?;
    delays.validate()?;
    cfg.validate()?;
    if let Controller::PlanA(p) = controller {
        p.mpc.validate()?;
    }
    if let Controller::PlanB(p) = controller {
        p.compensation.validate()?;
    }
    let mut dist_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latency = delays.sampler(seed);
    let dt_p = 1.0 / cfg.physics_rate;
    let mut k = Kernel {
        params,
        dt_p,
        buffer: CommandBuffer::new(),
        delay_line: VecDeque::new(),
        applied: ControlInput::new(0.0, x0.delta_a),
        last_output: ControlInput::new(0.0, x0.delta_a),
        warm: None,
        precomp_every: ((cfg.physics_rate / cfg.precompensator_rate).round() as u64).max(1),
        t_a_hat: 0.0,
    };
    let total = (cfg.duration * cfg.physics_rate).round() as u64;
    let precomp_every = k.precomp_every;
    let dist_every = ((cfg.disturbance_period * cfg.physics_rate).round() as u64).max(1);
    let t_a_ticks = k.ticks(delays.t_a);
    let naive = matches!(cfg.compensation, DelayCompensation::None);
    // the planner's view of the actuator delay
    let t_a_hat = if naive { 0.0 } else { delays.t_a };
    k.t_a_hat = t_a_hat;
    let mut filter: Option<FilterState> = None;
    let mut log = SimLog::default();
    let mut x = *x0;

    // the vehicle starts already following a plan computed from x0
    let x_boot = k.predict_ahead(x0, 0, 0)?;
    let boot = match controller {
        Controller::PlanA(p) => {
            let s = (t_a_hat / p.mpc.dt - 1e-9).ceil().max(1.0) as usize;
            k.plan_a(p, world, 0.0, 0.0, &x_boot, s)?.0
        }
        Controller::PlanB(p) => k.plan_b(p, world, 0.0, &x_boot)?,
    };
    match boot {
        CycleResult::Plan(p) => k.buffer.splice(0.0, p.dt, &p.xbar, &p.ubar, p.gain, &p.regions),
        CycleResult::Infeasible(msg) => {
            log.failure = Some(format!("initial plan infeasible: {msg}"));
            return Ok(log);
        }
    }

    let mut pending: Option<Pending> = None;
    let mut next_trigger = 0u64;
    let (mut last_tc, mut last_bound) = (f64::NAN, f64::NAN);
    for tick in 0..total {
        let t = k.time(tick);
        let mut event = "";
        let mut violated = 0u8;

        if let Some(p) = pending.as_ref() {
            if p.arrival == tick {
                last_tc = p.t_c;
                last_bound = p.t_hat_c;
                if let DelayCompensation::Influence { filter: fc, .. } = &cfg.compensation {
                    filter = Some(match &filter {
                        Some(f) => f.update(p.t_c, fc)?,
                        None => FilterState::init(p.t_c, fc)?,
                    });
                }
                if p.late {
                    violated = 1;
                    event = "late";
                } else if let CycleResult::Infeasible(_) = p.result {
                    event = "infeasible";
                }
                if p.late || matches!(p.result, CycleResult::Infeasible(_)) {
                    let p = pending.take().unwrap();
                    let outcome = if p.late { CycleOutcome::Late } else { CycleOutcome::Infeasible };
                    log.cycles.push(CycleRecord {
                        t_launch: p.t_launch,
                        t_c: p.t_c,
                        t_hat_c: p.t_hat_c,
                        outcome,
                        emergency: p.emergency,
                    });
                    next_trigger = tick;
                }
            }
        }
        if let Some(p) = pending.as_ref() {
            if p.activation == tick {
                let p = pending.take().unwrap();
                if let CycleResult::Plan(plan) = &p.result {
                    k.buffer.splice(plan.t0, plan.dt, &plan.xbar, &plan.ubar, plan.gain.clone(), &plan.regions);
                }
                log.cycles.push(CycleRecord {
                    t_launch: p.t_launch,
                    t_c: p.t_c,
                    t_hat_c: p.t_hat_c,
                    outcome: CycleOutcome::Activated,
                    emergency: p.emergency,
                });
                if event.is_empty() {
                    event = if p.emergency { "emergency" } else { "activate" };
                }
                next_trigger = tick;
            }
        }

        if pending.is_none() && tick == next_trigger {
            let bound = match &cfg.compensation {
                DelayCompensation::None => 0.0,
                DelayCompensation::ConstantBound(b) => *b,
                DelayCompensation::Influence { filter: fc, initial } => match &filter {
                    Some(f) => f.predict_upper_bound(fc).max(0.0),
                    None => *initial,
                },
            };
            let ahead = k.ticks(bound);
            let t0 = k.time(tick + ahead);
            let t_d_hat = t0 - t + t_a_hat;
            let x_pred = match k.predict_ahead(&x, tick, ahead) {
                Ok(v) => v,
                Err(e) => {
                    log.failure = Some(format!("prediction failed: {e}"));
                    break;
                }
            };
            let outcome = match controller {
                Controller::PlanA(p) => {
                    let s = (t_d_hat / p.mpc.dt - 1e-9).ceil().max(1.0) as usize;
                    k.plan_a(p, world, t, t0, &x_pred, s)
                }
                Controller::PlanB(p) => k.plan_b(p, world, t0, &x_pred).map(|r| (r, false)),
            };
            let (result, emergency) = match outcome {
                Ok(r) => r,
                Err(e) => {
                    log.failure = Some(format!("controller failure at t = {t}: {e}"));
                    break;
                }
            };
            let t_c = latency.sample();
            let arrival = tick + k.ticks(t_c).max(1);
            let (late, activation) = if naive {
                (false, arrival)
            } else {
                (t_c > bound, tick + k.ticks(bound).max(1))
            };
            let activation = if late { u64::MAX } else { activation.max(arrival) };
            pending = Some(Pending {
                arrival,
                activation,
                t_c,
                t_hat_c: bound,
                late,
                emergency,
                result,
                t_launch: t,
            });
        }

        if tick % precomp_every == 0 {
            k.buffer.prune_before(t - 1.0);
            let x_hat = if t_a_hat > 0.0 {
                let sched = k.in_flight(tick, t_a_hat);
                k.predict(&x, &sched).unwrap_or(x)
            } else {
                x
            };
            let u = match precompensator_tick(&k.buffer, &x_hat, t, params) {
                Ok(out) => out.input,
                Err(_) => {
                    if event.is_empty() {
                        event = "underrun";
                    }
                    k.last_output
                }
            };
            k.last_output = u;
            k.delay_line.push_back((tick + t_a_ticks, u));
        }
        while let Some(&(at, u)) = k.delay_line.front() {
            if at > tick {
                break;
            }
            k.applied = u;
            k.delay_line.pop_front();
        }

        let slack = k
            .buffer
            .lookup(t)
            .and_then(|e| e.region.as_ref())
            .map(|r| {
                let xv = x.to_vector_d();
                (r.offsets() - r.normals() * xv).min()
            })
            .unwrap_or(f64::NAN);
        log.records.push(LogRecord {
            t,
            p_x: x.p_x,
            p_y: x.p_y,
            theta: x.theta,
            v: x.v,
            delta_a: x.delta_a,
            accel: k.applied.accel,
            delta_cmd: k.applied.delta_cmd,
            t_c: last_tc,
            t_hat_c: last_bound,
            bound_violated: violated,
            slack,
            clearance: world.clearance(t, &x),
            cross_track: world.cross_track(&x),
            event,
        });

        x = match vehicle::step(&x, &k.applied, dt_p, params) {
            Ok(v) => v,
            Err(e) => {
                log.failure = Some(format!("plant integration failed: {e}"));
                break;
            }
        };
        if (tick + 1) % dist_every == 0 {
            let w = sample_zonotope(&cfg.disturbance, &mut dist_rng);
            x = x.offset(&nalgebra::SVector::<f64, 5>::from_column_slice(w.as_slice()));
        }
    }
    Ok(log)
}
