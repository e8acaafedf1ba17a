//! Running a scenario under one of the delay-handling arms and writing its
//! outputs.

use std::fmt;
use std::fs;
use std::path::Path as FsPath;
use std::str::FromStr;

use thiserror::Error;

use super::config::{ConfigError, ControllerSpec, Scenario};
use super::metrics::Metrics;
use super::plot::{Plot, Series};
use super::setup::build_plan_a;
use super::world::ScenarioWorld;
use crate::influence::InfluenceError;
use crate::path::{Path, PathError};
use crate::planb::{CompensationConfig, PurePursuit};
use crate::polytope::{HPolytope, PolytopeError, Zonotope};
use crate::sim::{self, Controller, DelayCompensation, PlanA, PlanB, SimConfig, SimError, SimLog};
use crate::tubempc::TubeError;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("unknown scenario {0:?}")]
    Unknown(String),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error("planner setup: {0}")]
    Tube(#[from] TubeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the computation delay is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    /// Delays ignored. On the closed track this is the bare pure pursuit.
    None,
    /// Fixed bound from the scenario file.
    Constant,
    /// Online bound from the latency filter.
    Influence,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::None, Arm::Constant, Arm::Influence];

    pub fn name(self) -> &'static str {
        match self {
            Arm::None => "none",
            Arm::Constant => "constant",
            Arm::Influence => "influence",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown arm {s:?}, expected none, constant or influence"))
    }
}

/// A validated scenario with its expensive parts (the tube planner) built
/// once, ready to be simulated under any arm and seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub path: Path,
    pub plan_a: Option<PlanA>,
}

impl Prepared {
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        let path = scenario.path.build()?;
        let plan_a = match &scenario.controller {
            ControllerSpec::TubeMpc { horizon, dt, grid } => Some(build_plan_a(
                &scenario.vehicle,
                *horizon,
                *dt,
                scenario.disturbance,
                (grid[0], grid[1], grid[2]),
            )?),
            ControllerSpec::PurePursuit { .. } => None,
        };
        Ok(Self { scenario, path, plan_a })
    }

    pub fn from_toml(src: &str) -> Result<Self, ScenarioError> {
        Self::new(Scenario::from_toml(src)?)
    }

    pub fn world(&self) -> Result<ScenarioWorld, ScenarioError> {
        let s = &self.scenario;
        let mut w = ScenarioWorld::new(self.path.clone(), s.speed, s.vehicle);
        w.accel = s.reference_accel;
        w.obstacles = s.obstacles.clone();
        w.vehicle_radius = s.vehicle_radius;
        w.replanner = s.replanner.clone();
        if let Some([x0, y0, x1, y1]) = s.road {
            w.bounds = Some(HPolytope::from_box(&[x0, y0], &[x1, y1])?);
        }
        Ok(w)
    }

    pub fn controller(&self, arm: Arm) -> Controller {
        let s = &self.scenario;
        match (&s.controller, &self.plan_a) {
            (ControllerSpec::TubeMpc { .. }, Some(plan)) => Controller::PlanA(plan.clone()),
            (ControllerSpec::PurePursuit { lookahead, horizon, dt }, _) => Controller::PlanB(PlanB {
                controller: Box::new(PurePursuit::new(*lookahead, s.speed, s.vehicle)),
                compensation: CompensationConfig::new(*horizon, *dt, &s.vehicle),
                enabled: arm != Arm::None,
            }),
            (ControllerSpec::TubeMpc { .. }, None) => unreachable!("tube planner is built in Prepared::new"),
        }
    }

    pub fn compensation(&self, arm: Arm) -> DelayCompensation {
        let a = &self.scenario.arms;
        match arm {
            Arm::None => DelayCompensation::None,
            Arm::Constant => DelayCompensation::ConstantBound(a.constant_bound),
            Arm::Influence => DelayCompensation::Influence {
                filter: a.filter,
                initial: a.influence_initial,
            },
        }
    }

    pub fn sim_config(&self, arm: Arm) -> Result<SimConfig, ScenarioError> {
        let s = &self.scenario;
        Ok(SimConfig {
            duration: s.duration,
            physics_rate: s.timing.physics_rate,
            precompensator_rate: s.timing.precompensator_rate,
            disturbance: Zonotope::symmetric_box(&s.disturbance)?,
            disturbance_period: s.timing.disturbance_period,
            compensation: self.compensation(arm),
        })
    }

    pub fn simulate(&self, arm: Arm, seed: u64) -> Result<SimLog, ScenarioError> {
        let s = &self.scenario;
        let mut world = self.world()?;
        let cfg = self.sim_config(arm)?;
        log::debug!("{}: arm {arm}, seed {seed}", s.name);
        Ok(sim::run(
            &s.vehicle,
            &self.controller(arm),
            &s.delays,
            &mut world,
            &s.initial_state(),
            &cfg,
            seed,
        )?)
    }

    /// Vehicle track against the reference path and the obstacles at the start
    /// and at the end of the run.
    pub fn path_plot(&self, log: &SimLog) -> Plot {
        let mut plot = Plot::new(format!("{} trajectory", self.scenario.name), "x [m]", "y [m]");
        plot.equal_axes = true;
        let mut reference = Series::new("reference", self.path.points().to_vec());
        if self.path.is_closed() {
            reference.points.pop();
            reference = reference.closed();
        }
        plot = plot.with(reference);
        plot = plot.with(Series::new(
            "vehicle",
            log.records.iter().step_by(10).map(|r| [r.p_x, r.p_y]).collect(),
        ));
        let t_end = log.records.last().map_or(0.0, |r| r.t);
        for (i, ob) in self.scenario.obstacles.iter().enumerate() {
            plot = plot.with(Series::new(format!("obstacle {i}"), ob.corners().to_vec()).closed());
            if ob.motion.is_some() {
                plot = plot.with(Series::new(format!("obstacle {i} at end"), ob.at(t_end).corners().to_vec()).closed());
            }
        }
        plot
    }

    /// Measured computation time against the bound each cycle planned with.
    pub fn latency_plot(&self, log: &SimLog) -> Plot {
        Plot::new(format!("{} computation time", self.scenario.name), "t [s]", "seconds")
            .with(Series::new("t_c", log.cycles.iter().map(|c| [c.t_launch, c.t_c]).collect()))
            .with(Series::new("bound", log.cycles.iter().map(|c| [c.t_launch, c.t_hat_c]).collect()))
    }

    /// Writes `simlog.csv`, `cycles.csv`, `metrics.json` and the plots into
    /// `out`.
    pub fn write_outputs(&self, log: &SimLog, out: &FsPath) -> Result<Metrics, ScenarioError> {
        fs::create_dir_all(out)?;
        log.write_csv(fs::File::create(out.join("simlog.csv"))?)?;
        log.write_cycles_csv(fs::File::create(out.join("cycles.csv"))?)?;
        let metrics = Metrics::from_log(log);
        fs::write(out.join("metrics.json"), metrics.to_json())?;
        let path = self.path_plot(log);
        fs::write(out.join("path.svg"), path.to_svg())?;
        fs::write(out.join("path.dat"), path.to_gnuplot())?;
        let lat = self.latency_plot(log);
        fs::write(out.join("latency.svg"), lat.to_svg())?;
        fs::write(out.join("latency.dat"), lat.to_gnuplot())?;
        Ok(metrics)
    }
}

/// Simulates `scenario` under `arm` and writes all outputs into `out`.
pub fn run_scenario(scenario: Scenario, arm: Arm, seed: u64, out: &FsPath) -> Result<Metrics, ScenarioError> {
    let prepared = Prepared::new(scenario)?;
    let log = prepared.simulate(arm, seed)?;
    prepared.write_outputs(&log, out)
}
