//! Simulation world built from a scenario: reference generation, per-step
//! obstacle-free regions and safety measurements.

use super::frenet::{frenet_replan, FrenetConfig};
use super::geometry::{carve_along, ObstacleBox};
use crate::path::Path;
use crate::polytope::HPolytope;
use crate::sim::{CycleReference, World};
use crate::tubempc::ReferenceTrajectory;
use crate::vehicle::{normalize_angle, VehicleParams, VehicleState, STATE_DIM};

/// Reference states along `path` starting at the projection of `x`.
///
/// Speed moves from `x.v` towards `speed` with at most `accel` per second and
/// steering follows the path curvature.
pub fn reference_along_path(
    path: &Path,
    x: &VehicleState,
    horizon: usize,
    dt: f64,
    speed: f64,
    accel: f64,
    params: &VehicleParams,
) -> Result<ReferenceTrajectory, String> {
    let proj = path.project([x.p_x, x.p_y]);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut s = proj.s;
    let mut v = x.v.max(0.0);
    let mut theta_prev = x.theta;
    for k in 0..=horizon {
        let p = path.point_at(s);
        let heading = tangent(path, s);
        let theta = theta_prev + normalize_angle(heading - theta_prev);
        theta_prev = theta;
        let kappa = path.curvature_at(s, CURVATURE_SPAN);
        let delta = (kappa * params.wheelbase / params.steer_ratio).atan().clamp(-params.delta_max, params.delta_max);
        states.push(VehicleState::new(p[0], p[1], theta, v, delta));
        if k < horizon {
            let dv = (speed - v).clamp(-accel * dt, accel * dt);
            s += (v + 0.5 * dv) * dt;
            v += dv;
        }
    }
    ReferenceTrajectory::from_states(states, dt, params).map_err(|e| e.to_string())
}

const CURVATURE_SPAN: f64 = 2.0;

/// Heading of the chord around `s`, smoother than the segment heading.
pub(crate) fn tangent(path: &Path, s: f64) -> f64 {
    let a = path.point_at(s - 0.5);
    let b = path.point_at(s + 0.5);
    if (b[0] - a[0]).hypot(b[1] - a[1]) < 1e-9 {
        path.heading_at(s)
    } else {
        (b[1] - a[1]).atan2(b[0] - a[0])
    }
}

/// World for the shipped scenarios: a reference path, optional obstacles and
/// road bounds, and optionally a lattice replanner.
#[derive(Debug, Clone)]
pub struct ScenarioWorld {
    pub path: Path,
    pub speed: f64,
    pub accel: f64,
    pub obstacles: Vec<ObstacleBox>,
    /// Road bounds on the position.
    pub bounds: Option<HPolytope>,
    /// Obstacles are inflated by this radius for planning and clearance.
    pub vehicle_radius: f64,
    pub params: VehicleParams,
    pub replanner: Option<FrenetConfig>,
}

impl ScenarioWorld {
    pub fn new(path: Path, speed: f64, params: VehicleParams) -> Self {
        Self {
            path,
            speed,
            accel: 1.5,
            obstacles: Vec::new(),
            bounds: None,
            vehicle_radius: 1.0,
            params,
            replanner: None,
        }
    }

    fn observed(&self, now: f64) -> Vec<ObstacleBox> {
        self.obstacles.iter().map(|o| o.observed(now)).collect()
    }

    fn bounds2(&self) -> HPolytope {
        self.bounds
            .clone()
            .unwrap_or_else(|| HPolytope::from_box(&[-1e6, -1e6], &[1e6, 1e6]).expect("finite box"))
    }
}

impl World for ScenarioWorld {
    fn path(&self) -> &Path {
        &self.path
    }

    fn reference(&mut self, now: f64, t0: f64, x: &VehicleState, horizon: usize, dt: f64) -> Result<CycleReference, String> {
        if let Some(cfg) = &self.replanner {
            let seen = self.observed(now);
            let (trajectory, emergency) = frenet_replan(x, &self.path, &seen, t0 - now, horizon, dt, self.speed, cfg, &self.params)?;
            return Ok(CycleReference { trajectory, emergency });
        }
        let trajectory = reference_along_path(&self.path, x, horizon, dt, self.speed, self.accel, &self.params)?;
        Ok(CycleReference {
            trajectory,
            emergency: false,
        })
    }

    fn regions(&mut self, now: f64, t0: f64, x: &VehicleState, reference: &ReferenceTrajectory, dt: f64) -> Result<Vec<HPolytope>, String> {
        if self.obstacles.is_empty() && self.bounds.is_none() {
            return Ok(Vec::new());
        }
        let bounds = self.bounds2();
        let seed = [x.p_x, x.p_y];
        let ahead: Vec<[f64; 2]> = reference.states.iter().map(|r| [r.p_x, r.p_y]).collect();
        let seen = self.observed(now);
        let mut out: Vec<HPolytope> = Vec::with_capacity(reference.states.len());
        for k in 0..reference.states.len() {
            let tk = t0 - now + k as f64 * dt;
            let obstacles: Vec<ObstacleBox> = seen.iter().map(|o| o.at(tk).inflated(self.vehicle_radius)).collect();
            let region = match carve_along(seed, &ahead, &obstacles, &bounds) {
                Ok(r) => r,
                Err(_) => match out.last() {
                    Some(prev) => {
                        out.push(prev.clone());
                        continue;
                    }
                    None => bounds.clone(),
                },
            };
            out.push(region.lift(STATE_DIM, &[0, 1]).map_err(|e| e.to_string())?);
        }
        Ok(out)
    }

    fn clearance(&self, t: f64, x: &VehicleState) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.at(t).signed_distance([x.p_x, x.p_y]) - self.vehicle_radius)
            .fold(f64::INFINITY, f64::min)
    }

    fn cross_track(&self, x: &VehicleState) -> f64 {
        self.path.project([x.p_x, x.p_y]).lateral
    }
}
