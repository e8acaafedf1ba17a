//! Lateral quintic lattice replanner in path coordinates.

use serde::{Deserialize, Serialize};

use super::geometry::ObstacleBox;
use super::world::tangent;
use crate::path::Path;
use crate::tubempc::ReferenceTrajectory;
use crate::vehicle::{normalize_angle, VehicleParams, VehicleState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrenetConfig {
    /// Candidate lateral offsets from the lane center [m], left positive.
    pub offsets: Vec<f64>,
    /// Candidate durations of the lateral transition [s].
    pub maneuver_times: Vec<f64>,
    /// Look-ahead used for collision scoring [s].
    pub eval_time: f64,
    pub eval_dt: f64,
    /// Clearance below which the collision penalty starts [m].
    pub clearance: f64,
    pub vehicle_radius: f64,
    pub w_jerk: f64,
    pub w_offset: f64,
    pub w_collision: f64,
    /// Longitudinal acceleration limit of the speed profile [m/s^2].
    pub accel: f64,
    /// Deceleration of the emergency profile [m/s^2].
    pub emergency_decel: f64,
}

impl Default for FrenetConfig {
    fn default() -> Self {
        Self {
            offsets: vec![-3.5, -1.75, 0.0, 1.75, 3.5],
            maneuver_times: vec![1.5, 3.0],
            eval_time: 4.0,
            eval_dt: 0.1,
            clearance: 0.5,
            vehicle_radius: 1.0,
            w_jerk: 1.0,
            w_offset: 0.5,
            w_collision: 1e4,
            accel: 1.5,
            emergency_decel: 8.0,
        }
    }
}

/// Quintic `d(t)` with prescribed value, slope and curvature at both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quintic {
    c: [f64; 6],
    duration: f64,
}

impl Quintic {
    pub fn new(start: [f64; 3], end: [f64; 3], duration: f64) -> Self {
        let [d0, v0, a0] = start;
        let [d1, v1, a1] = end;
        let t = duration;
        let (t2, t3) = (t * t, t * t * t);
        let (t4, t5) = (t3 * t, t3 * t2);
        // remaining three coefficients from the end conditions
        let r0 = d1 - (d0 + v0 * t + 0.5 * a0 * t2);
        let r1 = v1 - (v0 + a0 * t);
        let r2 = a1 - a0;
        let c3 = (10.0 * r0 - 4.0 * r1 * t + 0.5 * r2 * t2) / t3;
        let c4 = (-15.0 * r0 + 7.0 * r1 * t - r2 * t2) / t4;
        let c5 = (6.0 * r0 - 3.0 * r1 * t + 0.5 * r2 * t2) / t5;
        Self {
            c: [d0, v0, 0.5 * a0, c3, c4, c5],
            duration,
        }
    }

    /// Value and first two derivatives; held constant after the end.
    pub fn eval(&self, t: f64) -> [f64; 3] {
        if t >= self.duration {
            let e = self.eval_poly(self.duration);
            return [e[0], 0.0, 0.0];
        }
        self.eval_poly(t.max(0.0))
    }

    fn eval_poly(&self, t: f64) -> [f64; 3] {
        let c = &self.c;
        let d = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
        let v = c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
        let a = 2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]));
        [d, v, a]
    }

    /// Integral of the squared third derivative over the transition.
    pub fn jerk_cost(&self) -> f64 {
        let [_, _, _, c3, c4, c5] = self.c;
        // d''' = 6 c3 + 24 c4 t + 60 c5 t^2
        let (a, b, c) = (6.0 * c3, 24.0 * c4, 60.0 * c5);
        let t = self.duration;
        a * a * t + a * b * t * t + (b * b + 2.0 * a * c) * t.powi(3) / 3.0 + b * c * t.powi(4) / 2.0 + c * c * t.powi(5) / 5.0
    }
}

/// Speed profile ramping towards `target` with limited acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SpeedProfile {
    v0: f64,
    target: f64,
    accel: f64,
}

impl SpeedProfile {
    /// Distance and speed after `t` seconds.
    fn at(&self, t: f64) -> (f64, f64) {
        let dv = self.target - self.v0;
        if self.accel <= 0.0 || dv == 0.0 {
            return (self.v0 * t, self.v0);
        }
        let ramp = dv.abs() / self.accel;
        let a = self.accel * dv.signum();
        if t <= ramp {
            (self.v0 * t + 0.5 * a * t * t, self.v0 + a * t)
        } else {
            (self.v0 * ramp + 0.5 * a * ramp * ramp + self.target * (t - ramp), self.target)
        }
    }
}

/// One scored lattice candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub offset: f64,
    pub maneuver_time: f64,
    pub cost: f64,
    pub min_clearance: f64,
    pub colliding: bool,
}

struct Start {
    s0: f64,
    d: [f64; 3],
    v: f64,
}

fn frenet_start(x: &VehicleState, lane: &Path) -> Start {
    let proj = lane.project([x.p_x, x.p_y]);
    let rel = normalize_angle(x.theta - tangent(lane, proj.s));
    Start {
        s0: proj.s,
        d: [proj.lateral, x.v * rel.sin(), 0.0],
        v: x.v.max(0.0),
    }
}

fn frenet_point(lane: &Path, s: f64, d: f64) -> [f64; 2] {
    let p = lane.point_at(s);
    let h = tangent(lane, s);
    [p[0] - d * h.sin(), p[1] + d * h.cos()]
}

fn clearance_at(obstacles: &[ObstacleBox], t: f64, p: [f64; 2], radius: f64) -> f64 {
    obstacles
        .iter()
        .map(|o| o.at(t).signed_distance(p) - radius)
        .fold(f64::INFINITY, f64::min)
}

/// Scores every lateral offset of the lattice.
#[allow(clippy::too_many_arguments)]
pub fn score_lattice(
    current: &VehicleState,
    lane: &Path,
    obstacles: &[ObstacleBox],
    t: f64,
    speed: f64,
    cfg: &FrenetConfig,
) -> Vec<Candidate> {
    let start = frenet_start(current, lane);
    let profile = SpeedProfile {
        v0: start.v,
        target: speed,
        accel: cfg.accel,
    };
    let steps = (cfg.eval_time / cfg.eval_dt).round() as usize;
    let mut out = Vec::with_capacity(cfg.offsets.len() * cfg.maneuver_times.len());
    for &maneuver_time in &cfg.maneuver_times {
        for &offset in &cfg.offsets {
            let q = Quintic::new(start.d, [offset, 0.0, 0.0], maneuver_time);
            let mut min_c = f64::INFINITY;
            let mut penalty = 0.0;
            for k in 0..=steps {
                let tau = k as f64 * cfg.eval_dt;
                let (ds, _) = profile.at(tau);
                let p = frenet_point(lane, start.s0 + ds, q.eval(tau)[0]);
                let c = clearance_at(obstacles, t + tau, p, cfg.vehicle_radius);
                min_c = min_c.min(c);
                let short = (cfg.clearance - c).max(0.0);
                penalty += short * short;
            }
            out.push(Candidate {
                offset,
                maneuver_time,
                cost: cfg.w_jerk * q.jerk_cost() + cfg.w_offset * offset * offset + cfg.w_collision * penalty,
                min_clearance: min_c,
                colliding: min_c <= 0.0,
            });
        }
    }
    out
}

/// Lowest cost wins; near-equal costs prefer the smaller offset, then the left
/// one, then the slower maneuver.
pub fn select_candidate(candidates: &[Candidate]) -> Option<&Candidate> {
    candidates.iter().filter(|c| !c.colliding).min_by(|a, b| {
        let tol = 1e-9 * (1.0 + a.cost.abs().max(b.cost.abs()));
        if (a.cost - b.cost).abs() > tol {
            a.cost.total_cmp(&b.cost)
        } else if (a.offset.abs() - b.offset.abs()).abs() > 1e-12 {
            a.offset.abs().total_cmp(&b.offset.abs())
        } else if a.offset != b.offset {
            b.offset.total_cmp(&a.offset)
        } else {
            b.maneuver_time.total_cmp(&a.maneuver_time)
        }
    })
}

/// Best lattice candidate sampled at the planner's resolution. The flag is set
/// when every candidate collides and the emergency braking profile along the
/// current offset is returned instead.
#[allow(clippy::too_many_arguments)]
pub fn frenet_replan(
    current: &VehicleState,
    lane: &Path,
    obstacles: &[ObstacleBox],
    t: f64,
    horizon: usize,
    dt: f64,
    speed: f64,
    cfg: &FrenetConfig,
    params: &VehicleParams,
) -> Result<(ReferenceTrajectory, bool), String> {
    if !current.is_finite() {
        return Err("current state is not finite".into());
    }
    let start = frenet_start(current, lane);
    if cfg.offsets.is_empty() || cfg.maneuver_times.iter().any(|m| !(*m > 0.0)) || cfg.maneuver_times.is_empty() {
        return Err("lattice needs offsets and positive maneuver times".into());
    }
    let hold_time = cfg.maneuver_times.iter().copied().fold(0.0, f64::max);
    let candidates = score_lattice(current, lane, obstacles, t, speed, cfg);
    let (lateral, profile, emergency) = match select_candidate(&candidates) {
        Some(c) => (
            Quintic::new(start.d, [c.offset, 0.0, 0.0], c.maneuver_time),
            SpeedProfile {
                v0: start.v,
                target: speed,
                accel: cfg.accel,
            },
            false,
        ),
        None => (
            Quintic::new(start.d, [start.d[0], 0.0, 0.0], hold_time),
            SpeedProfile {
                v0: start.v,
                target: 0.0,
                accel: cfg.emergency_decel,
            },
            true,
        ),
    };
    let mut states = Vec::with_capacity(horizon + 1);
    let mut theta_prev = current.theta;
    for k in 0..=horizon {
        let tau = k as f64 * dt;
        let (ds, v) = profile.at(tau);
        let s = start.s0 + ds;
        let [d, dd, ddd] = lateral.eval(tau);
        let p = frenet_point(lane, s, d);
        let vs = v.max(0.5);
        let heading = tangent(lane, s) + (dd / vs).atan();
        let theta = theta_prev + normalize_angle(heading - theta_prev);
        theta_prev = theta;
        let kappa = lane.curvature_at(s, 2.0) + ddd / (vs * vs);
        let delta = (kappa * params.wheelbase / params.steer_ratio).atan().clamp(-params.delta_max, params.delta_max);
        states.push(VehicleState::new(p[0], p[1], theta, v, delta));
    }
    let traj = ReferenceTrajectory::from_states(states, dt, params).map_err(|e| e.to_string())?;
    Ok((traj, emergency))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lane() -> Path {
        Path::straight([0.0, 0.0], 0.0, 400.0, 5.0).unwrap()
    }

    #[test]
    fn quintic_meets_boundary_conditions() {
        let q = Quintic::new([0.5, -0.2, 0.1], [3.5, 0.0, 0.0], 3.0);
        let s = q.eval(0.0);
        assert_abs_diff_eq!(s[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], -0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(s[2], 0.1, epsilon = 1e-12);
        let e = q.eval_poly(3.0);
        assert_abs_diff_eq!(e[0], 3.5, epsilon = 1e-10);
        assert_abs_diff_eq!(e[1], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e[2], 0.0, epsilon = 1e-10);
        // numeric integral of the squared jerk
        let n = 30_000;
        let h = 3.0 / n as f64;
        let jerk = |t: f64| (q.eval_poly(t + h)[2] - q.eval_poly(t - h)[2]) / (2.0 * h);
        let num: f64 = (0..n).map(|i| jerk((i as f64 + 0.5) * h).powi(2) * h).sum();
        assert!((num - q.jerk_cost()).abs() < 1e-4 * q.jerk_cost());
    }

    #[test]
    fn empty_road_keeps_centerline() {
        let x = VehicleState::new(10.0, 0.0, 0.0, 10.0, 0.0);
        let params = VehicleParams::default();
        let (r, emergency) = frenet_replan(&x, &lane(), &[], 0.0, 15, 0.1, 10.0, &FrenetConfig::default(), &params).unwrap();
        assert!(!emergency);
        for s in &r.states {
            assert_abs_diff_eq!(s.p_y, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(s.theta, 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(r.states[15].p_x, 25.0, epsilon = 1e-9);
    }

    #[test]
    fn blocked_lane_picks_clear_offset() {
        let x = VehicleState::new(0.0, 0.0, 0.0, 10.0, 0.0);
        let cfg = FrenetConfig::default();
        let obstacles = [ObstacleBox::new([30.0, 0.0], [2.5, 1.0], 0.0)];
        let cands = score_lattice(&x, &lane(), &obstacles, 0.0, 10.0, &cfg);
        let best = select_candidate(&cands).unwrap();
        assert!(best.offset != 0.0);
        // exhaustive oracle: no other candidate is cheaper
        assert!(cands.iter().filter(|c| !c.colliding).all(|c| c.cost >= best.cost));
        let params = VehicleParams::default();
        let (r, emergency) = frenet_replan(&x, &lane(), &obstacles, 0.0, 40, 0.1, 10.0, &cfg, &params).unwrap();
        assert!(!emergency);
        // dense check of the returned path against the obstacle
        for w in r.states.windows(2) {
            for i in 0..=20 {
                let a = i as f64 / 20.0;
                let p = [w[0].p_x + a * (w[1].p_x - w[0].p_x), w[0].p_y + a * (w[1].p_y - w[0].p_y)];
                assert!(obstacles[0].signed_distance(p) - cfg.vehicle_radius > cfg.clearance);
            }
        }
    }

    #[test]
    fn symmetric_obstacles_break_ties_left() {
        let x = VehicleState::new(0.0, 0.0, 0.0, 10.0, 0.0);
        let cfg = FrenetConfig {
            offsets: vec![-3.5, 0.0, 3.5],
            ..FrenetConfig::default()
        };
        let obstacles = [ObstacleBox::new([30.0, 0.0], [2.5, 1.0], 0.0)];
        let cands = score_lattice(&x, &lane(), &obstacles, 0.0, 10.0, &cfg);
        assert_eq!(select_candidate(&cands).unwrap().offset, 3.5);
        let again = score_lattice(&x, &lane(), &obstacles, 0.0, 10.0, &cfg);
        assert_eq!(cands, again);
    }

    #[test]
    fn all_blocked_triggers_emergency() {
        let x = VehicleState::new(0.0, 0.0, 0.0, 10.0, 0.0);
        let cfg = FrenetConfig::default();
        let wall = [ObstacleBox::new([12.0, 0.0], [1.0, 20.0], 0.0)];
        let params = VehicleParams::default();
        let (r, emergency) = frenet_replan(&x, &lane(), &wall, 0.0, 15, 0.1, 10.0, &cfg, &params).unwrap();
        assert!(emergency);
        assert!(r.states.windows(2).all(|w| w[1].v <= w[0].v));
        assert!(r.states[10].v < 3.0);
    }
}
