//! Scenario files: one TOML document per scenario with every physical
//! parameter spelled out.
//!
//! Errors carry the 1-based line of the offending key when it can be found.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::frenet::FrenetConfig;
use super::geometry::ObstacleBox;
use crate::influence::FilterConfig;
use crate::path::{Path, PathError};
use crate::sim::{DelayModel, LatencySource};
use crate::vehicle::{VehicleParams, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    StaticObstacle,
    Overtaking,
    ClosedTrack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    Straight {
        start: [f64; 2],
        heading: f64,
        length: f64,
        spacing: f64,
    },
    Circle {
        center: [f64; 2],
        radius: f64,
        segments: usize,
    },
    /// Straight line along x that moves sideways by `offset` over `shift_out`
    /// and returns over `shift_back` (both `[x_start, x_end]`), with a smooth
    /// quintic blend.
    LaneShift {
        length: f64,
        spacing: f64,
        offset: f64,
        shift_out: [f64; 2],
        shift_back: [f64; 2],
    },
    Waypoints {
        points: Vec<[f64; 2]>,
        #[serde(default)]
        closed: bool,
    },
}

fn smoothstep(x: f64, [a, b]: [f64; 2]) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

impl PathSpec {
    pub fn build(&self) -> Result<Path, PathError> {
        match self {
            PathSpec::Straight {
                start,
                heading,
                length,
                spacing,
            } => Path::straight(*start, *heading, *length, *spacing),
            PathSpec::Circle { center, radius, segments } => Path::circle(*center, *radius, *segments),
            PathSpec::LaneShift {
                length,
                spacing,
                offset,
                shift_out,
                shift_back,
            } => {
                let n = (length / spacing).ceil().max(1.0) as usize;
                let pts = (0..=n)
                    .map(|i| {
                        let x = length * i as f64 / n as f64;
                        [x, offset * (smoothstep(x, *shift_out) - smoothstep(x, *shift_back))]
                    })
                    .collect();
                Path::new(pts, false)
            }
            PathSpec::Waypoints { points, closed } => Path::new(points.clone(), *closed),
        }
    }

    fn is_closed(&self) -> bool {
        matches!(self, PathSpec::Circle { .. } | PathSpec::Waypoints { closed: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    /// Delay-aware tube MPC.
    TubeMpc { horizon: usize, dt: f64, grid: [usize; 3] },
    /// Pure pursuit, wrapped by the delay compensation unless the arm is
    /// `none`.
    PurePursuit {
        lookahead: f64,
        /// Compensation window in steps of `dt`.
        horizon: usize,
        dt: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub physics_rate: f64,
    pub precompensator_rate: f64,
    /// Interval between disturbance kicks [s].
    pub disturbance_period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arms {
    /// Computation-time bound of the `constant` arm [s].
    pub constant_bound: f64,
    /// Bound used by the `influence` arm before its first measurement [s].
    pub influence_initial: f64,
    pub filter: FilterConfig,
}

/// Rectangle `[x_min, y_min, x_max, y_max]` the vehicle must stay in.
pub type RoadBounds = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    pub duration: f64,
    /// Target speed of the reference [m/s].
    pub speed: f64,
    /// Acceleration limit of the reference speed profile [m/s^2].
    pub reference_accel: f64,
    /// Radius by which obstacles are inflated for planning and clearance [m].
    pub vehicle_radius: f64,
    /// `[p_x, p_y, theta, v, delta_a]`
    pub initial: [f64; 5],
    pub vehicle: VehicleParams,
    pub timing: Timing,
    pub delays: DelayModel,
    /// Half-widths of the additive state disturbance box.
    pub disturbance: [f64; 5],
    pub path: PathSpec,
    #[serde(default)]
    pub road: Option<RoadBounds>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleBox>,
    pub controller: ControllerSpec,
    #[serde(default)]
    pub replanner: Option<FrenetConfig>,
    pub arms: Arms,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Syntax { line: Option<usize>, msg: String },
    Invalid { line: Option<usize>, key: String, msg: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line: Some(l), msg } => write!(f, "line {l}: {msg}"),
            ConfigError::Syntax { line: None, msg } => write!(f, "{msg}"),
            ConfigError::Invalid { line: Some(l), key, msg } => write!(f, "line {l}: `{key}`: {msg}"),
            ConfigError::Invalid { line: None, key, msg } => write!(f, "`{key}`: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Syntax { line, .. } | ConfigError::Invalid { line, .. } => *line,
        }
    }
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Maps dotted key paths (`obstacles.1.motion.decel`) to the line that sets
/// them. Array-of-table entries are numbered from zero.
fn key_lines(src: &str) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut table: Vec<String> = Vec::new();
    let resolve = |parts: &[&str], counts: &HashMap<String, usize>| -> Vec<String> {
        let mut path: Vec<String> = Vec::new();
        for p in parts {
            path.push(p.trim().trim_matches('"').to_string());
            if let Some(&n) = counts.get(&path.join(".")) {
                path.push((n - 1).to_string());
            }
        }
        path
    };
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix("[[").and_then(|l| l.split("]]").next()) {
            let parts: Vec<&str> = name.split('.').collect();
            let (last, parent) = parts.split_last().expect("split yields one part");
            let mut base = resolve(parent, &counts);
            base.push(last.trim().to_string());
            let key = base.join(".");
            *counts.entry(key.clone()).or_insert(0) += 1;
            base.push((counts[&key] - 1).to_string());
            out.insert(base.join("."), i + 1);
            table = base;
        } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            let parts: Vec<&str> = name.split('.').collect();
            table = resolve(&parts, &counts);
            out.entry(table.join(".")).or_insert(i + 1);
        } else if let Some((k, _)) = line.split_once('=') {
            if line.starts_with('#') {
                continue;
            }
            let mut path = table.clone();
            path.extend(k.split('.').map(|p| p.trim().trim_matches('"').to_string()));
            out.insert(path.join("."), i + 1);
        }
    }
    out
}

/// Line of `key`, or of its closest enclosing key that appears in the source.
fn locate(lines: &HashMap<String, usize>, key: &str) -> Option<usize> {
    let mut k = key;
    loop {
        if let Some(&l) = lines.get(k) {
            return Some(l);
        }
        k = &k[..k.rfind('.')?];
    }
}

impl Scenario {
    /// Parses and validates a scenario document.
    pub fn from_toml(src: &str) -> Result<Scenario, ConfigError> {
        let scn: Scenario = toml::from_str(src).map_err(|e| ConfigError::Syntax {
            line: e.span().map(|s| line_of_offset(src, s.start)),
            msg: e.message().to_string(),
        })?;
        if let Err((key, msg)) = scn.check() {
            let line = locate(&key_lines(src), &key);
            return Err(ConfigError::Invalid { line, key, msg });
        }
        Ok(scn)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn initial_state(&self) -> VehicleState {
        let [x, y, th, v, d] = self.initial;
        VehicleState::new(x, y, th, v, d)
    }

    /// First violated rule as `(key, message)`.
    fn check(&self) -> Result<(), (String, String)> {
        fn fail<T>(key: impl Into<String>, msg: impl Into<String>) -> Result<T, (String, String)> {
            Err((key.into(), msg.into()))
        }
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.name.trim().is_empty() {
            return fail("name", "must not be empty");
        }
        if !pos(self.duration) {
            return fail("duration", "must be positive");
        }
        if let Err(e) = self.vehicle.validate() {
            return fail("vehicle", e.to_string());
        }
        if !pos(self.speed) || self.speed > self.vehicle.v_max {
            return fail("speed", format!("must be in (0, v_max = {}]", self.vehicle.v_max));
        }
        if !pos(self.reference_accel) {
            return fail("reference_accel", "must be positive");
        }
        if !(self.vehicle_radius.is_finite() && self.vehicle_radius >= 0.0) {
            return fail("vehicle_radius", "must be non-negative");
        }
        if self.initial.iter().any(|v| !v.is_finite()) {
            return fail("initial", "must be finite");
        }
        if self.initial[3] < 0.0 || self.initial[3] > self.vehicle.v_max {
            return fail("initial", "speed must be in [0, v_max]");
        }
        if self.initial[4].abs() > self.vehicle.delta_max {
            return fail("initial", "steering angle exceeds delta_max");
        }
        let t = &self.timing;
        if !pos(t.physics_rate) {
            return fail("timing.physics_rate", "must be positive");
        }
        if !pos(t.precompensator_rate) || t.precompensator_rate > t.physics_rate {
            return fail("timing.precompensator_rate", "must be positive and at most physics_rate");
        }
        let ratio = t.physics_rate / t.precompensator_rate;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return fail("timing.precompensator_rate", "must divide physics_rate");
        }
        if !pos(t.disturbance_period) {
            return fail("timing.disturbance_period", "must be positive");
        }
        if !(self.delays.t_a.is_finite() && self.delays.t_a >= 0.0) {
            return fail("delays.t_a", "must be non-negative");
        }
        match &self.delays.latency {
            LatencySource::Constant { value } if !pos(*value) => return fail("delays.latency.value", "must be positive"),
            LatencySource::Trace { samples } if samples.is_empty() || samples.iter().any(|s| !pos(*s)) => {
                return fail("delays.latency.samples", "must be a non-empty list of positive seconds")
            }
            LatencySource::LogNormal { mean, sigma_log } if !pos(*mean) || !(sigma_log.is_finite() && *sigma_log >= 0.0) => {
                return fail("delays.latency", "needs a positive mean and a non-negative sigma_log")
            }
            _ => {}
        }
        if self.disturbance.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return fail("disturbance", "half-widths must be non-negative");
        }
        if let Err(e) = self.path.build() {
            return fail("path", e.to_string());
        }
        if let PathSpec::LaneShift { shift_out, shift_back, .. } = &self.path {
            if !(shift_out[0] < shift_out[1] && shift_back[0] < shift_back[1]) {
                return fail("path", "shift intervals must be increasing");
            }
        }
        if let Some([x0, y0, x1, y1]) = self.road {
            if !(x0 < x1 && y0 < y1) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
                return fail("road", "needs [x_min, y_min, x_max, y_max] with min < max");
            }
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            if let Err(e) = ob.validate() {
                return fail(format!("obstacles.{i}"), e);
            }
        }
        match &self.controller {
            ControllerSpec::TubeMpc { horizon, dt, grid } => {
                if *horizon == 0 {
                    return fail("controller.horizon", "must be at least 1");
                }
                if !pos(*dt) {
                    return fail("controller.dt", "must be positive");
                }
                if grid.contains(&0) {
                    return fail("controller.grid", "every axis needs at least one point");
                }
            }
            ControllerSpec::PurePursuit { lookahead, horizon, dt } => {
                if !pos(*lookahead) {
                    return fail("controller.lookahead", "must be positive");
                }
                if *horizon == 0 {
                    return fail("controller.horizon", "must be at least 1");
                }
                if !pos(*dt) {
                    return fail("controller.dt", "must be positive");
                }
            }
        }
        if let Some(r) = &self.replanner {
            if r.offsets.is_empty() || r.offsets.iter().any(|o| !o.is_finite()) {
                return fail("replanner.offsets", "needs at least one finite offset");
            }
            if r.maneuver_times.is_empty() || r.maneuver_times.iter().any(|m| !pos(*m)) {
                return fail("replanner.maneuver_times", "needs positive durations");
            }
            if !pos(r.eval_time) || !pos(r.eval_dt) || !pos(r.emergency_decel) || !pos(r.accel) {
                return fail("replanner", "eval_time, eval_dt, accel and emergency_decel must be positive");
            }
        }
        if !pos(self.arms.constant_bound) {
            return fail("arms.constant_bound", "must be positive");
        }
        if !pos(self.arms.influence_initial) {
            return fail("arms.influence_initial", "must be positive");
        }
        if let Err(e) = self.arms.filter.validate() {
            return fail("arms.filter", e.to_string());
        }
        self.check_kind()
    }

    fn check_kind(&self) -> Result<(), (String, String)> {
        let mpc = matches!(self.controller, ControllerSpec::TubeMpc { .. });
        let moving = self.obstacles.iter().any(|o| o.motion.is_some());
        let msg = match self.kind {
            ScenarioKind::StaticObstacle if !mpc => Some(("controller", "static_obstacle runs the tube MPC")),
            ScenarioKind::StaticObstacle if self.obstacles.is_empty() || moving => {
                Some(("obstacles", "static_obstacle needs at least one obstacle and no moving ones"))
            }
            ScenarioKind::Overtaking if !mpc => Some(("controller", "overtaking runs the tube MPC")),
            ScenarioKind::Overtaking if !moving => Some(("obstacles", "overtaking needs a moving lead vehicle")),
            ScenarioKind::Overtaking if self.replanner.is_none() => Some(("kind", "overtaking needs a [replanner] table")),
            ScenarioKind::ClosedTrack if mpc => Some(("controller", "closed_track runs pure pursuit")),
            ScenarioKind::ClosedTrack if !self.path.is_closed() => Some(("path", "closed_track needs a closed path")),
            _ => None,
        };
        match msg {
            Some((k, m)) => Err((k.to_string(), m.to_string())),
            None => Ok(()),
        }
    }
}

/// Scenario files shipped with the crate.
pub const BUILTIN: [(&str, &str); 3] = [
    ("static_obstacle", include_str!("../../scenarios/static_obstacle.toml")),
    ("overtaking", include_str!("../../scenarios/overtaking.toml")),
    ("closed_track", include_str!("../../scenarios/closed_track.toml")),
];

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scenarios_parse() {
        for (name, src) in BUILTIN {
            let scn = Scenario::from_toml(src).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(scn.name, name);
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let scn = Scenario::from_toml(builtin("overtaking").unwrap()).unwrap();
        let again = Scenario::from_toml(&scn.to_toml()).unwrap();
        assert_eq!(scn, again);
    }

    #[test]
    fn syntax_errors_point_at_the_line() {
        let src = builtin("static_obstacle").unwrap().replacen("duration = ", "duration = = ", 1);
        let want = src.lines().position(|l| l.starts_with("duration")).unwrap() + 1;
        let err = Scenario::from_toml(&src).unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { .. }));
        assert_eq!(err.line(), Some(want));
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let src = builtin("static_obstacle").unwrap().replacen("[vehicle]\n", "[vehicle]\nmass = 1500.0\n", 1);
        let want = src.lines().position(|l| l.starts_with("mass")).unwrap() + 1;
        let err = Scenario::from_toml(&src).unwrap_err();
        assert_eq!(err.line(), Some(want), "{err}");
        assert!(err.to_string().contains("mass"), "{err}");
    }

    #[test]
    fn missing_physical_parameter_is_an_error() {
        let src: String = builtin("static_obstacle")
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("k_delta"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = Scenario::from_toml(&src).unwrap_err();
        assert!(err.to_string().contains("k_delta"), "{err}");
    }

    #[test]
    fn semantic_errors_name_key_and_line() {
        let src = builtin("overtaking").unwrap();
        let bad = src.replacen("decel = 8.0", "decel = -8.0", 1);
        let want = bad.lines().position(|l| l.contains("decel = -8.0")).unwrap() + 1;
        let err = Scenario::from_toml(&bad).unwrap_err();
        match &err {
            ConfigError::Invalid { line, key, .. } => {
                assert_eq!(key, "obstacles.0");
                // the obstacle's table header or the motion table
                assert!(line.is_some_and(|l| l <= want), "{err}");
            }
            other => panic!("{other:?}"),
        }

        let bad = src.replacen("speed = 15.0", "speed = 99.0", 1);
        let err = Scenario::from_toml(&bad).unwrap_err();
        let want = bad.lines().position(|l| l.starts_with("speed = 99.0")).unwrap() + 1;
        assert_eq!(err.line(), Some(want), "{err}");
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let src = builtin("closed_track").unwrap().replacen("kind = \"closed_track\"", "kind = \"overtaking\"", 1);
        let err = Scenario::from_toml(&src).unwrap_err();
        assert!(err.to_string().contains("overtaking"), "{err}");
    }

    #[test]
    fn key_lines_track_arrays_of_tables() {
        let src = "a = 1\n[[obs]]\nx = 1\n[[obs]]\nx = 2\n[obs.motion]\nv = 3\n[t]\ny = 4\n";
        let lines = key_lines(src);
        assert_eq!(lines["a"], 1);
        assert_eq!(lines["obs.0.x"], 3);
        assert_eq!(lines["obs.1.x"], 5);
        assert_eq!(lines["obs.1.motion.v"], 7);
        assert_eq!(lines["t.y"], 9);
        assert_eq!(locate(&lines, "obs.1.motion.decel"), Some(6));
    }

    #[test]
    fn lane_shift_is_smooth_and_returns() {
        let spec = PathSpec::LaneShift {
            length: 100.0,
            spacing: 0.5,
            offset: 2.0,
            shift_out: [10.0, 30.0],
            shift_back: [50.0, 70.0],
        };
        let p = spec.build().unwrap();
        assert!(p.project([5.0, 0.0]).lateral.abs() < 1e-9);
        assert!((p.project([40.0, 2.0]).lateral).abs() < 1e-6);
        assert!(p.project([90.0, 0.0]).lateral.abs() < 1e-9);
    }
}
