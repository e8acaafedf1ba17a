//! Summary numbers computed from a finished run. Everything here is a pure
//! function of the [`SimLog`].

use serde::{Deserialize, Serialize};

use crate::sim::{CycleOutcome, SimLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Simulated time covered by the log [s].
    pub duration: f64,
    /// `None` when the scenario has no obstacles.
    pub min_clearance: Option<f64>,
    pub min_clearance_time: Option<f64>,
    pub collision: bool,
    /// Largest absolute distance to the reference path [m].
    pub max_cross_track: f64,
    pub cycles: usize,
    /// Cycles whose computation time exceeded the bound they planned with.
    pub bound_violations: usize,
    pub infeasible_cycles: usize,
    pub emergency_cycles: usize,
    pub mean_t_c: f64,
    pub failure: Option<String>,
}

impl Metrics {
    pub fn from_log(log: &SimLog) -> Metrics {
        let min = log
            .records
            .iter()
            .filter(|r| r.clearance.is_finite())
            .min_by(|a, b| a.clearance.total_cmp(&b.clearance));
        let count = |o: CycleOutcome| log.cycles.iter().filter(|c| c.outcome == o).count();
        let mean_t_c = if log.cycles.is_empty() {
            0.0
        } else {
            log.cycles.iter().map(|c| c.t_c).sum::<f64>() / log.cycles.len() as f64
        };
        Metrics {
            duration: log.records.last().map_or(0.0, |r| r.t),
            min_clearance: min.map(|r| r.clearance),
            min_clearance_time: min.map(|r| r.t),
            collision: min.is_some_and(|r| r.clearance <= 0.0),
            max_cross_track: log.records.iter().map(|r| r.cross_track.abs()).fold(0.0, f64::max),
            cycles: log.cycles.len(),
            bound_violations: count(CycleOutcome::Late),
            infeasible_cycles: count(CycleOutcome::Infeasible),
            emergency_cycles: log.cycles.iter().filter(|c| c.emergency).count(),
            mean_t_c,
            failure: log.failure.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{CycleRecord, LogRecord};

    fn record(t: f64, clearance: f64, cross_track: f64) -> LogRecord {
        LogRecord {
            t,
            p_x: 0.0,
            p_y: 0.0,
            theta: 0.0,
            v: 0.0,
            delta_a: 0.0,
            accel: 0.0,
            delta_cmd: 0.0,
            t_c: 0.0,
            t_hat_c: 0.0,
            bound_violated: 0,
            slack: 0.0,
            clearance,
            cross_track,
            event: "",
        }
    }

    fn cycle(t_c: f64, outcome: CycleOutcome, emergency: bool) -> CycleRecord {
        CycleRecord {
            t_launch: 0.0,
            t_c,
            t_hat_c: 0.05,
            outcome,
            emergency,
        }
    }

    #[test]
    fn summarizes_a_log() {
        let log = SimLog {
            records: vec![record(0.0, 2.0, 0.1), record(0.5, -0.3, -0.7), record(1.0, 1.0, 0.2)],
            cycles: vec![
                cycle(0.01, CycleOutcome::Activated, false),
                cycle(0.08, CycleOutcome::Late, false),
                cycle(0.03, CycleOutcome::Infeasible, true),
            ],
            failure: None,
        };
        let m = Metrics::from_log(&log);
        assert_eq!(m.min_clearance, Some(-0.3));
        assert_eq!(m.min_clearance_time, Some(0.5));
        assert!(m.collision);
        assert_eq!(m.max_cross_track, 0.7);
        assert_eq!((m.cycles, m.bound_violations, m.infeasible_cycles, m.emergency_cycles), (3, 1, 1, 1));
        assert!((m.mean_t_c - 0.04).abs() < 1e-15);
        assert_eq!(m.duration, 1.0);
    }

    #[test]
    fn no_obstacles_means_no_clearance() {
        let log = SimLog {
            records: vec![record(0.0, f64::INFINITY, 0.0)],
            ..SimLog::default()
        };
        let m = Metrics::from_log(&log);
        assert_eq!(m.min_clearance, None);
        assert!(!m.collision);
        let back: Metrics = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }
}
