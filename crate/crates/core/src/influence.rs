//! Adaptive scalar Kalman filter for computation-time prediction.
//!
//! The process model `x_n = gamma_0 x_{n-1} + gamma_1` is identified online by
//! recursive least squares with forgetting, while the process and measurement
//! noise variances are tracked with exponential moving averages of the
//! innovation and residual. The one-step prediction plus a variance margin
//! gives an upper bound on the next computation time.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Below this, `p + r` is treated as zero and the gain is set to 0.
pub const GAIN_DENOM_FLOOR: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error("measurement must be non-negative, got {0}")]
    Negative(f64),
    #[error("measurement is not finite")]
    NonFinite,
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// How the margin on top of the point prediction is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// `x + beta * p`
    #[default]
    Variance,
    /// `x + beta * sqrt(p)`
    StdDev,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_q: f64,
    pub n_r: f64,
    pub n_theta: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub bound_mode: BoundMode,
    /// When false, `q` and `r` keep their current values.
    pub adapt_noise: bool,
    /// When false, `gamma` and `F` keep their current values.
    pub identify_model: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_q: 50.0,
            n_r: 50.0,
            n_theta: 50.0,
            beta: 3.0,
            epsilon: 1e-4,
            bound_mode: BoundMode::Variance,
            adapt_noise: true,
            identify_model: true,
        }
    }
}

impl FilterConfig {
    pub fn std_dev(beta: f64) -> Self {
        Self {
            beta,
            bound_mode: BoundMode::StdDev,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), InfluenceError> {
        let bad = |m: &str| Err(InfluenceError::InvalidConfig(m.to_string()));
        if !(self.n_q >= 2.0 && self.n_r >= 2.0) {
            return bad("N_q and N_r must be at least 2");
        }
        if !(self.n_theta >= 2.0) {
            return bad("N_theta must be at least 2");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be non-negative");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }

    pub fn forgetting(&self) -> f64 {
        (self.n_theta - 1.0) / self.n_theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub x_est: f64,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub e: f64,
    pub w: f64,
    pub gamma: Vector2<f64>,
    pub f: Matrix2<f64>,
    pub n: u64,
}

/// One-step prediction `x_{n|n-1}`, `p_{n|n-1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub x: f64,
    pub p: f64,
}

fn check_measurement(t: f64) -> Result<(), InfluenceError> {
    if !t.is_finite() {
        return Err(InfluenceError::NonFinite);
    }
    if t < 0.0 {
        return Err(InfluenceError::Negative(t));
    }
    Ok(())
}

impl FilterState {
    pub fn init(t_c0: f64, cfg: &FilterConfig) -> Result<Self, InfluenceError> {
        check_measurement(t_c0)?;
        cfg.validate()?;
        Ok(Self {
            x_est: t_c0,
            p: 0.0,
            q: cfg.epsilon,
            r: cfg.epsilon,
            e: 0.0,
            w: 0.0,
            gamma: Vector2::new(1.0, 0.0),
            f: Matrix2::identity(),
            n: 0,
        })
    }

    pub fn predict(&self) -> Prediction {
        Prediction {
            x: self.gamma.dot(&Vector2::new(self.x_est, 1.0)),
            p: self.gamma[0] * self.gamma[0] * self.p + self.q,
        }
    }

    pub fn predict_upper_bound(&self, cfg: &FilterConfig) -> f64 {
        let pred = self.predict();
        match cfg.bound_mode {
            BoundMode::Variance => pred.x + cfg.beta * pred.p,
            BoundMode::StdDev => pred.x + cfg.beta * pred.p.sqrt(),
        }
    }

    /// Folds in one measured computation time.
    pub fn update(&self, t_cn: f64, cfg: &FilterConfig) -> Result<Self, InfluenceError> {
        check_measurement(t_cn)?;
        let Prediction { x: x_pred, p: p_pred } = self.predict();
        let (nq, nr) = (cfg.n_q, cfg.n_r);

        let resid = t_cn - x_pred;
        let e = (nr - 1.0) / nr * self.e + resid / nr;
        let r = if cfg.adapt_noise {
            let dr = (resid - e).powi(2) / (nr - 1.0) - p_pred / nr;
            ((nr - 1.0) / nr * self.r + dr).abs()
        } else {
            self.r
        };

        let denom = p_pred + r;
        let k = if denom < GAIN_DENOM_FLOOR { 0.0 } else { p_pred / denom };
        let x_new = x_pred + k * resid;
        let p_new = (1.0 - k) * p_pred;

        let innov = x_new - x_pred;
        let w = (nq - 1.0) / nq * self.w + innov / nq;
        let q = if cfg.adapt_noise {
            let g0 = self.gamma[0];
            let dq = (p_new - g0 * g0 * self.p) / nq + (innov - w).powi(2) / (nq - 1.0);
            ((nq - 1.0) / nq * self.q + dq).abs()
        } else {
            self.q
        };

        let (f, gamma) = if cfg.identify_model {
            let lambda = cfg.forgetting();
            let phi = Vector2::new(self.x_est, 1.0);
            let fphi = self.f * phi;
            let f = (self.f - fphi * fphi.transpose() / (lambda + phi.dot(&fphi))) / lambda;
            let f = (f + f.transpose()) * 0.5;
            (f, self.gamma + f * phi * innov)
        } else {
            (self.f, self.gamma)
        };

        Ok(Self {
            x_est: x_new,
            p: p_new,
            q,
            r,
            e,
            w,
            gamma,
            f,
            n: self.n + 1,
        })
    }

    /// Gain that `update` would use for the next measurement.
    pub fn gain_for(&self, t_cn: f64, cfg: &FilterConfig) -> f64 {
        let pred = self.predict();
        let resid = t_cn - pred.x;
        let nr = cfg.n_r;
        let e = (nr - 1.0) / nr * self.e + resid / nr;
        let r = if cfg.adapt_noise {
            ((nr - 1.0) / nr * self.r + (resid - e).powi(2) / (nr - 1.0) - pred.p / nr).abs()
        } else {
            self.r
        };
        let denom = pred.p + r;
        if denom < GAIN_DENOM_FLOOR {
            0.0
        } else {
            pred.p / denom
        }
    }
}

/// One line of a filter replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplayRow {
    pub n: u64,
    pub t_c: f64,
    pub x_pred: f64,
    pub p_pred: f64,
    pub bound: f64,
    pub q: f64,
    pub r: f64,
    pub gamma0: f64,
    pub gamma1: f64,
}

/// Runs the filter over a measurement sequence. Row `n` holds the
/// prediction made before measurement `n` was seen; the first measurement
/// only initializes the filter.
pub fn replay(measurements: &[f64], cfg: &FilterConfig) -> Result<Vec<ReplayRow>, InfluenceError> {
    let Some((&first, rest)) = measurements.split_first() else {
        return Ok(Vec::new());
    };
    let mut state = FilterState::init(first, cfg)?;
    let mut rows = Vec::with_capacity(rest.len());
    for &t in rest {
        let pred = state.predict();
        rows.push(ReplayRow {
            n: state.n + 1,
            t_c: t,
            x_pred: pred.x,
            p_pred: pred.p,
            bound: state.predict_upper_bound(cfg),
            q: state.q,
            r: state.r,
            gamma0: state.gamma[0],
            gamma1: state.gamma[1],
        });
        state = state.update(t, cfg)?;
    }
    Ok(rows)
}

/// Reads newline-separated seconds; blank lines and `#` comments are skipped.
/// A file whose first line is a CSV header is read from its `t_c` column
/// instead, so cycle logs can be replayed directly.
pub fn read_trace(reader: impl BufRead) -> Result<Vec<f64>, InfluenceError> {
    let mut out = Vec::new();
    let mut column: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let field = if i == 0 && s.contains(',') {
            let pos = s.split(',').position(|h| h.trim() == "t_c").ok_or_else(|| InfluenceError::Parse {
                line: 1,
                msg: "CSV header has no t_c column".into(),
            })?;
            column = Some(pos);
            continue;
        } else if let Some(c) = column {
            s.split(',').nth(c).unwrap_or("").trim()
        } else {
            s
        };
        let v: f64 = field.parse().map_err(|e| InfluenceError::Parse {
            line: i + 1,
            msg: format!("{e}: {field:?}"),
        })?;
        check_measurement(v).map_err(|e| InfluenceError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_replay_csv(rows: &[ReplayRow], writer: impl Write) -> Result<(), InfluenceError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of rows whose measurement does not exceed the bound, skipping
/// the first `warmup` rows.
pub fn coverage(rows: &[ReplayRow], warmup: usize) -> f64 {
    let tail = &rows[warmup.min(rows.len())..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().filter(|r| r.t_c <= r.bound).count() as f64 / tail.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, LogNormal, Normal};

    #[test]
    fn init_values() {
        let cfg = FilterConfig::default();
        let s = FilterState::init(0.05, &cfg).unwrap();
        assert_eq!(s.x_est, 0.05);
        assert_eq!(s.gamma, Vector2::new(1.0, 0.0));
        assert_eq!((s.q, s.r, s.p, s.e, s.w, s.n), (cfg.epsilon, cfg.epsilon, 0.0, 0.0, 0.0, 0));
        assert_eq!(s.f, Matrix2::identity());
        assert!(FilterState::init(0.0, &cfg).is_ok());
        assert!(matches!(FilterState::init(-0.01, &cfg), Err(InfluenceError::Negative(_))));
        assert!(matches!(FilterState::init(f64::NAN, &cfg), Err(InfluenceError::NonFinite)));
    }

    #[test]
    fn bound_after_init() {
        let cfg = FilterConfig::default();
        let s = FilterState::init(0.05, &cfg).unwrap();
        assert_abs_diff_eq!(s.predict_upper_bound(&cfg), 0.05 + cfg.beta * cfg.epsilon, epsilon = 1e-15);
        let zero = FilterConfig { beta: 0.0, ..cfg };
        assert_eq!(s.predict_upper_bound(&zero), s.predict().x);
        let std = FilterConfig::std_dev(3.0);
        assert_abs_diff_eq!(s.predict_upper_bound(&std), 0.05 + 3.0 * cfg.epsilon.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn constant_stream_is_a_fixed_point() {
        let cfg = FilterConfig::default();
        let mut s = FilterState::init(0.03, &cfg).unwrap();
        for _ in 0..500 {
            s = s.update(0.03, &cfg).unwrap();
            assert_eq!(s.x_est, 0.03);
            assert_eq!(s.e, 0.0);
        }
    }

    #[test]
    fn frozen_filter_is_a_textbook_kalman_filter() {
        let cfg = FilterConfig {
            adapt_noise: false,
            identify_model: false,
            ..FilterConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = FilterState::init(0.02, &cfg).unwrap();
        s.q = 2e-5;
        s.r = 5e-5;
        let (q, r) = (s.q, s.r);
        let (mut x, mut p) = (0.02, 0.0);
        for _ in 0..2000 {
            let z = rng.gen_range(0.0..0.05);
            let xp = x;
            let pp = p + q;
            let k = pp / (pp + r);
            x = xp + k * (z - xp);
            p = (1.0 - k) * pp;
            s = s.update(z, &cfg).unwrap();
            assert!((s.x_est - x).abs() <= 1e-12);
            assert!((s.p - p).abs() <= 1e-12);
        }
    }

    #[test]
    fn recovers_affine_process_model() {
        // identification is only unbiased enough when measurement noise
        // dominates and the forgetting window is long
        let cfg = FilterConfig {
            n_theta: 500.0,
            ..FilterConfig::default()
        };
        let truth = (0.8, 0.01);
        let proc_noise = Normal::new(0.0, 0.001).unwrap();
        let meas_noise = Normal::new(0.0, 0.01).unwrap();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x: f64 = 0.05;
            let mut s = FilterState::init(x, &cfg).unwrap();
            for _ in 0..2000 {
                x = truth.0 * x + truth.1 + proc_noise.sample(&mut rng);
                let z = (x + meas_noise.sample(&mut rng)).max(0.0);
                s = s.update(z, &cfg).unwrap();
            }
            assert!((s.gamma[0] - truth.0).abs() < 0.1, "seed {seed}: {:?}", s.gamma);
            assert!((s.gamma[1] - truth.1).abs() < 0.1, "seed {seed}: {:?}", s.gamma);
        }
    }

    fn lognormal_trace(seed: u64, n: usize, mean: f64, sigma_log: f64) -> Vec<f64> {
        let mu = mean.ln() - sigma_log * sigma_log / 2.0;
        let d = LogNormal::new(mu, sigma_log).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn std_mode_coverage_on_lognormal_latency() {
        let cfg = FilterConfig::std_dev(3.0);
        for seed in 0..5 {
            let trace = lognormal_trace(seed, 5000, 0.02, 0.25);
            let rows = replay(&trace, &cfg).unwrap();
            assert!(coverage(&rows, 100) >= 0.9);
        }
    }

    #[test]
    fn variance_mode_coverage_with_calibrated_beta() {
        // p shrinks slowly over a run, so beta is calibrated on a whole run of
        // one seed (95th percentile of residual / p) and checked on others
        let noise = Normal::<f64>::new(0.02, 0.004).unwrap();
        let trace = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5000).map(|_| noise.sample(&mut rng).max(0.0)).collect::<Vec<f64>>()
        };
        let probe = replay(&trace(0), &FilterConfig::default()).unwrap();
        let mut ratios: Vec<f64> = probe[100..].iter().map(|r| (r.t_c - r.x_pred) / r.p_pred).collect();
        ratios.sort_by(f64::total_cmp);
        let beta = ratios[ratios.len() * 95 / 100];
        let cfg = FilterConfig { beta, ..FilterConfig::default() };
        for seed in 1..6 {
            let rows = replay(&trace(seed), &cfg).unwrap();
            assert!(coverage(&rows, 100) > 0.9, "seed {seed}: {}", coverage(&rows, 100));
        }
    }

    #[test]
    fn bounded_inputs_keep_estimate_in_envelope() {
        let cfg = FilterConfig::default();
        let t_max = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = FilterState::init(0.05, &cfg).unwrap();
        for _ in 0..100_000 {
            s = s.update(rng.gen_range(0.0..=t_max), &cfg).unwrap();
            assert!(s.x_est >= -t_max && s.x_est <= 2.0 * t_max, "{s:?}");
        }
    }

    #[test]
    fn replay_is_deterministic_and_reads_traces() {
        let text = "# latency\n0.02\n\n0.03\n0.025\n";
        let trace = read_trace(text.as_bytes()).unwrap();
        assert_eq!(trace, vec![0.02, 0.03, 0.025]);
        let cfg = FilterConfig::default();
        let a = replay(&trace, &cfg).unwrap();
        assert_eq!(a, replay(&trace, &cfg).unwrap());
        assert_eq!(a.len(), 2);
        let mut buf = Vec::new();
        write_replay_csv(&a, &mut buf).unwrap();
        let out = String::from_utf8(buf).unwrap();
        assert!(out.starts_with("n,t_c,x_pred,p_pred,bound,q,r,gamma0,gamma1\n"));
        assert!(matches!(read_trace("0.1\nabc\n".as_bytes()), Err(InfluenceError::Parse { line: 2, .. })));
        assert!(matches!(read_trace("-0.1\n".as_bytes()), Err(InfluenceError::Parse { line: 1, .. })));
        let csv = "t_launch,t_c,t_hat_c,outcome,emergency\n0.0,0.021,0.2,activated,false\n0.1,0.019,0.05,activated,false\n";
        assert_eq!(read_trace(csv.as_bytes()).unwrap(), vec![0.021, 0.019]);
        assert!(matches!(read_trace("a,b\n1,2\n".as_bytes()), Err(InfluenceError::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn variances_and_gain_stay_admissible(ts in proptest::collection::vec(0.0f64..0.5, 1..200)) {
            let cfg = FilterConfig::default();
            let mut s = FilterState::init(ts[0], &cfg).unwrap();
            for &t in &ts[1..] {
                let k = s.gain_for(t, &cfg);
                prop_assert!((0.0..=1.0).contains(&k));
                s = s.update(t, &cfg).unwrap();
                prop_assert!(s.p >= 0.0 && s.q >= 0.0 && s.r >= 0.0);
                let det = s.f.determinant();
                prop_assert!(s.f[(0, 0)] > 0.0 && det > 0.0);
            }
        }
    }
}
