//! Oriented obstacle boxes and halfspace carving of obstacle-free regions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polytope::{HPolytope, PolytopeError, SupportFunction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CarveError {
    #[error("infeasible seed: ({0}, {1}) is inside obstacle {2}")]
    InfeasibleSeed(f64, f64, usize),
    #[error("bounds must be two-dimensional")]
    BoundsDim,
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

/// Longitudinal motion of a scripted obstacle along its heading: constant
/// speed, then constant deceleration to a stop from `brake_time` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motion {
    pub speed: f64,
    #[serde(default = "never")]
    pub brake_time: f64,
    #[serde(default)]
    pub decel: f64,
}

fn never() -> f64 {
    f64::INFINITY
}

impl Motion {
    /// Distance travelled after `t` seconds.
    pub fn distance(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        if t <= self.brake_time || self.decel <= 0.0 {
            return self.speed * t;
        }
        let before = self.speed * self.brake_time;
        let stop = self.speed / self.decel;
        let tb = (t - self.brake_time).min(stop);
        before + self.speed * tb - 0.5 * self.decel * tb * tb
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        if t <= self.brake_time || self.decel <= 0.0 {
            self.speed
        } else {
            (self.speed - self.decel * (t - self.brake_time)).max(0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleBox {
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
    #[serde(default)]
    pub heading: f64,
    #[serde(default)]
    pub motion: Option<Motion>,
}

impl ObstacleBox {
    pub fn new(center: [f64; 2], half_extents: [f64; 2], heading: f64) -> Self {
        Self {
            center,
            half_extents,
            heading,
            motion: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite = self.center.iter().chain(&self.half_extents).all(|v| v.is_finite()) && self.heading.is_finite();
        if !finite {
            return Err("obstacle has non-finite geometry".into());
        }
        if self.half_extents.iter().any(|h| *h <= 0.0) {
            return Err("obstacle extents must be positive".into());
        }
        if let Some(m) = &self.motion {
            if !(m.speed.is_finite() && m.speed >= 0.0 && m.decel >= 0.0 && m.decel.is_finite()) {
                return Err("obstacle motion needs finite non-negative speed and deceleration".into());
            }
        }
        Ok(())
    }

    /// Static pose at time `t`.
    pub fn at(&self, t: f64) -> ObstacleBox {
        match &self.motion {
            None => *self,
            Some(m) => {
                let d = m.distance(t);
                ObstacleBox {
                    center: [
                        self.center[0] + d * self.heading.cos(),
                        self.center[1] + d * self.heading.sin(),
                    ],
                    motion: None,
                    ..*self
                }
            }
        }
    }

    /// What an observer sees at `t`: the pose at `t`, extrapolated with the
    /// current speed and deceleration, with time measured from `t`.
    pub fn observed(&self, t: f64) -> ObstacleBox {
        let motion = self.motion.map(|m| {
            if t > m.brake_time && m.decel > 0.0 {
                Motion {
                    speed: m.speed_at(t),
                    brake_time: 0.0,
                    decel: m.decel,
                }
            } else {
                Motion {
                    speed: m.speed,
                    brake_time: f64::INFINITY,
                    decel: 0.0,
                }
            }
        });
        ObstacleBox { motion, ..self.at(t) }
    }

    pub fn inflated(&self, r: f64) -> ObstacleBox {
        ObstacleBox {
            half_extents: [self.half_extents[0] + r, self.half_extents[1] + r],
            ..*self
        }
    }

    fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    fn to_world(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.center[0] + c * q[0] - s * q[1], self.center[1] + s * q[0] + c * q[1]]
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let [a, b] = self.half_extents;
        [[a, b], [-a, b], [-a, -b], [a, -b]].map(|q| self.to_world(q))
    }

    /// Strict interior test.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let q = self.to_local(p);
        q[0].abs() < self.half_extents[0] && q[1].abs() < self.half_extents[1]
    }

    /// Closest point of the closed box to `p`.
    pub fn closest_point(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.to_local(p);
        let c = [
            q[0].clamp(-self.half_extents[0], self.half_extents[0]),
            q[1].clamp(-self.half_extents[1], self.half_extents[1]),
        ];
        self.to_world(c)
    }

    /// Euclidean distance outside, minus the penetration depth inside.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        let q = self.to_local(p);
        let dx = q[0].abs() - self.half_extents[0];
        let dy = q[1].abs() - self.half_extents[1];
        if dx <= 0.0 && dy <= 0.0 {
            dx.max(dy)
        } else {
            dx.max(0.0).hypot(dy.max(0.0))
        }
    }
}

/// Intersects `bounds` with one separating halfspace per obstacle. The
/// halfspace passes through the obstacle point closest to the seed with its
/// normal pointing from that point to the seed.
pub fn carve_convex_region(seed: [f64; 2], obstacles: &[ObstacleBox], bounds: &HPolytope) -> Result<HPolytope, CarveError> {
    if bounds.dim() != 2 {
        return Err(CarveError::BoundsDim);
    }
    let mut rows: Vec<[f64; 2]> = Vec::new();
    let mut rhs = Vec::new();
    for (i, ob) in obstacles.iter().enumerate() {
        let c = ob.closest_point(seed);
        let n = [seed[0] - c[0], seed[1] - c[1]];
        let len = n[0].hypot(n[1]);
        if ob.contains(seed) || len < 1e-12 {
            return Err(CarveError::InfeasibleSeed(seed[0], seed[1], i));
        }
        let n = [n[0] / len, n[1] / len];
        // n . p >= n . c  written as  -n . p <= -n . c
        rows.push([-n[0], -n[1]]);
        rhs.push(-(n[0] * c[0] + n[1] * c[1]));
    }
    if rows.is_empty() {
        return Ok(bounds.clone());
    }
    let h = DMatrix::from_fn(rows.len(), 2, |r, c| rows[r][c]);
    let carved = HPolytope::new(h, DVector::from_vec(rhs))?;
    Ok(bounds.intersect(&carved)?)
}

/// Like [`carve_convex_region`], but each obstacle's halfspace is chosen among
/// the closest-point tangent and the box faces the seed lies strictly outside
/// of, keeping the one that retains the most `lookahead` points. Ties go to
/// the tangent, then to the earlier face.
pub fn carve_along(
    seed: [f64; 2],
    lookahead: &[[f64; 2]],
    obstacles: &[ObstacleBox],
    bounds: &HPolytope,
) -> Result<HPolytope, CarveError> {
    if bounds.dim() != 2 {
        return Err(CarveError::BoundsDim);
    }
    let mut rows: Vec<[f64; 2]> = Vec::new();
    let mut rhs = Vec::new();
    for (i, ob) in obstacles.iter().enumerate() {
        let c = ob.closest_point(seed);
        let n = [seed[0] - c[0], seed[1] - c[1]];
        let len = n[0].hypot(n[1]);
        if ob.contains(seed) || len < 1e-12 {
            return Err(CarveError::InfeasibleSeed(seed[0], seed[1], i));
        }
        // outward normal n and offset b: the kept side is n . p >= b
        let mut candidates = vec![([n[0] / len, n[1] / len], (n[0] * c[0] + n[1] * c[1]) / len)];
        let (sn, cs) = ob.heading.sin_cos();
        let axes = [[cs, sn], [-sn, cs]];
        for (axis, half) in axes.iter().zip(ob.half_extents) {
            for sign in [1.0, -1.0] {
                let normal = [sign * axis[0], sign * axis[1]];
                let b = normal[0] * ob.center[0] + normal[1] * ob.center[1] + half;
                if normal[0] * seed[0] + normal[1] * seed[1] > b {
                    candidates.push((normal, b));
                }
            }
        }
        let kept = |(normal, b): &([f64; 2], f64)| lookahead.iter().filter(|p| normal[0] * p[0] + normal[1] * p[1] >= *b).count();
        let mut best = 0;
        for j in 1..candidates.len() {
            if kept(&candidates[j]) > kept(&candidates[best]) {
                best = j;
            }
        }
        let (normal, b) = candidates[best];
        rows.push([-normal[0], -normal[1]]);
        rhs.push(-b);
    }
    if rows.is_empty() {
        return Ok(bounds.clone());
    }
    let h = DMatrix::from_fn(rows.len(), 2, |r, c| rows[r][c]);
    let carved = HPolytope::new(h, DVector::from_vec(rhs))?;
    Ok(bounds.intersect(&carved)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bounds() -> HPolytope {
        HPolytope::from_box(&[-50.0, -50.0], &[50.0, 50.0]).unwrap()
    }

    #[test]
    fn no_obstacles_returns_bounds() {
        assert_eq!(carve_convex_region([1.0, 2.0], &[], &bounds()).unwrap(), bounds());
    }

    #[test]
    fn box_left_of_seed_gives_vertical_wall() {
        let ob = ObstacleBox::new([-3.0, 0.0], [1.0, 2.0], 0.0);
        let r = carve_convex_region([0.0, 0.5], &[ob], &bounds()).unwrap();
        let last = r.num_constraints() - 1;
        let n = r.normals().row(last);
        assert!((n[0] + 1.0).abs() < 1e-12 && n[1].abs() < 1e-12);
        // -x <= 2  i.e.  x >= -2, the box's right face
        assert!((r.offsets()[last] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn seed_inside_is_rejected() {
        let ob = ObstacleBox::new([0.0, 0.0], [1.0, 1.0], 0.3);
        assert!(matches!(
            carve_convex_region([0.2, 0.1], &[ob], &bounds()),
            Err(CarveError::InfeasibleSeed(_, _, 0))
        ));
    }

    #[test]
    fn carved_regions_exclude_sampled_obstacle_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let obstacles: Vec<ObstacleBox> = (0..rng.gen_range(1..5))
                .map(|_| {
                    ObstacleBox::new(
                        [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)],
                        [rng.gen_range(0.5..4.0), rng.gen_range(0.5..4.0)],
                        rng.gen_range(-3.0..3.0),
                    )
                })
                .collect();
            let seed = loop {
                let p = [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)];
                if obstacles.iter().all(|o| o.signed_distance(p) > 0.1) {
                    break p;
                }
            };
            let region = carve_convex_region(seed, &obstacles, &bounds()).unwrap();
            assert!(region.contains(&DVector::from_column_slice(&seed)));
            for ob in &obstacles {
                for _ in 0..10_000 {
                    let q = [
                        rng.gen_range(-1.0..1.0) * ob.half_extents[0],
                        rng.gen_range(-1.0..1.0) * ob.half_extents[1],
                    ];
                    let p = ob.to_world(q);
                    assert!(!region.contains_with_tol(&DVector::from_column_slice(&p), -1e-9));
                }
            }
        }
    }

    #[test]
    fn lookahead_prefers_face_along_the_road() {
        let ob = ObstacleBox::new([45.0, 0.0], [5.0, 2.0], 0.0);
        let seed = [30.0, 3.0];
        let ahead: Vec<[f64; 2]> = (0..15).map(|k| [30.0 + k as f64, 3.0]).collect();
        let tangent = carve_convex_region(seed, &[ob], &bounds()).unwrap();
        let along = carve_along(seed, &ahead, &[ob], &bounds()).unwrap();
        let p = DVector::from_vec(vec![44.0, 3.0]);
        assert!(!tangent.contains(&p));
        assert!(along.contains(&p));
        assert!(!along.contains(&DVector::from_vec(vec![44.0, 1.9])));
        // no lookahead: identical to the tangent rule
        let plain = carve_along(seed, &[], &[ob], &bounds()).unwrap();
        assert!((plain.normals() - tangent.normals()).amax() < 1e-12);
        assert!((plain.offsets() - tangent.offsets()).amax() < 1e-12);
    }

    #[test]
    fn lookahead_regions_exclude_sampled_obstacle_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let obstacles: Vec<ObstacleBox> = (0..rng.gen_range(1..4))
                .map(|_| {
                    ObstacleBox::new(
                        [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)],
                        [rng.gen_range(0.5..4.0), rng.gen_range(0.5..4.0)],
                        rng.gen_range(-3.0..3.0),
                    )
                })
                .collect();
            let seed = loop {
                let p = [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)];
                if obstacles.iter().all(|o| o.signed_distance(p) > 0.1) {
                    break p;
                }
            };
            let ahead: Vec<[f64; 2]> = (0..10).map(|_| [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)]).collect();
            let region = carve_along(seed, &ahead, &obstacles, &bounds()).unwrap();
            assert!(region.contains(&DVector::from_column_slice(&seed)));
            for ob in &obstacles {
                for _ in 0..2000 {
                    let q = [
                        rng.gen_range(-1.0..1.0) * ob.half_extents[0],
                        rng.gen_range(-1.0..1.0) * ob.half_extents[1],
                    ];
                    let p = ob.to_world(q);
                    assert!(!region.contains_with_tol(&DVector::from_column_slice(&p), -1e-9));
                }
            }
        }
    }

    #[test]
    fn signed_distance_and_motion() {
        let ob = ObstacleBox::new([0.0, 0.0], [2.0, 1.0], 0.0);
        assert!((ob.signed_distance([5.0, 0.0]) - 3.0).abs() < 1e-12);
        assert!((ob.signed_distance([3.0, 2.0]) - 2f64.sqrt()).abs() < 1e-12);
        assert!((ob.signed_distance([0.0, 0.5]) + 0.5).abs() < 1e-12);
        let m = Motion {
            speed: 10.0,
            brake_time: 4.0,
            decel: 5.0,
        };
        assert_eq!(m.distance(2.0), 20.0);
        assert!((m.distance(5.0) - 47.5).abs() < 1e-12);
        assert!((m.distance(100.0) - 50.0).abs() < 1e-12);
        assert_eq!(m.speed_at(10.0), 0.0);
        let moving = ObstacleBox {
            motion: Some(m),
            ..ObstacleBox::new([0.0, 0.0], [2.0, 1.0], std::f64::consts::FRAC_PI_2)
        };
        let p = moving.at(1.0);
        assert!(p.center[0].abs() < 1e-12 && (p.center[1] - 10.0).abs() < 1e-12);
        let before = moving.observed(3.0);
        assert!((before.at(2.0).center[1] - 50.0).abs() < 1e-12);
        let seen = moving.observed(4.5);
        assert!((seen.center[1] - 44.375).abs() < 1e-12);
        assert!((seen.at(1.0).center[1] - 49.375).abs() < 1e-12);
        assert!((seen.at(10.0).center[1] - 50.0).abs() < 1e-12);
        assert!((moving.at(6.0).center[1] - 50.0).abs() < 1e-12);
    }
}
