//! Piecewise-linear reference paths with arc-length parametrization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("path needs at least two distinct points")]
    TooShort,
    #[error("non-finite waypoint at index {0}")]
    NonFinite(usize),
}

/// Result of projecting a point onto the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the closest point.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the direction of travel.
    pub lateral: f64,
    pub point: [f64; 2],
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PathSpec", into = "PathSpec")]
pub struct Path {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
    closed: bool,
}

#[derive(Serialize, Deserialize)]
struct PathSpec {
    points: Vec<[f64; 2]>,
    #[serde(default)]
    closed: bool,
}

impl TryFrom<PathSpec> for Path {
    type Error = PathError;

    fn try_from(spec: PathSpec) -> Result<Self, Self::Error> {
        Path::new(spec.points, spec.closed)
    }
}

impl From<Path> for PathSpec {
    fn from(p: Path) -> Self {
        let mut points = p.points;
        if p.closed {
            points.pop();
        }
        PathSpec { points, closed: p.closed }
    }
}

impl Path {
    /// Consecutive duplicate points are dropped. A closed path gets its first
    /// point appended so the last segment returns to the start.
    pub fn new(points: Vec<[f64; 2]>, closed: bool) -> Result<Self, PathError> {
        if let Some(i) = points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(PathError::NonFinite(i));
        }
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(points.len() + 1);
        for p in points {
            if pts.last().map_or(true, |q| dist(q, &p) > 1e-12) {
                pts.push(p);
            }
        }
        if closed && pts.len() > 1 && dist(&pts[0], pts.last().unwrap()) > 1e-12 {
            pts.push(pts[0]);
        }
        if pts.len() < 2 {
            return Err(PathError::TooShort);
        }
        let mut cumulative = vec![0.0];
        for w in pts.windows(2) {
            cumulative.push(cumulative.last().unwrap() + dist(&w[0], &w[1]));
        }
        Ok(Self {
            points: pts,
            cumulative,
            closed,
        })
    }

    /// Straight segment from `start` in direction `heading`.
    pub fn straight(start: [f64; 2], heading: f64, length: f64, spacing: f64) -> Result<Self, PathError> {
        let n = (length / spacing).ceil().max(1.0) as usize;
        let pts = (0..=n)
            .map(|i| {
                let s = length * i as f64 / n as f64;
                [start[0] + s * heading.cos(), start[1] + s * heading.sin()]
            })
            .collect();
        Self::new(pts, false)
    }

    /// Counter-clockwise circle of the given radius, starting at angle 0.
    pub fn circle(center: [f64; 2], radius: f64, segments: usize) -> Result<Self, PathError> {
        let pts = (0..segments)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / segments as f64;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            })
            .collect();
        Self::new(pts, true)
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Arc length wrapped for closed paths, clamped for open ones.
    pub fn normalize_s(&self, s: f64) -> f64 {
        let len = self.length();
        if self.closed {
            s.rem_euclid(len)
        } else {
            s.clamp(0.0, len)
        }
    }

    fn segment_at(&self, s: f64) -> usize {
        let s = self.normalize_s(s);
        match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        }
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let s_n = self.normalize_s(s);
        let i = self.segment_at(s_n);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = if seg > 0.0 { (s_n - self.cumulative[i]) / seg } else { 0.0 };
        let (a, b) = (self.points[i], self.points[i + 1]);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    /// Heading of the segment containing `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Signed curvature of the circle through the points at `s - ds`, `s`
    /// and `s + ds`.
    pub fn curvature_at(&self, s: f64, ds: f64) -> f64 {
        let a = self.point_at(s - ds);
        let b = self.point_at(s);
        let c = self.point_at(s + ds);
        let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        let denom = dist(&a, &b) * dist(&b, &c) * dist(&a, &c);
        if denom < 1e-12 {
            0.0
        } else {
            2.0 * cross / denom
        }
    }

    /// Closest point over all segments.
    pub fn project(&self, p: [f64; 2]) -> Projection {
        self.project_window(p, 0, self.points.len() - 1)
    }

    /// Closest point searching only `count` segments starting at `first`
    /// (wrapping on closed paths). Useful to keep projections local.
    pub fn project_window(&self, p: [f64; 2], first: usize, count: usize) -> Projection {
        let nseg = self.points.len() - 1;
        let mut best = Projection {
            s: 0.0,
            lateral: f64::INFINITY,
            point: self.points[0],
            segment: 0,
        };
        let mut best_d = f64::INFINITY;
        for k in 0..count.min(nseg) {
            let i = if self.closed { (first + k) % nseg } else { (first + k).min(nseg - 1) };
            let (a, b) = (self.points[i], self.points[i + 1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
            let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = dist(&c, &p);
            if d < best_d - 1e-12 {
                best_d = d;
                let cross = ab[0] * (p[1] - a[1]) - ab[1] * (p[0] - a[0]);
                best = Projection {
                    s: self.cumulative[i] + t * len2.sqrt(),
                    lateral: d.copysign(if cross == 0.0 { 1.0 } else { cross }),
                    point: c,
                    segment: i,
                };
            }
        }
        best
    }

    /// Arc-length distance travelled from `s0` to `s1` in the direction of
    /// travel (wrapped on closed paths).
    pub fn advance(&self, s0: f64, s1: f64) -> f64 {
        if self.closed {
            (s1 - s0).rem_euclid(self.length())
        } else {
            s1 - s0
        }
    }
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}
