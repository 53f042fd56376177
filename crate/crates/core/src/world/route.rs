//! Arc-length parametrised route polylines.

use serde::{Deserialize, Serialize};

use super::map::WorldMap;
use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, segments_intersect, Vec2};

/// A route resolved into one polyline with cumulative arc length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutePath {
    pub name: String,
    points: Vec<Vec2>,
    cum: Vec<f64>,
    /// Unwrapped vertex headings, averaged over the adjacent segments.
    headings: Vec<f64>,
    /// Speed limit of each segment.
    limits: Vec<f64>,
    widths: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouteProjection {
    pub s: f64,
    /// Signed lateral offset, positive to the left of the travel direction.
    pub lateral: f64,
    pub distance: f64,
}

impl RoutePath {
    pub fn from_map(map: &WorldMap, name: &str) -> Result<Self> {
        let chain = map
            .routes
            .get(name)
            .ok_or_else(|| Error::UnknownRoute(name.to_string()))?;
        let mut points: Vec<Vec2> = Vec::new();
        let mut limits = Vec::new();
        let mut widths = Vec::new();
        for id in chain {
            let lane = map
                .lane(*id)
                .ok_or_else(|| Error::InvalidMap(format!("route {name:?} references {id:?}")))?;
            for &p in &lane.centerline {
                if points.last().map_or(true, |q: &Vec2| q.distance(p) > 1e-9) {
                    if !points.is_empty() {
                        limits.push(lane.speed_limit);
                        widths.push(lane.width);
                    }
                    points.push(p);
                }
            }
        }
        Self::from_points(name, points, limits, widths)
    }

    pub fn from_points(name: &str, points: Vec<Vec2>, limits: Vec<f64>, widths: Vec<f64>) -> Result<Self> {
        if points.len() < 2 || limits.len() + 1 != points.len() || widths.len() != limits.len() {
            return Err(Error::DegenerateRoute(name.to_string()));
        }
        let mut cum = Vec::with_capacity(points.len());
        cum.push(0.0);
        for w in points.windows(2) {
            let last = *cum.last().unwrap();
            cum.push(last + w[0].distance(w[1]));
        }
        if !(*cum.last().unwrap() > 0.0) {
            return Err(Error::DegenerateRoute(name.to_string()));
        }
        let seg_heading: Vec<f64> = points.windows(2).map(|w| (w[1] - w[0]).angle()).collect();
        let mut unwrapped = Vec::with_capacity(seg_heading.len());
        for (i, &h) in seg_heading.iter().enumerate() {
            if i == 0 {
                unwrapped.push(h);
            } else {
                let prev: f64 = unwrapped[i - 1];
                unwrapped.push(prev + crate::geometry::normalize_angle(h - prev));
            }
        }
        let n = points.len();
        let mut headings = Vec::with_capacity(n);
        headings.push(unwrapped[0]);
        for i in 1..n - 1 {
            headings.push(0.5 * (unwrapped[i - 1] + unwrapped[i]));
        }
        headings.push(unwrapped[n - 2]);
        Ok(Self {
            name: name.to_string(),
            points,
            cum,
            headings,
            limits,
            widths,
        })
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cum
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let n = self.points.len();
        let i = self.cum.partition_point(|&c| c <= s).clamp(1, n - 1) - 1;
        let seg = self.cum[i + 1] - self.cum[i];
        (i, (s - self.cum[i]) / seg)
    }

    /// Point and heading at arc length `s`. Beyond either end the route is
    /// extended along its terminal heading.
    pub fn pose_at(&self, s: f64) -> (Vec2, f64) {
        let len = self.length();
        if s <= 0.0 {
            let h = self.headings[0];
            return (self.points[0] + Vec2::from_heading(h) * s, h);
        }
        if s >= len {
            let h = *self.headings.last().unwrap();
            return (*self.points.last().unwrap() + Vec2::from_heading(h) * (s - len), h);
        }
        let (i, f) = self.locate(s);
        let p = self.points[i].lerp(self.points[i + 1], f);
        let h = self.headings[i] + (self.headings[i + 1] - self.headings[i]) * f;
        (p, h)
    }

    /// Point offset `lateral` metres to the left of the route at `s`.
    pub fn offset_point(&self, s: f64, lateral: f64) -> Vec2 {
        let (p, h) = self.pose_at(s);
        p + Vec2::from_heading(h).perp() * lateral
    }

    pub fn speed_limit_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        self.limits[self.locate(s).0]
    }

    pub fn width_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        self.widths[self.locate(s).0]
    }

    /// Lowest speed limit over `[s0, s1]`.
    pub fn min_limit_between(&self, s0: f64, s1: f64) -> f64 {
        let (a, _) = self.locate(s0.clamp(0.0, self.length()));
        let (b, _) = self.locate(s1.clamp(0.0, self.length()));
        self.limits[a..=b].iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Closest point on the polyline; ties resolve to the smallest arc length.
    pub fn project(&self, p: Vec2) -> RouteProjection {
        let mut best = RouteProjection {
            s: 0.0,
            lateral: 0.0,
            distance: f64::INFINITY,
        };
        for i in 0..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let (d, t) = point_segment_distance(p, a, b);
            if d < best.distance {
                let s = self.cum[i] + t * (self.cum[i + 1] - self.cum[i]);
                let lateral = (b - a).normalized().cross(p - a);
                best = RouteProjection { s, lateral, distance: d };
            }
        }
        best
    }

    /// Closest point among the segments overlapping `[s_lo, s_hi]`.
    pub fn project_between(&self, p: Vec2, s_lo: f64, s_hi: f64) -> RouteProjection {
        let n = self.points.len();
        let lo = self.cum.partition_point(|&c| c <= s_lo).saturating_sub(1).min(n - 2);
        let hi = self.cum.partition_point(|&c| c < s_hi).clamp(lo + 1, n - 1);
        let mut best = RouteProjection {
            s: self.cum[lo],
            lateral: 0.0,
            distance: f64::INFINITY,
        };
        for i in lo..hi {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let (d, t) = point_segment_distance(p, a, b);
            if d < best.distance {
                let s = self.cum[i] + t * (self.cum[i + 1] - self.cum[i]);
                best = RouteProjection {
                    s,
                    lateral: (b - a).normalized().cross(p - a),
                    distance: d,
                };
            }
        }
        best
    }

    /// Arc length of the first crossing of segment `ab` with the route within
    /// `[s_min, s_max]`.
    pub fn crossing_s(&self, a: Vec2, b: Vec2, s_min: f64, s_max: f64) -> Option<f64> {
        for i in 0..self.points.len() - 1 {
            if self.cum[i + 1] < s_min || self.cum[i] > s_max {
                continue;
            }
            let (p, q) = (self.points[i], self.points[i + 1]);
            if segments_intersect(p, q, a, b) {
                let d = q - p;
                let e = b - a;
                let denom = d.cross(e);
                let t = if denom.abs() < 1e-15 {
                    0.0
                } else {
                    ((a - p).cross(e) / denom).clamp(0.0, 1.0)
                };
                let s = self.cum[i] + t * (self.cum[i + 1] - self.cum[i]);
                if s >= s_min && s <= s_max {
                    return Some(s);
                }
            }
        }
        None
    }
}

/// Arc length of `point` along `route`, clamped to `[0, length]`.
pub fn project_onto_route(point: Vec2, route: &RoutePath) -> f64 {
    route.project(point).s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::map::{build_synthetic_world, Template, WorldGenSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn four_way() -> (WorldMap, RoutePath) {
        let spec = WorldGenSpec {
            template: Template::FourWay,
            length: crate::world::Span::fixed(60.0),
            ..WorldGenSpec::default()
        };
        let map = build_synthetic_world(&spec, 1).unwrap();
        let route = RoutePath::from_map(&map, "north→east").unwrap();
        (map, route)
    }

    #[test]
    fn arc_length_matches_numerical_integration() {
        let (map, route) = four_way();
        // integrate |dp/du| over every lane in the chain with a fine midpoint rule
        let mut total = 0.0;
        for id in &map.routes["north→east"] {
            let lane = map.lane(*id).unwrap();
            for w in lane.centerline.windows(2) {
                let steps = 1000;
                for k in 0..steps {
                    let u0 = k as f64 / steps as f64;
                    let u1 = (k + 1) as f64 / steps as f64;
                    total += w[0].lerp(w[1], u0).distance(w[0].lerp(w[1], u1));
                }
            }
        }
        assert!((route.length() - total).abs() < 1e-9, "{} vs {}", route.length(), total);
    }

    #[test]
    fn projection_endpoints() {
        let (_, route) = four_way();
        assert_eq!(project_onto_route(route.points()[0], &route), 0.0);
        let end = *route.points().last().unwrap();
        assert!((project_onto_route(end, &route) - route.length()).abs() < 1e-9);
    }

    #[test]
    fn projection_matches_dense_sampling() {
        let (_, route) = four_way();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // dense samples every millimetre along the route
        let len = route.length();
        let n = (len / 0.001) as usize;
        let samples: Vec<(f64, Vec2)> = (0..=n)
            .map(|k| {
                let s = (k as f64 * 0.001).min(len);
                (s, route.pose_at(s).0)
            })
            .collect();
        for _ in 0..100 {
            let s_true = rng.gen_range(0.0..len);
            let p = route.offset_point(s_true, rng.gen_range(-3.0..3.0));
            let mut best = (f64::INFINITY, 0.0);
            for &(s, q) in &samples {
                let d = p.distance(q);
                if d < best.0 {
                    best = (d, s);
                }
            }
            let s = project_onto_route(p, &route);
            assert!((s - best.1).abs() < 0.01, "{s} vs {}", best.1);
        }
    }

    #[test]
    fn projection_monotone_along_polyline() {
        let (_, route) = four_way();
        let mut last = -1.0;
        for &p in route.points() {
            let s = project_onto_route(p, &route);
            assert!(s >= last);
            last = s;
        }
    }

    #[test]
    fn pose_is_continuous() {
        let (_, route) = four_way();
        let mut prev = route.pose_at(0.0);
        let mut s = 0.0;
        while s < route.length() {
            s += 0.01;
            let cur = route.pose_at(s);
            assert!(cur.0.distance(prev.0) < 0.0101);
            assert!((cur.1 - prev.1).abs() < 0.01);
            prev = cur;
        }
    }
}
