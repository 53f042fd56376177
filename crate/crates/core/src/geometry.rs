//! Planar geometry: vectors, oriented rectangles and polygon predicates.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector pointing along `heading` (radians, counter-clockwise from +x).
    pub fn from_heading(heading: f64) -> Self {
        Self::new(heading.cos(), heading.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Left-hand perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            Vec2::ZERO
        }
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn lerp(self, other: Vec2, t: f64) -> Vec2 {
        self + (other - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Rigid transform that maps world coordinates into a frame whose origin is
/// `origin` and whose +x axis points along `heading`.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    origin: Vec2,
    cos: f64,
    sin: f64,
    heading: f64,
}

impl Frame {
    pub fn new(origin: Vec2, heading: f64) -> Self {
        let (sin, cos) = heading.sin_cos();
        Self {
            origin,
            cos,
            sin,
            heading,
        }
    }

    pub fn to_local(&self, p: Vec2) -> Vec2 {
        let d = p - self.origin;
        Vec2::new(self.cos * d.x + self.sin * d.y, -self.sin * d.x + self.cos * d.y)
    }

    pub fn heading_to_local(&self, h: f64) -> f64 {
        normalize_angle(h - self.heading)
    }
}

/// A rectangle with arbitrary orientation. `heading` is the direction of the
/// length axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        Self {
            center,
            heading,
            half_length: 0.5 * length,
            half_width: 0.5 * width,
        }
    }

    pub fn inflated(mut self, margin: f64) -> Self {
        self.half_length += margin;
        self.half_width += margin;
        self
    }

    fn axes(&self) -> (Vec2, Vec2) {
        let u = Vec2::from_heading(self.heading);
        (u, u.perp())
    }

    /// Corners in counter-clockwise order starting at front-right.
    pub fn corners(&self) -> [Vec2; 4] {
        let (u, v) = self.axes();
        let l = u * self.half_length;
        let w = v * self.half_width;
        [
            self.center + l - w,
            self.center + l + w,
            self.center - l + w,
            self.center - l - w,
        ]
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }

    fn project(&self, axis: Vec2) -> (f64, f64) {
        let (u, v) = self.axes();
        let c = self.center.dot(axis);
        let r = self.half_length * u.dot(axis).abs() + self.half_width * v.dot(axis).abs();
        (c - r, c + r)
    }

    /// Separating-axis overlap test. Touching rectangles count as overlapping.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let reach = self.bounding_radius() + other.bounding_radius();
        if (self.center - other.center).norm_sq() > reach * reach {
            return false;
        }
        let (a0, a1) = self.axes();
        let (b0, b1) = other.axes();
        for axis in [a0, a1, b0, b1] {
            let (min_a, max_a) = self.project(axis);
            let (min_b, max_b) = other.project(axis);
            if max_a < min_b || max_b < min_a {
                return false;
            }
        }
        true
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let (u, v) = self.axes();
        let d = p - self.center;
        d.dot(u).abs() <= self.half_length && d.dot(v).abs() <= self.half_width
    }
}

/// Sutherland–Hodgman clip of convex polygon `subject` by convex polygon
/// `clip`. Both must be counter-clockwise.
pub fn convex_intersection(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output: Vec<Vec2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b - a;
        let inside = |p: Vec2| edge.cross(p - a) >= 0.0;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn line_intersection(p0: Vec2, p1: Vec2, a: Vec2, b: Vec2) -> Vec2 {
    let d = p1 - p0;
    let e = b - a;
    let denom = d.cross(e);
    if denom.abs() < 1e-15 {
        return p0;
    }
    let t = (a - p0).cross(e) / denom;
    p0 + d * t
}

/// Centroid of the overlap region of two rectangles, falling back to the
/// midpoint of the centres for degenerate (touching) overlaps.
pub fn contact_point(a: &OrientedRect, b: &OrientedRect) -> Vec2 {
    let poly = convex_intersection(&a.corners(), &b.corners());
    if poly.is_empty() {
        return a.center.lerp(b.center, 0.5);
    }
    let n = poly.len() as f64;
    poly.iter().fold(Vec2::ZERO, |acc, &p| acc + p) * (1.0 / n)
}

/// Winding number of `polygon` around `p`; non-zero means inside.
pub fn winding_number(p: Vec2, polygon: &[Vec2]) -> i32 {
    let mut wn = 0;
    let n = polygon.len();
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        let side = (b - a).cross(p - a);
        if a.y <= p.y {
            if b.y > p.y && side > 0.0 {
                wn += 1;
            }
        } else if b.y <= p.y && side < 0.0 {
            wn -= 1;
        }
    }
    wn
}

pub fn point_in_polygon(p: Vec2, polygon: &[Vec2]) -> bool {
    winding_number(p, polygon) != 0
}

/// Distance from `p` to segment `ab` and the clamped parameter of the foot.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> (f64, f64) {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    let t = if len_sq > 0.0 {
        ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((a + ab * t - p).norm(), t)
}

pub fn distance_to_polygon_boundary(p: Vec2, polygon: &[Vec2]) -> f64 {
    let n = polygon.len();
    (0..n)
        .map(|i| point_segment_distance(p, polygon[i], polygon[(i + 1) % n]).0)
        .fold(f64::INFINITY, f64::min)
}

/// Positive outside the polygon, negative inside.
pub fn signed_distance_to_polygon(p: Vec2, polygon: &[Vec2]) -> f64 {
    let d = distance_to_polygon_boundary(p, polygon);
    if point_in_polygon(p, polygon) {
        -d
    } else {
        d
    }
}

/// Closed-segment intersection test (touching endpoints intersect).
pub fn segments_intersect(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> bool {
    let d1 = (b1 - b0).cross(a0 - b0);
    let d2 = (b1 - b0).cross(a1 - b0);
    let d3 = (a1 - a0).cross(b0 - a0);
    let d4 = (a1 - a0).cross(b1 - a0);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: Vec2, q: Vec2, r: Vec2, d: f64| {
        d == 0.0
            && r.x >= p.x.min(q.x)
            && r.x <= p.x.max(q.x)
            && r.y >= p.y.min(q.y)
            && r.y <= p.y.max(q.y)
    };
    on(b0, b1, a0, d1) || on(b0, b1, a1, d2) || on(a0, a1, b0, d3) || on(a0, a1, b1, d4)
}

/// True when no two non-adjacent edges intersect and no vertex repeats.
pub fn polygon_is_simple(polygon: &[Vec2]) -> bool {
    let n = polygon.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a0 = polygon[i];
        let a1 = polygon[(i + 1) % n];
        if a0 == a1 {
            return false;
        }
        for j in (i + 1)..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let b0 = polygon[j];
            let b1 = polygon[(j + 1) % n];
            if segments_intersect(a0, a1, b0, b1) {
                return false;
            }
        }
    }
    true
}

/// Signed area, positive for counter-clockwise vertex order.
pub fn polygon_area(polygon: &[Vec2]) -> f64 {
    let n = polygon.len();
    0.5 * (0..n)
        .map(|i| polygon[i].cross(polygon[(i + 1) % n]))
        .sum::<f64>()
}

/// Curvature of the circle through three points; zero when degenerate.
pub fn three_point_curvature(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    let ab = a.distance(b);
    let bc = b.distance(c);
    let ca = c.distance(a);
    let denom = ab * bc * ca;
    if denom < 1e-12 {
        return 0.0;
    }
    2.0 * (b - a).cross(c - a).abs() / denom
}
