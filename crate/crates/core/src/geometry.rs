//! Planar geometry for the simulator: oriented rectangles, swept overlap
//! times and simple polygons.

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

/// Oriented rectangle centred at `center`, `length` along `heading`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub center: Point,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl Rect {
    pub fn new(center: Point, heading: f64, length: f64, width: f64) -> Self {
        Self { center, heading, length, width }
    }

    /// Unit vectors along the length and the width.
    pub fn axes(&self) -> [Point; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Point; 4] {
        let [u, v] = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let at = |a: f64, b: f64| [self.center[0] + a * u[0] + b * v[0], self.center[1] + a * u[1] + b * v[1]];
        [at(hl, hw), at(-hl, hw), at(-hl, -hw), at(hl, -hw)]
    }

    /// Half-extent of the projection onto the unit vector `n`.
    fn radius_on(&self, n: Point) -> f64 {
        let [u, v] = self.axes();
        self.length / 2.0 * dot(u, n).abs() + self.width / 2.0 * dot(v, n).abs()
    }

    /// Strict interior test.
    pub fn contains(&self, p: Point) -> bool {
        let [u, v] = self.axes();
        let d = sub(p, self.center);
        dot(d, u).abs() < self.length / 2.0 && dot(d, v).abs() < self.width / 2.0
    }
}

fn separating_axes(a: &Rect, b: &Rect) -> [Point; 4] {
    let [a0, a1] = a.axes();
    let [b0, b1] = b.axes();
    [a0, a1, b0, b1]
}

/// Separating-axis test. Touching rectangles do not overlap.
pub fn rects_overlap(a: &Rect, b: &Rect) -> bool {
    let d = sub(b.center, a.center);
    separating_axes(a, b).iter().all(|&n| dot(d, n).abs() < a.radius_on(n) + b.radius_on(n))
}

/// Earliest `t ≥ 0` at which `a` and `b`, translating at constant velocities
/// `va` and `vb` without rotating, overlap; `None` if they never do.
pub fn time_to_overlap(a: &Rect, va: Point, b: &Rect, vb: Point) -> Option<f64> {
    let d0 = sub(b.center, a.center);
    let w = sub(vb, va);
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for n in separating_axes(a, b) {
        let r = a.radius_on(n) + b.radius_on(n);
        let p = dot(d0, n);
        let q = dot(w, n);
        if q == 0.0 {
            if p.abs() >= r {
                return None;
            }
            continue;
        }
        let (t1, t2) = ((-r - p) / q, (r - p) / q);
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
        if lo >= hi {
            return None;
        }
    }
    Some(lo)
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(sub(p2, p1), sub(q1, p1));
    let d2 = cross(sub(p2, p1), sub(q2, p1));
    let d3 = cross(sub(q2, q1), sub(p1, q1));
    let d4 = cross(sub(q2, q1), sub(p2, q1));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: Point, b: Point, p: Point, c: f64| c == 0.0 && point_segment_distance(p, a, b) == 0.0;
    on(p1, p2, q1, d1) || on(p1, p2, q2, d2) || on(q1, q2, p1, d3) || on(q1, q2, p2, d4)
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
    let d = sub(p, c);
    dot(d, d).sqrt()
}

/// Points closer than this to an edge count as on the boundary.
pub const BOUNDARY_EPS: f64 = 1e-9;

/// Simple polygon given by its vertices (either orientation, no repeated closing vertex).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    points: Vec<Point>,
}

impl Polygon {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let p = Self { points };
        p.validate()?;
        Ok(p)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.points.len();
        (0..n).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        self.edges().map(|(a, b)| cross(a, b)).sum::<f64>() / 2.0
    }

    /// Rejects fewer than three vertices, non-finite or zero-area input and self-intersections.
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n < 3 {
            return invalid(format!("polygon needs at least 3 vertices, got {n}"));
        }
        if self.points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return invalid("polygon has non-finite vertices");
        }
        if self.signed_area().abs() <= 1e-12 {
            return invalid("polygon is degenerate (zero area)");
        }
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            if edges[i].0 == edges[i].1 {
                return invalid(format!("polygon has a repeated vertex at {i}"));
            }
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                if segments_intersect(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return invalid(format!("polygon edges {i} and {j} intersect"));
                }
            }
        }
        Ok(())
    }

    pub fn on_boundary(&self, p: Point) -> bool {
        self.edges().any(|(a, b)| point_segment_distance(p, a, b) <= BOUNDARY_EPS)
    }

    /// Closed containment: boundary points are inside.
    pub fn contains(&self, p: Point) -> bool {
        if self.on_boundary(p) {
            return true;
        }
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance along the unit ray `origin + s·dir` to the first boundary crossing.
    pub fn ray_distance(&self, origin: Point, dir: Point) -> Option<f64> {
        self.edges()
            .filter_map(|(a, b)| {
                let e = sub(b, a);
                let den = cross(dir, e);
                if den == 0.0 {
                    return None;
                }
                let ao = sub(a, origin);
                let s = cross(ao, e) / den;
                let u = cross(ao, dir) / den;
                (s >= 0.0 && (0.0..=1.0).contains(&u)).then_some(s)
            })
            .min_by(f64::total_cmp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64, y: f64, h: f64) -> Rect {
        Rect::new([x, y], h, 4.0, 2.0)
    }

    #[test]
    fn shared_edge_is_not_overlap() {
        assert!(!rects_overlap(&car(0.0, 0.0, 0.0), &car(4.0, 0.0, 0.0)));
        assert!(rects_overlap(&car(0.0, 0.0, 0.0), &car(3.999, 0.0, 0.0)));
        assert!(rects_overlap(&car(0.0, 0.0, 0.0), &car(0.0, 0.0, 1.0)));
    }

    #[test]
    fn rotated_separation() {
        // Diamond corner pointing at a box edge with a small gap.
        let d = Rect::new([0.0, 0.0], std::f64::consts::FRAC_PI_4, 2.0, 2.0);
        let reach = 2f64.sqrt();
        assert!(!rects_overlap(&d, &Rect::new([reach + 1.01, 0.0], 0.0, 2.0, 2.0)));
        assert!(rects_overlap(&d, &Rect::new([reach + 0.99, 0.0], 0.0, 2.0, 2.0)));
    }

    #[test]
    fn closing_gap_time() {
        // 5 m bumper-to-bumper gap closing at 10 m/s.
        let t = time_to_overlap(&car(0.0, 0.0, 0.0), [10.0, 0.0], &car(9.0, 0.0, 0.0), [0.0, 0.0]).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert_eq!(time_to_overlap(&car(0.0, 0.0, 0.0), [5.0, 0.0], &car(9.0, 0.0, 0.0), [5.0, 0.0]), None);
        assert_eq!(time_to_overlap(&car(0.0, 0.0, 0.0), [0.0, 0.0], &car(0.0, 1.0, 0.0), [0.0, 0.0]), Some(0.0));
        assert_eq!(time_to_overlap(&car(0.0, 0.0, 0.0), [-1.0, 0.0], &car(9.0, 0.0, 0.0), [0.0, 0.0]), None);
    }

    #[test]
    fn polygon_containment_is_closed() {
        let sq = Polygon::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]]).unwrap();
        assert!(sq.contains([5.0, 5.0]));
        assert!(sq.contains([10.0, 3.0]));
        assert!(sq.contains([0.0, 0.0]));
        assert!(!sq.contains([10.01, 3.0]));
        assert_eq!(sq.ray_distance([5.0, 5.0], [1.0, 0.0]), Some(5.0));
    }

    #[test]
    fn polygon_rejects_bowtie_and_degenerate() {
        assert!(Polygon::new(vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).is_err());
        assert!(Polygon::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).is_err());
        assert!(Polygon::new(vec![[0.0, 0.0], [1.0, 0.0]]).is_err());
    }
}
