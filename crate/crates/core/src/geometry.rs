//! Simple-polygon geofences: even–odd inside test, signed distance and the
//! inward normal used as the barrier gradient.
//!
//! The signed distance is positive inside, negative outside and zero on the
//! boundary. Boundary points are classified as inside so that the safe set
//! `{h >= 0}` is closed.

use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Consecutive vertices closer than this are rejected as duplicates.
pub const VERTEX_EPS: f64 = 1e-9;
/// Two nearest features whose distances differ by less than this make the
/// gradient ambiguous.
pub const FEATURE_TIE_EPS: f64 = 1e-9;
/// Step used by [`Polygon::inward_normal_or_fd`] when the analytic normal is undefined.
pub const FD_FALLBACK_STEP: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("vertex {0} is not finite")]
    NonFiniteVertex(usize),
    #[error("vertices {0} and {1} coincide")]
    DuplicateVertex(usize, usize),
    #[error("edges {0} and {1} intersect; polygon is not simple")]
    SelfIntersection(usize, usize),
    #[error("gradient undefined: two boundary features are equidistant")]
    DegenerateGradient,
    #[error("polygon file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("polygon file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Boundary feature closest to a query point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Feature {
    Edge(usize),
    Vertex(usize),
}

#[derive(Debug, Clone, Copy)]
struct Nearest {
    feature: Feature,
    dist: f64,
    closest: Point2,
}

/// A simple polygon, closed implicitly from the last vertex back to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point2>,
}

impl Polygon {
    /// Validates vertex count, finiteness, duplicate consecutive vertices and
    /// simplicity (pairwise segment intersection).
    pub fn new(vertices: Vec<Point2>) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeometryError::TooFewVertices(n));
        }
        if let Some(i) = vertices.iter().position(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteVertex(i));
        }
        for i in 0..n {
            let j = (i + 1) % n;
            if vertices[i].sub(vertices[j]).norm() <= VERTEX_EPS {
                return Err(GeometryError::DuplicateVertex(i, j));
            }
        }
        let poly = Self { vertices };
        poly.check_simple()?;
        Ok(poly)
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Self::new(vec![
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y1),
            Point2::new(x0, y1),
        ])
    }

    /// Parses the plain-text fence format: one `x y` pair per line, `#` starts
    /// a comment, blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let mut verts = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<f64, GeometryError> {
                tok.ok_or_else(|| GeometryError::Parse {
                    line: lineno + 1,
                    msg: "expected two coordinates".into(),
                })?
                .parse::<f64>()
                .map_err(|e| GeometryError::Parse {
                    line: lineno + 1,
                    msg: e.to_string(),
                })
            };
            let x = parse(it.next())?;
            let y = parse(it.next())?;
            if it.next().is_some() {
                return Err(GeometryError::Parse {
                    line: lineno + 1,
                    msg: "trailing tokens".into(),
                });
            }
            verts.push(Point2::new(x, y));
        }
        Self::new(verts)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GeometryError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# x y (meters)\n");
        for v in &self.vertices {
            s.push_str(&format!("{} {}\n", v.x, v.y));
        }
        s
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), v| (a.min(v.x), b.min(v.y), c.max(v.x), d.max(v.y)),
        )
    }

    fn check_simple(&self) -> Result<(), GeometryError> {
        let n = self.vertices.len();
        let edge = |i: usize| (self.vertices[i], self.vertices[(i + 1) % n]);
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                let (a, b) = edge(i);
                let (c, d) = edge(j);
                if adjacent {
                    // Adjacent edges share one vertex; they must not fold back
                    // onto each other.
                    let (shared, p, q) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                    let u = p.sub(shared);
                    let v = q.sub(shared);
                    if u.cross(v).abs() <= 1e-12 * u.norm() * v.norm() && u.dot(v) > 0.0 {
                        return Err(GeometryError::SelfIntersection(i, j));
                    }
                } else if segments_intersect(a, b, c, d) {
                    return Err(GeometryError::SelfIntersection(i, j));
                }
            }
        }
        Ok(())
    }

    fn nearest_features(&self, p: Point2) -> (Nearest, Option<Nearest>) {
        let mut best: Option<Nearest> = None;
        let mut second: Option<Nearest> = None;
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let (t, q) = closest_on_segment(a, b, p);
            let feature = if t <= 0.0 {
                Feature::Vertex(i)
            } else if t >= 1.0 {
                Feature::Vertex((i + 1) % n)
            } else {
                Feature::Edge(i)
            };
            let cand = Nearest {
                feature,
                dist: p.sub(q).norm(),
                closest: q,
            };
            match best {
                None => best = Some(cand),
                Some(b0) if cand.dist < b0.dist => {
                    if b0.feature != cand.feature {
                        second = Some(b0);
                    }
                    best = Some(cand);
                }
                Some(b0) => {
                    if cand.feature != b0.feature
                        && second.is_none_or(|s| cand.dist < s.dist)
                    {
                        second = Some(cand);
                    }
                }
            }
        }
        (best.expect("polygon has edges"), second)
    }

    /// Unsigned distance from `p` to the boundary.
    pub fn boundary_distance(&self, p: Point2) -> f64 {
        self.edges()
            .map(|(a, b)| p.sub(closest_on_segment(a, b, p).1).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Even–odd inside test; points on an edge count as inside.
    pub fn contains(&self, p: Point2) -> bool {
        if self.boundary_distance(p) == 0.0 {
            return true;
        }
        self.crossing_parity(p)
    }

    fn crossing_parity(&self, p: Point2) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Signed distance: positive inside, negative outside, zero on the boundary.
    pub fn signed_distance(&self, p: Point2) -> f64 {
        let d = self.boundary_distance(p);
        if d == 0.0 || self.crossing_parity(p) {
            d
        } else {
            -d
        }
    }

    /// Unit gradient of the signed distance, computed from the nearest
    /// boundary feature.
    ///
    /// Fails with [`GeometryError::DegenerateGradient`] when two distinct
    /// features tie within [`FEATURE_TIE_EPS`], or when `p` sits exactly on a
    /// vertex.
    pub fn inward_normal(&self, p: Point2) -> Result<Point2, GeometryError> {
        let (best, second) = self.nearest_features(p);
        if let Some(s) = second {
            if s.dist - best.dist <= FEATURE_TIE_EPS {
                return Err(GeometryError::DegenerateGradient);
            }
        }
        let d = p.sub(best.closest);
        if best.dist > 0.0 {
            let sign = if self.crossing_parity(p) { 1.0 } else { -1.0 };
            return Ok(Point2::new(sign * d.x / best.dist, sign * d.y / best.dist));
        }
        // On the boundary: use the edge's perpendicular toward the interior.
        match best.feature {
            Feature::Vertex(_) => Err(GeometryError::DegenerateGradient),
            Feature::Edge(i) => {
                let n = self.vertices.len();
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                let t = b.sub(a);
                let len = t.norm();
                let left = Point2::new(-t.y / len, t.x / len);
                let probe = Point2::new(p.x + 1e-6 * left.x, p.y + 1e-6 * left.y);
                if self.crossing_parity(probe) {
                    Ok(left)
                } else {
                    Ok(Point2::new(-left.x, -left.y))
                }
            }
        }
    }

    /// [`Self::inward_normal`] with a central finite-difference fallback.
    pub fn inward_normal_or_fd(&self, p: Point2) -> Point2 {
        match self.inward_normal(p) {
            Ok(n) => n,
            Err(_) => {
                let h = FD_FALLBACK_STEP;
                let gx = (self.signed_distance(Point2::new(p.x + h, p.y))
                    - self.signed_distance(Point2::new(p.x - h, p.y)))
                    / (2.0 * h);
                let gy = (self.signed_distance(Point2::new(p.x, p.y + h))
                    - self.signed_distance(Point2::new(p.x, p.y - h)))
                    / (2.0 * h);
                let norm = gx.hypot(gy);
                if norm > 0.0 {
                    Point2::new(gx / norm, gy / norm)
                } else {
                    Point2::new(0.0, 0.0)
                }
            }
        }
    }
}

/// Parameter `t ∈ [0, 1]` and point of the segment `ab` closest to `p`.
fn closest_on_segment(a: Point2, b: Point2, p: Point2) -> (f64, Point2) {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    (t, Point2::new(a.x + t * ab.x, a.y + t * ab.y))
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    b.sub(a).cross(c.sub(a))
}

fn on_segment(a: Point2, b: Point2, p: Point2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching counts).
pub fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}
