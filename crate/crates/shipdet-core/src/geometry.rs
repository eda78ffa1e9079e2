//! Axis-aligned and oriented bounding boxes.
//!
//! Oriented boxes are stored as four vertices in a canonical cyclic order:
//! the first vertex is the one nearest the coordinate origin (ties broken by
//! smaller polar angle about the origin, then smaller x), and the remaining
//! three follow in ascending polar angle about the quad centroid, i.e.
//! counter-clockwise in mathematical orientation (positive shoelace area).
//! Canonicalization is idempotent and invariant under any permutation of the
//! input points.
//!
//! All operations are pure functions on immutable values.

use alloc::vec::Vec;

use crate::num;

/// Area below which a quad is considered degenerate, in the square of the
/// box's own coordinate unit.
pub const EPS_AREA: f64 = 1e-12;

/// Relative tolerance for bounds checks when rescaling.
pub const EPS_BOUNDS: f64 = 1e-6;

// Relative tolerance on cross products when classifying a 4-point set as
// convex; scaled by the squared extent of the point set.
const EPS_CONVEX: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeomError {
    /// Quad area below [`EPS_AREA`], or an otherwise unusable box.
    DegenerateQuad,
    /// The 4 points admit no simple convex cyclic order.
    SelfIntersecting,
    /// Operands live in different coordinate spaces.
    SpaceMismatch,
    /// Coordinates outside the declared space (beyond [`EPS_BOUNDS`]).
    OutOfBounds,
    /// An operation that requires canonical quads received a raw one.
    NotCanonical,
    /// NaN or infinite coordinate.
    NonFinite,
}

impl core::fmt::Display for GeomError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let msg = match self {
            GeomError::DegenerateQuad => "degenerate quad (area below threshold)",
            GeomError::SelfIntersecting => "points do not form a simple convex quad",
            GeomError::SpaceMismatch => "coordinate spaces differ",
            GeomError::OutOfBounds => "coordinates outside the declared space",
            GeomError::NotCanonical => "oriented box is not canonical",
            GeomError::NonFinite => "non-finite coordinate",
        };
        f.write_str(msg)
    }
}

impl core::error::Error for GeomError {}

/// The space coordinates are expressed in: pixels of a w x h image, or
/// normalized [0, 1] fractions of the image extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordSpace {
    Pixel { width: u32, height: u32 },
    Normalized,
}

impl CoordSpace {
    pub fn pixel(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "pixel space needs positive dims");
        CoordSpace::Pixel { width, height }
    }

    fn extent(&self) -> (f64, f64) {
        match self {
            CoordSpace::Pixel { width, height } => (f64::from(*width), f64::from(*height)),
            CoordSpace::Normalized => (1.0, 1.0),
        }
    }

    fn bounds_tolerance(&self) -> (f64, f64) {
        let (w, h) = self.extent();
        (EPS_BOUNDS * w.max(1.0), EPS_BOUNDS * h.max(1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    fn dist2_origin(&self) -> f64 {
        self.x * self.x + self.y * self.y
    }
}

/// Shorthand constructor.
pub fn pt(x: f64, y: f64) -> Point {
    Point::new(x, y)
}

#[inline]
fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Axis-aligned box [x_min, y_min, x_max, y_max] in a coordinate space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    space: CoordSpace,
}

impl HBox {
    pub fn new(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        space: CoordSpace,
    ) -> Result<Self, GeomError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeomError::DegenerateQuad);
        }
        Ok(HBox {
            x_min,
            y_min,
            x_max,
            y_max,
            space,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn space(&self) -> CoordSpace {
        self.space
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    fn check_bounds(&self) -> Result<(), GeomError> {
        let (w, h) = self.space.extent();
        let (tx, ty) = self.space.bounds_tolerance();
        if self.x_min < -tx || self.y_min < -ty || self.x_max > w + tx || self.y_max > h + ty {
            return Err(GeomError::OutOfBounds);
        }
        Ok(())
    }

    /// Linear remap into another coordinate space. The box must lie within
    /// its current space's bounds (up to [`EPS_BOUNDS`]).
    pub fn rescale(&self, to: CoordSpace) -> Result<HBox, GeomError> {
        self.check_bounds()?;
        let (fw, fh) = self.space.extent();
        let (tw, th) = to.extent();
        let (sx, sy) = (tw / fw, th / fh);
        HBox::new(
            self.x_min * sx,
            self.y_min * sy,
            self.x_max * sx,
            self.y_max * sy,
            to,
        )
    }
}

/// Standard intersection-over-union of two axis-aligned boxes.
pub fn hbb_iou(a: &HBox, b: &HBox) -> Result<f64, GeomError> {
    if a.space != b.space {
        return Err(GeomError::SpaceMismatch);
    }
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        // two zero-area boxes; treat as disjoint
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Oriented bounding box: four vertices in one coordinate space, with a flag
/// telling whether they are in canonical order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OBox {
    vertices: [Point; 4],
    space: CoordSpace,
    canonical: bool,
}

impl OBox {
    /// Wraps four points without reordering; `canonical` is false.
    pub fn raw(vertices: [Point; 4], space: CoordSpace) -> Self {
        OBox {
            vertices,
            space,
            canonical: false,
        }
    }

    pub fn vertices(&self) -> &[Point; 4] {
        &self.vertices
    }

    pub fn space(&self) -> CoordSpace {
        self.space
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical
    }

    pub fn area(&self) -> f64 {
        num::abs(shoelace2(&self.vertices)) / 2.0
    }

    /// Vertices flattened as [x1, y1, ..., x4, y4].
    pub fn flat_coords(&self) -> [f64; 8] {
        let v = &self.vertices;
        [
            v[0].x, v[0].y, v[1].x, v[1].y, v[2].x, v[2].y, v[3].x, v[3].y,
        ]
    }

    /// Remaps the vertices into another space and re-canonicalizes there
    /// (the origin-nearest vertex can change under anisotropic scaling).
    pub fn rescale(&self, to: CoordSpace) -> Result<OBox, GeomError> {
        quad_bounding_hbox(self)?.check_bounds()?;
        let (fw, fh) = self.space.extent();
        let (tw, th) = to.extent();
        let (sx, sy) = (tw / fw, th / fh);
        let mapped = self.vertices.map(|p| pt(p.x * sx, p.y * sy));
        if self.canonical {
            canonicalize_quad(&mapped, to)
        } else {
            Ok(OBox::raw(mapped, to))
        }
    }
}

fn shoelace2(pts: &[Point]) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        acc += a.x * b.y - a.y * b.x;
    }
    acc
}

/// Orders four points into the canonical oriented-box form.
///
/// The points are sorted into convex cyclic order (ascending polar angle
/// about their centroid), verified convex, then rotated so the vertex
/// nearest the origin comes first. Non-convex or degenerate inputs are
/// rejected. Idempotent, and invariant under input permutation.
pub fn canonicalize_quad(raw: &[Point; 4], space: CoordSpace) -> Result<OBox, GeomError> {
    if !raw.iter().all(Point::is_finite) {
        return Err(GeomError::NonFinite);
    }
    for i in 0..4 {
        for j in i + 1..4 {
            if raw[i] == raw[j] {
                return Err(GeomError::DegenerateQuad);
            }
        }
    }

    // sort by polar angle about the vertex centroid
    let cx = raw.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = raw.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mut order = [0usize, 1, 2, 3];
    let angle = |i: usize| num::atan2(raw[i].y - cy, raw[i].x - cx);
    order.sort_unstable_by(|&a, &b| {
        angle(a)
            .partial_cmp(&angle(b))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let sorted = order.map(|i| raw[i]);

    // convexity: every turn of the cyclic order must be a non-right turn
    let extent2 = {
        let (mut dx, mut dy) = (0.0f64, 0.0f64);
        for p in &sorted {
            dx = dx.max(num::abs(p.x - cx));
            dy = dy.max(num::abs(p.y - cy));
        }
        (dx * dx + dy * dy).max(1.0e-300)
    };
    for i in 0..4 {
        let c = cross(sorted[i], sorted[(i + 1) % 4], sorted[(i + 2) % 4]);
        if c < -EPS_CONVEX * extent2 {
            return Err(GeomError::SelfIntersecting);
        }
    }

    let area = shoelace2(&sorted) / 2.0;
    if area < EPS_AREA {
        return Err(GeomError::DegenerateQuad);
    }

    // anchor at the origin-nearest vertex; ties by polar angle about the
    // origin, then by x
    let mut anchor = 0;
    for i in 1..4 {
        let (a, b) = (sorted[i], sorted[anchor]);
        let (da, db) = (a.dist2_origin(), b.dist2_origin());
        let better = da < db
            || (da == db && {
                let (pa, pb) = (num::atan2(a.y, a.x), num::atan2(b.y, b.x));
                pa < pb || (pa == pb && a.x < b.x)
            });
        if better {
            anchor = i;
        }
    }
    let mut vertices = [Point::new(0.0, 0.0); 4];
    for i in 0..4 {
        vertices[i] = sorted[(anchor + i) % 4];
    }

    Ok(OBox {
        vertices,
        space,
        canonical: true,
    })
}

/// A simple polygon; used for clipping intermediates (a quad-quad
/// intersection has at most 8 vertices).
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Polygon { vertices }
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    fn from_quad(q: &OBox) -> Polygon {
        Polygon::new(q.vertices.to_vec())
    }
}

/// Absolute shoelace area of a simple polygon.
pub fn polygon_area(p: &Polygon) -> f64 {
    if p.vertices.len() < 3 {
        return 0.0;
    }
    num::abs(shoelace2(&p.vertices)) / 2.0
}

/// Sutherland-Hodgman clip of `subject` against a convex `clip` polygon.
/// Returns the intersection; an empty polygon is a valid result.
pub fn polygon_clip(subject: &Polygon, clip: &Polygon) -> Polygon {
    if subject.vertices.is_empty() || clip.vertices.len() < 3 {
        return Polygon::new(Vec::new());
    }
    // orient the clip polygon positively so "inside" is the left side
    let mut clip_pts = clip.vertices.clone();
    if shoelace2(&clip_pts) < 0.0 {
        clip_pts.reverse();
    }

    let mut output = subject.vertices.clone();
    let n = clip_pts.len();
    for e in 0..n {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip_pts[e], clip_pts[(e + 1) % n]);
        let input = core::mem::take(&mut output);
        let m = input.len();
        for i in 0..m {
            let prev = input[(i + m - 1) % m];
            let cur = input[i];
            let prev_in = cross(a, b, prev) >= 0.0;
            let cur_in = cross(a, b, cur) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersect(a, b, prev, cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersect(a, b, prev, cur));
            }
        }
    }
    if output.len() < 3 {
        return Polygon::new(Vec::new());
    }
    Polygon::new(output)
}

// Intersection of segment p->q with the infinite line through a->b. Only
// called when p and q sit on strictly opposite sides, so the denominator is
// nonzero.
fn line_intersect(a: Point, b: Point, p: Point, q: Point) -> Point {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let t = cp / (cp - cq);
    pt(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// IoU of two canonical oriented boxes via convex clipping + shoelace areas.
/// Exactly symmetric: the operand pair is put in a deterministic order
/// before any arithmetic.
pub fn quad_iou(a: &OBox, b: &OBox) -> Result<f64, GeomError> {
    if !a.canonical || !b.canonical {
        return Err(GeomError::NotCanonical);
    }
    if a.space != b.space {
        return Err(GeomError::SpaceMismatch);
    }
    let (first, second) = if lex_le(a, b) { (a, b) } else { (b, a) };
    let pa = Polygon::from_quad(first);
    let pb = Polygon::from_quad(second);
    let (area_a, area_b) = (polygon_area(&pa), polygon_area(&pb));
    if area_a < EPS_AREA || area_b < EPS_AREA {
        return Err(GeomError::DegenerateQuad);
    }
    let inter = polygon_area(&polygon_clip(&pa, &pb));
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

fn lex_le(a: &OBox, b: &OBox) -> bool {
    let (fa, fb) = (a.flat_coords(), b.flat_coords());
    for (x, y) in fa.iter().zip(fb.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    true
}

/// The axis-aligned box as a canonical quad (identical area).
pub fn hbox_to_quad(h: &HBox) -> Result<OBox, GeomError> {
    let corners = [
        pt(h.x_min, h.y_min),
        pt(h.x_max, h.y_min),
        pt(h.x_max, h.y_max),
        pt(h.x_min, h.y_max),
    ];
    canonicalize_quad(&corners, h.space)
}

/// Tightest axis-aligned box containing the quad.
pub fn quad_bounding_hbox(q: &OBox) -> Result<HBox, GeomError> {
    let v = &q.vertices;
    if !v.iter().all(Point::is_finite) {
        return Err(GeomError::NonFinite);
    }
    let x_min = v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let x_max = v.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let y_min = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let y_max = v.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    HBox::new(x_min, y_min, x_max, y_max, q.space)
}
