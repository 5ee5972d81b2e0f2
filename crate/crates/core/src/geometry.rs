//! Harbor map, vessel footprint and convex free-space extraction.
//!
//! Coordinates are `(north, east)` in meters. "Counterclockwise" means
//! positive shoelace area with north as the first axis.
//!
//! A [`ConvexRegion`] is a halfspace description `A p <= b` with unit-norm
//! rows, so constraint violations and slacks are measured in meters.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::vessel::{ModelParams, Pose};

pub type Point = Vector2<f64>;

const AREA_EPS: f64 = 1e-8;
const LENGTH_EPS: f64 = 1e-9;
/// Minimum distance kept between the seed position and any region edge.
const SEED_MARGIN: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("position ({0:.3}, {1:.3}) lies inside or on obstacle `{2}`")]
    PositionInsideObstacle(f64, f64, String),
    #[error("position ({0:.3}, {1:.3}) lies outside the world bounds")]
    PositionOutsideBounds(f64, f64),
    #[error("convex region is empty or no longer contains the seed point")]
    EmptyRegion,
    #[error("edge budget must be at least 3, got {0}")]
    InvalidBudget(usize),
    #[error("invalid polygon `{name}`: {reason}")]
    InvalidPolygon { name: String, reason: String },
    #[error("invalid footprint: {0}")]
    InvalidFootprint(String),
    #[error("invalid world bounds: {0}")]
    InvalidBounds(String),
    #[error("failed to read map file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse map file: {0}")]
    Parse(#[from] serde_json::Error),
}

fn cross(a: &Point, b: &Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Signed shoelace area.
pub fn signed_area(vertices: &[Point]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| cross(&vertices[i], &vertices[(i + 1) % n]))
        .sum::<f64>()
}

/// Closest point to `p` on segment `a`-`b`.
pub fn closest_point_on_segment(p: &Point, a: &Point, b: &Point) -> Point {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 <= 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&d) / len2).clamp(0.0, 1.0);
    a + d * t
}

pub fn segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    (p - closest_point_on_segment(p, a, b)).norm()
}

fn edges(vertices: &[Point]) -> impl Iterator<Item = (Point, Point)> + '_ {
    let n = vertices.len();
    (0..n).map(move |i| (vertices[i], vertices[(i + 1) % n]))
}

/// Distance from `p` to the boundary of a polygon.
pub fn boundary_distance(p: &Point, vertices: &[Point]) -> f64 {
    edges(vertices)
        .map(|(a, b)| segment_distance(p, &a, &b))
        .fold(f64::INFINITY, f64::min)
}

/// Winding-number point-in-polygon test; points on the boundary may go either way.
pub fn point_in_polygon(p: &Point, vertices: &[Point]) -> bool {
    let mut winding = 0i32;
    for (a, b) in edges(vertices) {
        let side = cross(&(b - a), &(p - a));
        if a[1] <= p[1] {
            if b[1] > p[1] && side > 0.0 {
                winding += 1;
            }
        } else if b[1] <= p[1] && side < 0.0 {
            winding -= 1;
        }
    }
    winding != 0
}

fn segments_intersect(a: &Point, b: &Point, c: &Point, d: &Point) -> bool {
    let orient = |p: &Point, q: &Point, r: &Point| cross(&(q - p), &(r - p));
    let on_segment = |p: &Point, q: &Point, r: &Point| {
        r[0] >= p[0].min(q[0]) - LENGTH_EPS
            && r[0] <= p[0].max(q[0]) + LENGTH_EPS
            && r[1] >= p[1].min(q[1]) - LENGTH_EPS
            && r[1] <= p[1].max(q[1]) + LENGTH_EPS
    };
    let (o1, o2, o3, o4) = (
        orient(a, b, c),
        orient(a, b, d),
        orient(c, d, a),
        orient(c, d, b),
    );
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0))
        && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0))
    {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// Keeps the part of `vertices` with `normal . x <= offset` (Sutherland-Hodgman).
///
/// Works for nonconvex subject polygons; the result may then contain
/// zero-width bridges, which do not affect its area.
pub fn clip_polygon(vertices: &[Point], normal: &Point, offset: f64) -> Vec<Point> {
    let n = vertices.len();
    let mut out = Vec::with_capacity(n + 2);
    if n == 0 {
        return out;
    }
    for i in 0..n {
        let cur = vertices[i];
        let next = vertices[(i + 1) % n];
        let dc = normal.dot(&cur) - offset;
        let dn = normal.dot(&next) - offset;
        if dc <= 0.0 {
            out.push(cur);
        }
        if (dc < 0.0 && dn > 0.0) || (dc > 0.0 && dn < 0.0) {
            let t = dc / (dc - dn);
            out.push(cur + (next - cur) * t);
        }
    }
    out
}

/// Area of the part of `subject` inside the convex polygon `clip`.
pub fn intersection_area(subject: &[Point], clip: &[Point]) -> f64 {
    let mut piece = subject.to_vec();
    for (a, b) in edges(clip) {
        let Some((normal, offset)) = edge_halfplane(&a, &b) else {
            continue;
        };
        piece = clip_polygon(&piece, &normal, offset);
        if piece.len() < 3 {
            return 0.0;
        }
    }
    signed_area(&piece).abs()
}

fn intersection_polygon(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut piece = subject.to_vec();
    for (a, b) in edges(clip) {
        if let Some((normal, offset)) = edge_halfplane(&a, &b) {
            piece = clip_polygon(&piece, &normal, offset);
        }
    }
    piece
}

/// Halfplane `n . x <= c` whose boundary is the line through `a`-`b` and
/// which keeps the left side of the directed edge. For a counterclockwise
/// convex polygon this is the polygon side.
fn edge_halfplane(a: &Point, b: &Point) -> Option<(Point, f64)> {
    let d = b - a;
    let len = d.norm();
    if len < LENGTH_EPS {
        return None;
    }
    let normal = Point::new(d[1], -d[0]) / len;
    Some((normal, normal.dot(a)))
}

/// Andrew's monotone chain; counterclockwise, no collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup_by(|a, b| (*a - *b).norm() < LENGTH_EPS);
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::new();
    for p in &pts {
        while lower.len() >= 2
            && cross(
                &(lower[lower.len() - 1] - lower[lower.len() - 2]),
                &(p - lower[lower.len() - 2]),
            ) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2
            && cross(
                &(upper[upper.len() - 1] - upper[upper.len() - 2]),
                &(p - upper[upper.len() - 2]),
            ) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Simple polygon with counterclockwise winding.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub name: String,
    pub vertices: Vec<Point>,
}

impl Polygon {
    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }

    pub fn contains(&self, p: &Point) -> bool {
        point_in_polygon(p, &self.vertices)
    }

    pub fn distance(&self, p: &Point) -> f64 {
        if self.contains(p) {
            0.0
        } else {
            boundary_distance(p, &self.vertices)
        }
    }

    fn is_simple(&self) -> bool {
        let v = &self.vertices;
        let n = v.len();
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            for j in (i + 1)..n {
                // skip adjacent edges
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (c, d) = (v[j], v[(j + 1) % n]);
                if segments_intersect(&a, &b, &c, &d) {
                    return false;
                }
            }
        }
        true
    }
}

/// Axis-aligned world rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub north: [f64; 2],
    pub east: [f64; 2],
}

impl Bounds {
    pub fn contains(&self, p: &Point) -> bool {
        p[0] >= self.north[0]
            && p[0] <= self.north[1]
            && p[1] >= self.east[0]
            && p[1] <= self.east[1]
    }

    fn contains_strictly(&self, p: &Point) -> bool {
        p[0] > self.north[0] && p[0] < self.north[1] && p[1] > self.east[0] && p[1] < self.east[1]
    }

    /// Counterclockwise corner loop.
    pub fn polygon(&self) -> Vec<Point> {
        vec![
            Point::new(self.north[0], self.east[0]),
            Point::new(self.north[1], self.east[0]),
            Point::new(self.north[1], self.east[1]),
            Point::new(self.north[0], self.east[1]),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleFile {
    name: String,
    vertices: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    #[serde(default)]
    name: String,
    #[serde(default)]
    origin: String,
    world_bounds: Bounds,
    obstacles: Vec<ObstacleFile>,
}

/// Per-polygon outcome of loading a map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolygonReport {
    pub name: String,
    pub vertex_count: usize,
    pub area: f64,
    pub winding_reversed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    pub polygon_count: usize,
    pub total_area: f64,
    pub winding_fixes: usize,
    pub polygons: Vec<PolygonReport>,
}

/// Static landmasses plus the world rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct HarborMap {
    pub name: String,
    pub origin: String,
    pub obstacles: Vec<Polygon>,
    pub world_bounds: Bounds,
}

impl HarborMap {
    /// Validates polygons, normalizes winding and checks the world bounds.
    pub fn new(
        obstacles: Vec<Polygon>,
        world_bounds: Bounds,
    ) -> Result<(Self, MapReport), GeometryError> {
        if !(world_bounds.north[0] < world_bounds.north[1]
            && world_bounds.east[0] < world_bounds.east[1])
        {
            return Err(GeometryError::InvalidBounds(
                "minimum must be below maximum".into(),
            ));
        }
        let mut reports = Vec::with_capacity(obstacles.len());
        let mut normalized = Vec::with_capacity(obstacles.len());
        for mut poly in obstacles {
            let invalid = |reason: &str| GeometryError::InvalidPolygon {
                name: poly.name.clone(),
                reason: reason.to_string(),
            };
            if poly.vertices.len() > 1 && poly.vertices.first() == poly.vertices.last() {
                poly.vertices.pop();
            }
            if poly.vertices.len() < 3 {
                return Err(invalid("fewer than 3 vertices"));
            }
            if poly
                .vertices
                .iter()
                .any(|v| !v[0].is_finite() || !v[1].is_finite())
            {
                return Err(invalid("non-finite vertex"));
            }
            if !poly.vertices.iter().all(|v| world_bounds.contains(v)) {
                return Err(invalid("vertex outside world bounds"));
            }
            let area = signed_area(&poly.vertices);
            if area.abs() < AREA_EPS {
                return Err(invalid("zero area"));
            }
            if !poly.is_simple() {
                return Err(invalid("self-intersecting"));
            }
            let reversed = area < 0.0;
            if reversed {
                poly.vertices.reverse();
            }
            reports.push(PolygonReport {
                name: poly.name.clone(),
                vertex_count: poly.vertices.len(),
                area: area.abs(),
                winding_reversed: reversed,
            });
            normalized.push(poly);
        }
        let report = MapReport {
            polygon_count: reports.len(),
            total_area: reports.iter().map(|r| r.area).sum(),
            winding_fixes: reports.iter().filter(|r| r.winding_reversed).count(),
            polygons: reports,
        };
        Ok((
            Self {
                name: String::new(),
                origin: String::new(),
                obstacles: normalized,
                world_bounds,
            },
            report,
        ))
    }

    pub fn from_json(text: &str) -> Result<(Self, MapReport), GeometryError> {
        let file: MapFile = serde_json::from_str(text)?;
        let obstacles = file
            .obstacles
            .into_iter()
            .map(|o| Polygon {
                name: o.name,
                vertices: o.vertices.iter().map(|v| Point::new(v[0], v[1])).collect(),
            })
            .collect();
        let (mut map, report) = Self::new(obstacles, file.world_bounds)?;
        map.name = file.name;
        map.origin = file.origin;
        Ok((map, report))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, MapReport), GeometryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = MapFile {
            name: self.name.clone(),
            origin: self.origin.clone(),
            world_bounds: self.world_bounds,
            obstacles: self
                .obstacles
                .iter()
                .map(|o| ObstacleFile {
                    name: o.name.clone(),
                    vertices: o.vertices.iter().map(|v| [v[0], v[1]]).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("map serialization cannot fail")
    }

    /// Obstacle containing `p`, if any.
    pub fn obstacle_at(&self, p: &Point) -> Option<&Polygon> {
        self.obstacles.iter().find(|o| o.contains(p))
    }
}

/// Convex vessel outline in the body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub vertices: Vec<Point>,
}

impl Footprint {
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::InvalidFootprint(
                "fewer than 3 vertices".into(),
            ));
        }
        let area = signed_area(&vertices);
        if area <= 0.0 {
            return Err(GeometryError::InvalidFootprint(
                "vertices must be counterclockwise".into(),
            ));
        }
        let n = vertices.len();
        for i in 0..n {
            let (a, b, c) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            if cross(&(b - a), &(c - b)) < 0.0 {
                return Err(GeometryError::InvalidFootprint(
                    "polygon is not convex".into(),
                ));
            }
            if cross(&(b - a), &(Point::zeros() - a)) <= 0.0 {
                return Err(GeometryError::InvalidFootprint(
                    "body origin must lie inside".into(),
                ));
            }
        }
        Ok(Self { vertices })
    }

    pub fn rectangle(length: f64, width: f64) -> Self {
        let (hl, hw) = (0.5 * length, 0.5 * width);
        Self {
            vertices: vec![
                Point::new(hl, hw),
                Point::new(-hl, hw),
                Point::new(-hl, -hw),
                Point::new(hl, -hw),
            ],
        }
    }

    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            vertices: params.footprint_vertices(),
        }
    }
}

pub fn rotation_2d(heading: f64) -> Matrix2<f64> {
    let (s, c) = heading.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// World-frame footprint vertices `R2(psi) v + p`.
pub fn footprint_vertices(pose: &Pose, footprint: &Footprint) -> Vec<Point> {
    let rot = rotation_2d(pose.heading);
    let pos = pose.position();
    footprint.vertices.iter().map(|v| rot * v + pos).collect()
}

/// Convex polyhedron `{p | A p <= b}` with unit-norm rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexRegion {
    /// Rows of `A`.
    pub normals: Vec<[f64; 2]>,
    /// Entries of `b`.
    pub offsets: Vec<f64>,
    /// Counterclockwise corner loop; empty when the region is unbounded.
    pub vertices: Vec<[f64; 2]>,
}

impl ConvexRegion {
    /// The whole plane (no rows).
    pub fn unbounded() -> Self {
        Self {
            normals: Vec::new(),
            offsets: Vec::new(),
            vertices: Vec::new(),
        }
    }

    pub fn from_bounds(bounds: &Bounds) -> Self {
        Self::from_polygon(&bounds.polygon())
    }

    /// Builds a region from rows `normal . p <= offset`, normalizing each row.
    /// Fails if the region has no interior.
    pub fn from_halfplanes(rows: &[([f64; 2], f64)]) -> Result<Self, GeometryError> {
        const FAR: f64 = 1e7;
        let mut poly = vec![
            Point::new(-FAR, -FAR),
            Point::new(FAR, -FAR),
            Point::new(FAR, FAR),
            Point::new(-FAR, FAR),
        ];
        let mut normals = Vec::with_capacity(rows.len());
        let mut offsets = Vec::with_capacity(rows.len());
        for (n, c) in rows {
            let normal = Point::new(n[0], n[1]);
            let len = normal.norm();
            if !(len > 0.0) || !c.is_finite() {
                return Err(GeometryError::EmptyRegion);
            }
            let (normal, offset) = (normal / len, c / len);
            poly = clip_polygon(&poly, &normal, offset);
            normals.push([normal[0], normal[1]]);
            offsets.push(offset);
        }
        if signed_area(&poly) <= AREA_EPS {
            return Err(GeometryError::EmptyRegion);
        }
        let bounded = poly
            .iter()
            .all(|v| v[0].abs() < FAR * 0.5 && v[1].abs() < FAR * 0.5);
        Ok(Self {
            normals,
            offsets,
            vertices: if bounded {
                poly.iter().map(|v| [v[0], v[1]]).collect()
            } else {
                Vec::new()
            },
        })
    }

    /// Region bounded by the edges of a counterclockwise convex polygon.
    fn from_polygon(poly: &[Point]) -> Self {
        let mut rows: Vec<(Point, f64)> = edges(poly)
            .filter_map(|(a, b)| edge_halfplane(&a, &b))
            .collect();
        rows.sort_by(|(n1, _), (n2, _)| n1[1].atan2(n1[0]).total_cmp(&n2[1].atan2(n2[0])));
        Self {
            normals: rows.iter().map(|(n, _)| [n[0], n[1]]).collect(),
            offsets: rows.iter().map(|(_, c)| *c).collect(),
            vertices: poly.iter().map(|v| [v[0], v[1]]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn normal(&self, row: usize) -> Point {
        Point::new(self.normals[row][0], self.normals[row][1])
    }

    /// Largest row violation `max_k (a_k . p - b_k)`; negative inside.
    pub fn max_violation(&self, p: &Point) -> f64 {
        (0..self.len())
            .map(|k| self.normal(k).dot(p) - self.offsets[k])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn polygon(&self) -> Vec<Point> {
        self.vertices
            .iter()
            .map(|v| Point::new(v[0], v[1]))
            .collect()
    }
}

/// `A p <= b + slack` componentwise.
pub fn region_contains(region: &ConvexRegion, point: &Point, slack: f64) -> bool {
    (0..region.len()).all(|k| region.normal(k).dot(point) <= region.offsets[k] + slack)
}

/// Extracts a convex obstacle-free region around `position`.
///
/// The region starts as the world rectangle. Obstacles still overlapping the
/// region are handled closest first (edge distance to `position`): among the
/// obstacle's edges whose outward side contains `position`, the one whose
/// supporting halfplane leaves the largest region is used to clip. If no
/// edge qualifies, the obstacle part is separated through the nearest point
/// of its convex hull. Once `edge_budget` cuts are spent, any remaining
/// overlaps are separated the same way, and finally corners are cut off
/// (smallest area first) until at most `edge_budget` rows remain. The result
/// never overlaps an obstacle, but may be conservative.
pub fn extract_convex_region(
    map: &HarborMap,
    position: &Point,
    edge_budget: usize,
) -> Result<ConvexRegion, GeometryError> {
    extract_convex_region_toward(map, position, None, edge_budget)
}

/// Like [`extract_convex_region`], but cuts are ranked first by how much of
/// the segment from `position` to `goal` they keep, so a region grown at the
/// harbor entrance reaches down the channel toward the berth instead of
/// spreading into open water. Area breaks ties.
pub fn extract_convex_region_toward(
    map: &HarborMap,
    position: &Point,
    goal: Option<&Point>,
    edge_budget: usize,
) -> Result<ConvexRegion, GeometryError> {
    if edge_budget < 3 {
        return Err(GeometryError::InvalidBudget(edge_budget));
    }
    let p = *position;
    if !map.world_bounds.contains_strictly(&p) {
        return Err(GeometryError::PositionOutsideBounds(p[0], p[1]));
    }
    for obstacle in &map.obstacles {
        if obstacle.contains(&p) || boundary_distance(&p, &obstacle.vertices) < LENGTH_EPS {
            return Err(GeometryError::PositionInsideObstacle(
                p[0],
                p[1],
                obstacle.name.clone(),
            ));
        }
    }

    let mut order: Vec<(f64, usize)> = map
        .obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| (boundary_distance(&p, &o.vertices), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut poly = map.world_bounds.polygon();
    let mut cuts = 0;
    while cuts < edge_budget {
        let Some(&(_, idx)) = order
            .iter()
            .find(|(_, i)| intersection_area(&map.obstacles[*i].vertices, &poly) > AREA_EPS)
        else {
            break;
        };
        let obstacle = &map.obstacles[idx].vertices;
        poly = match best_face_cut(&poly, obstacle, &p, goal) {
            Some(cut) => cut,
            None => separate(&poly, obstacle, &p),
        };
        cuts += 1;
    }
    for &(_, idx) in &order {
        let obstacle = &map.obstacles[idx].vertices;
        if intersection_area(obstacle, &poly) > AREA_EPS {
            poly = separate(&poly, obstacle, &p);
        }
    }

    let poly = reduce_to_budget(simplify(poly), &p, goal, edge_budget)?;
    let region = ConvexRegion::from_polygon(&poly);
    if region.len() < 3 || region.max_violation(&p) >= 0.0 {
        return Err(GeometryError::EmptyRegion);
    }
    Ok(region)
}

/// Fraction of the segment `p -> goal` inside the convex polygon.
fn segment_reach(poly: &[Point], p: &Point, goal: Option<&Point>) -> f64 {
    let Some(g) = goal else {
        return 1.0;
    };
    let dir = g - p;
    let mut reach: f64 = 1.0;
    for (a, b) in edges(poly) {
        let Some((normal, offset)) = edge_halfplane(&a, &b) else {
            continue;
        };
        let rate = normal.dot(&dir);
        if rate > 0.0 {
            reach = reach.min(((offset - normal.dot(p)) / rate).max(0.0));
        }
    }
    reach
}

/// Lexicographic comparison of `(reach, key)` with a tolerance on reach.
fn better_cut(reach: f64, key: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((r, k)) => reach > r + 1e-9 || (reach > r - 1e-9 && key > k),
    }
}

/// Clip by the obstacle edge that keeps the most of the way to the goal and
/// then lies farthest from the seed, so the seed sits as deep inside the
/// region as that obstacle allows. Ties go to the larger region. Only edges
/// that reduce the overlap with the obstacle are considered.
fn best_face_cut(
    poly: &[Point],
    obstacle: &[Point],
    p: &Point,
    goal: Option<&Point>,
) -> Option<Vec<Point>> {
    let area = signed_area(poly);
    let overlap = intersection_area(obstacle, poly);
    let mut best: Option<(f64, f64, f64, Vec<Point>)> = None;
    for (a, b) in edges(obstacle) {
        // obstacle interior lies left of a->b; the halfplane pointing into it
        let d = b - a;
        let len = d.norm();
        if len < LENGTH_EPS {
            continue;
        }
        let normal = Point::new(-d[1], d[0]) / len;
        let offset = normal.dot(&a);
        if offset - normal.dot(p) <= SEED_MARGIN {
            continue;
        }
        let cut = clip_polygon(poly, &normal, offset);
        let cut_area = signed_area(&cut);
        if cut_area >= area - AREA_EPS {
            continue;
        }
        if intersection_area(obstacle, &cut) >= overlap - AREA_EPS {
            continue;
        }
        let reach = segment_reach(&cut, p, goal);
        let clearance = offset - normal.dot(p);
        let wider = match &best {
            Some((r, c, a, _)) if (reach - r).abs() <= 1e-9 && (clearance - c).abs() <= 1e-9 => {
                cut_area > *a
            }
            _ => better_cut(reach, clearance, best.as_ref().map(|(r, c, _, _)| (*r, *c))),
        };
        if wider {
            best = Some((reach, clearance, cut_area, cut));
        }
    }
    best.map(|(_, _, _, cut)| cut)
}

/// Separates the overlapping part of an obstacle from the seed: tangent
/// halfplane at the nearest point of its convex hull, or an inscribed square
/// around the seed when the hull surrounds it.
fn separate(poly: &[Point], obstacle: &[Point], p: &Point) -> Vec<Point> {
    let piece = intersection_polygon(obstacle, poly);
    let hull = convex_hull(&piece);
    if hull.len() >= 3 && !point_in_polygon(p, &hull) {
        let q = edges(&hull)
            .map(|(a, b)| closest_point_on_segment(p, &a, &b))
            .min_by(|x, y| (x - p).norm().total_cmp(&(y - p).norm()))
            .expect("hull has edges");
        let dist = (q - p).norm();
        if dist > SEED_MARGIN {
            let normal = (q - p) / dist;
            return clip_polygon(poly, &normal, normal.dot(&q));
        }
    }
    let clearance = boundary_distance(p, &piece);
    let half = 0.999 * clearance / std::f64::consts::SQRT_2;
    let mut out = poly.to_vec();
    for normal in [
        Point::new(1.0, 0.0),
        Point::new(0.0, 1.0),
        Point::new(-1.0, 0.0),
        Point::new(0.0, -1.0),
    ] {
        out = clip_polygon(&out, &normal, normal.dot(p) + half);
    }
    out
}

/// Drops repeated and collinear corners.
fn simplify(poly: Vec<Point>) -> Vec<Point> {
    let mut pts: Vec<Point> = Vec::with_capacity(poly.len());
    for v in poly {
        if pts.last().is_none_or(|last| (v - last).norm() > LENGTH_EPS) {
            pts.push(v);
        }
    }
    while pts.len() > 1 && (pts[0] - pts[pts.len() - 1]).norm() <= LENGTH_EPS {
        pts.pop();
    }
    loop {
        let n = pts.len();
        if n < 3 {
            return pts;
        }
        let flat = (0..n).find(|&i| {
            let (a, b, c) = (pts[(i + n - 1) % n], pts[i], pts[(i + 1) % n]);
            let scale = (b - a).norm() * (c - b).norm();
            cross(&(b - a), &(c - b)).abs() <= 1e-12 * scale.max(1.0)
        });
        match flat {
            Some(i) => {
                pts.remove(i);
            }
            None => return pts,
        }
    }
}

/// Cuts corners off until the polygon has at most `budget` edges, removing
/// the smallest triangle each time (among those keeping the most of the way
/// to the goal) and always keeping the seed inside.
fn reduce_to_budget(
    mut poly: Vec<Point>,
    p: &Point,
    goal: Option<&Point>,
    budget: usize,
) -> Result<Vec<Point>, GeometryError> {
    while poly.len() > budget {
        let n = poly.len();
        let mut best: Option<(f64, f64, usize)> = None;
        for i in 0..n {
            let (a, v, b) = (poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]);
            let Some((normal, offset)) = edge_halfplane(&a, &b) else {
                continue;
            };
            if offset - normal.dot(p) <= SEED_MARGIN {
                continue;
            }
            let removed = 0.5 * cross(&(v - a), &(b - a)).abs();
            let mut candidate = poly.clone();
            candidate.remove(i);
            let reach = segment_reach(&candidate, p, goal);
            if better_cut(reach, -removed, best.map(|(r, area, _)| (r, -area))) {
                best = Some((reach, removed, i));
            }
        }
        let Some((_, _, i)) = best else {
            return Err(GeometryError::EmptyRegion);
        };
        poly.remove(i);
    }
    Ok(poly)
}
