//! Floor plans: wall segments with heights and colours, convex full-height
//! obstacles, and a procedural multi-room generator.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::io::write_text_atomic;

pub const DEFAULT_BODY_LENGTH: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub height: f64,
    pub rgb: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    /// Convex polygon, either orientation.
    pub poly: Vec<[f64; 2]>,
    pub rgb: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorPlan {
    pub body_length: f64,
    /// `[[xmin, ymin], [xmax, ymax]]` of the free space.
    pub bbox: [[f64; 2]; 2],
    pub walls: Vec<Wall>,
    pub obstacles: Vec<Obstacle>,
}

/// A coloured 2D segment with the height of the surface it bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: Vec2,
    pub b: Vec2,
    pub height: f64,
    pub rgb: [f64; 3],
}

pub fn v2(p: [f64; 2]) -> Vec2 {
    Vec2::new(p[0], p[1])
}

/// Distance from `p` to segment `ab`.
pub fn point_segment_distance(p: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

fn cross2(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Whether segments `pq` and `ab` intersect (including touching).
pub fn segments_intersect(p: &Vec2, q: &Vec2, a: &Vec2, b: &Vec2) -> bool {
    let d1 = cross2(&(q - p), &(a - p));
    let d2 = cross2(&(q - p), &(b - p));
    let d3 = cross2(&(b - a), &(p - a));
    let d4 = cross2(&(b - a), &(q - a));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |x: &Vec2, y: &Vec2, z: &Vec2, d: f64| d == 0.0 && point_segment_distance(z, x, y) == 0.0;
    on(p, q, a, d1) || on(p, q, b, d2) || on(a, b, p, d3) || on(a, b, q, d4)
}

/// Minimum distance between segments `pq` and `ab`.
pub fn segment_segment_distance(p: &Vec2, q: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    if segments_intersect(p, q, a, b) {
        return 0.0;
    }
    point_segment_distance(p, a, b)
        .min(point_segment_distance(q, a, b))
        .min(point_segment_distance(a, p, q))
        .min(point_segment_distance(b, p, q))
}

pub fn point_in_convex_polygon(p: &Vec2, poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    let mut sign = 0.0;
    for k in 0..n {
        let a = v2(poly[k]);
        let b = v2(poly[(k + 1) % n]);
        let c = cross2(&(b - a), &(p - a));
        if c == 0.0 {
            continue;
        }
        if sign == 0.0 {
            sign = c.signum();
        } else if c.signum() != sign {
            return false;
        }
    }
    true
}

impl FloorPlan {
    pub fn bbox_min(&self) -> Vec2 {
        v2(self.bbox[0])
    }

    pub fn bbox_max(&self) -> Vec2 {
        v2(self.bbox[1])
    }

    /// Height of the ceiling plane: the tallest wall.
    pub fn ceiling_height(&self) -> f64 {
        self.walls.iter().map(|w| w.height).fold(0.0, f64::max)
    }

    /// All surfaces as coloured edges; obstacles span floor to ceiling.
    pub fn edges(&self) -> Vec<Edge> {
        let h = self.ceiling_height();
        let mut out: Vec<Edge> = self.walls.iter().map(|w| Edge { a: v2(w.a), b: v2(w.b), height: w.height, rgb: w.rgb }).collect();
        for o in &self.obstacles {
            let n = o.poly.len();
            for k in 0..n {
                out.push(Edge { a: v2(o.poly[k]), b: v2(o.poly[(k + 1) % n]), height: h, rgb: o.rgb });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |p: &[f64; 2]| p[0].is_finite() && p[1].is_finite();
        if !(self.body_length > 0.0) {
            return Err(Error::Config("body_length must be positive".into()));
        }
        if !(finite(&self.bbox[0]) && finite(&self.bbox[1]) && self.bbox[0][0] < self.bbox[1][0] && self.bbox[0][1] < self.bbox[1][1]) {
            return Err(Error::Config("bbox must be a non-empty rectangle".into()));
        }
        for (n, w) in self.walls.iter().enumerate() {
            if !(finite(&w.a) && finite(&w.b)) || w.a == w.b || !(w.height > 0.0) {
                return Err(Error::Config(format!("wall {n} is degenerate")));
            }
        }
        for (n, o) in self.obstacles.iter().enumerate() {
            if o.poly.len() < 3 || !o.poly.iter().all(finite) {
                return Err(Error::Config(format!("obstacle {n} needs at least three finite vertices")));
            }
        }
        if self.walls.is_empty() {
            return Err(Error::Config("a floor plan needs walls".into()));
        }
        Ok(())
    }

    /// Distance from `p` to the nearest surface; zero inside an obstacle or
    /// outside the bounding box.
    pub fn clearance(&self, p: &Vec2) -> f64 {
        let (lo, hi) = (self.bbox_min(), self.bbox_max());
        if p.x < lo.x || p.y < lo.y || p.x > hi.x || p.y > hi.y {
            return 0.0;
        }
        if self.obstacles.iter().any(|o| point_in_convex_polygon(p, &o.poly)) {
            return 0.0;
        }
        let mut d = f64::INFINITY;
        for w in &self.walls {
            d = d.min(point_segment_distance(p, &v2(w.a), &v2(w.b)));
        }
        for o in &self.obstacles {
            let n = o.poly.len();
            for k in 0..n {
                d = d.min(point_segment_distance(p, &v2(o.poly[k]), &v2(o.poly[(k + 1) % n])));
            }
        }
        d
    }

    pub fn is_free(&self, p: &Vec2, radius: f64) -> bool {
        self.clearance(p) >= radius
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: FloorPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Boolean raster of points with at least `radius` clearance.
#[derive(Debug, Clone)]
pub struct FreeRaster {
    pub origin: Vec2,
    pub resolution: f64,
    pub dims: [usize; 2],
    pub free: Vec<bool>,
}

impl FreeRaster {
    /// Equivalent to testing `plan.is_free` at every lattice point, but each
    /// edge only visits the points within `radius` of it.
    pub fn new(plan: &FloorPlan, radius: f64, resolution: f64) -> Self {
        let lo = plan.bbox_min();
        let hi = plan.bbox_max();
        let nx = ((hi.x - lo.x) / resolution).floor() as usize + 1;
        let ny = ((hi.y - lo.y) / resolution).floor() as usize + 1;
        let mut free = vec![true; nx * ny];
        let point = |i: usize, j: usize| lo + Vec2::new(i as f64 * resolution, j as f64 * resolution);
        let range = |a: f64, b: f64, origin: f64, n: usize| {
            let i0 = (((a - origin) / resolution).floor().max(0.0)) as usize;
            let i1 = (((b - origin) / resolution).ceil().max(0.0) as usize).min(n - 1);
            i0..=i1
        };
        let mut stamp = |a: Vec2, b: Vec2| {
            for j in range(a.y.min(b.y) - radius, a.y.max(b.y) + radius, lo.y, ny) {
                for i in range(a.x.min(b.x) - radius, a.x.max(b.x) + radius, lo.x, nx) {
                    if point_segment_distance(&point(i, j), &a, &b) < radius {
                        free[i + nx * j] = false;
                    }
                }
            }
        };
        for w in &plan.walls {
            stamp(v2(w.a), v2(w.b));
        }
        for o in &plan.obstacles {
            let n = o.poly.len();
            for k in 0..n {
                stamp(v2(o.poly[k]), v2(o.poly[(k + 1) % n]));
            }
        }
        for o in &plan.obstacles {
            let xs = o.poly.iter().map(|p| p[0]);
            let ys = o.poly.iter().map(|p| p[1]);
            let (x0, x1) = (xs.clone().fold(f64::MAX, f64::min), xs.fold(f64::MIN, f64::max));
            let (y0, y1) = (ys.clone().fold(f64::MAX, f64::min), ys.fold(f64::MIN, f64::max));
            for j in range(y0, y1, lo.y, ny) {
                for i in range(x0, x1, lo.x, nx) {
                    if point_in_convex_polygon(&point(i, j), &o.poly) {
                        free[i + nx * j] = false;
                    }
                }
            }
        }
        Self { origin: lo, resolution, dims: [nx, ny], free }
    }

    pub fn point(&self, i: usize, j: usize) -> Vec2 {
        self.origin + Vec2::new(i as f64 * self.resolution, j as f64 * self.resolution)
    }

    pub fn free_count(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    /// Size of each 4-connected component of free cells, largest first.
    pub fn components(&self) -> Vec<usize> {
        let [nx, ny] = self.dims;
        let mut seen = vec![false; nx * ny];
        let mut sizes = Vec::new();
        for start in 0..nx * ny {
            if !self.free[start] || seen[start] {
                continue;
            }
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(c) = queue.pop_front() {
                size += 1;
                let (i, j) = (c % nx, c / nx);
                let mut push = |n: usize| {
                    if self.free[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                };
                if i > 0 {
                    push(c - 1);
                }
                if i + 1 < nx {
                    push(c + 1);
                }
                if j > 0 {
                    push(c - nx);
                }
                if j + 1 < ny {
                    push(c + nx);
                }
            }
            sizes.push(size);
        }
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() == 1
    }
}

/// Parameters of the procedural generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub width: f64,
    pub depth: f64,
    /// Inclusive range of room counts.
    pub rooms: [usize; 2],
    /// Box obstacles per square meter of floor.
    pub obstacle_density: f64,
    pub wall_height: f64,
    pub wall_thickness: f64,
    /// Door gap widths are uniform in this range.
    pub door_width: [f64; 2],
    pub min_room_size: f64,
    /// Walls are split into tiles of about this length, each with its own colour.
    pub tile_length: f64,
    pub body_length: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            width: 7.0,
            depth: 7.0,
            rooms: [3, 5],
            obstacle_density: 0.08,
            wall_height: 1.0,
            wall_thickness: 0.2,
            door_width: [1.0, 1.2],
            min_room_size: 1.8,
            tile_length: 0.4,
            body_length: DEFAULT_BODY_LENGTH,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("width", self.width),
            ("depth", self.depth),
            ("wall_height", self.wall_height),
            ("wall_thickness", self.wall_thickness),
            ("min_room_size", self.min_room_size),
            ("tile_length", self.tile_length),
            ("body_length", self.body_length),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.rooms[0] == 0 || self.rooms[0] > self.rooms[1] {
            return Err(Error::Config("room range must satisfy 1 <= min <= max".into()));
        }
        if !(self.door_width[0] > 0.0 && self.door_width[0] <= self.door_width[1]) {
            return Err(Error::Config("door width range is invalid".into()));
        }
        if !(self.obstacle_density >= 0.0) {
            return Err(Error::Config("obstacle_density must be non-negative".into()));
        }
        if self.door_width[0] < 2.0 * SAFETY_FACTOR * self.body_length {
            return Err(Error::Config("doors are too narrow for the agent".into()));
        }
        let cap = (self.width / self.min_room_size).floor() * (self.depth / self.min_room_size).floor();
        if (self.rooms[0] as f64) > cap {
            return Err(Error::Config(format!("at most {cap} rooms of {} m fit", self.min_room_size)));
        }
        Ok(())
    }
}

/// Planning and task clearance in units of the body length.
pub const SAFETY_FACTOR: f64 = 1.2;

#[derive(Debug, Clone, Copy)]
struct Room {
    lo: Vec2,
    hi: Vec2,
}

fn random_rgb(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

fn rect(lo: Vec2, hi: Vec2) -> Vec<[f64; 2]> {
    vec![[lo.x, lo.y], [hi.x, lo.y], [hi.x, hi.y], [lo.x, hi.y]]
}

/// Tile an axis-aligned slab `[lo, hi]` along its long axis into coloured boxes.
fn tiled_slab(lo: Vec2, hi: Vec2, tile: f64, rng: &mut impl Rng, out: &mut Vec<Obstacle>) {
    let along_x = hi.x - lo.x >= hi.y - lo.y;
    let (start, end) = if along_x { (lo.x, hi.x) } else { (lo.y, hi.y) };
    let n = ((end - start) / tile).round().max(1.0) as usize;
    let step = (end - start) / n as f64;
    for k in 0..n {
        let a = start + k as f64 * step;
        let b = if k + 1 == n { end } else { a + step };
        let (l, h) = if along_x { (Vec2::new(a, lo.y), Vec2::new(b, hi.y)) } else { (Vec2::new(lo.x, a), Vec2::new(hi.x, b)) };
        out.push(Obstacle { poly: rect(l, h), rgb: random_rgb(rng) });
    }
}

/// Tile the segment `a → b` into coloured wall pieces.
fn tiled_wall(a: Vec2, b: Vec2, height: f64, tile: f64, rng: &mut impl Rng, out: &mut Vec<Wall>) {
    let n = ((b - a).norm() / tile).round().max(1.0) as usize;
    for k in 0..n {
        let p = a + (b - a) * (k as f64 / n as f64);
        let q = if k + 1 == n { b } else { a + (b - a) * ((k + 1) as f64 / n as f64) };
        out.push(Wall { a: [p.x, p.y], b: [q.x, q.y], height, rgb: random_rgb(rng) });
    }
}

/// A generated plan with the rectangles of its rooms.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub plan: FloorPlan,
    pub rooms: Vec<[[f64; 2]; 2]>,
}

/// A connected multi-room plan: recursive partition with one door per
/// interior wall and scattered box obstacles.
pub fn generate_floorplan(seed: u64, spec: &GenSpec) -> Result<FloorPlan> {
    generate_layout(seed, spec).map(|l| l.plan)
}

pub fn generate_layout(seed: u64, spec: &GenSpec) -> Result<Layout> {
    spec.validate()?;
    let mut attempt = 0u64;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        if let Some(layout) = try_generate(spec, &mut rng) {
            return Ok(layout);
        }
        attempt += 1;
        if attempt > 1000 {
            return Err(Error::Config("could not generate a connected plan for this spec".into()));
        }
    }
}

fn try_generate(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Option<Layout> {
    let lo = Vec2::zeros();
    let hi = Vec2::new(spec.width, spec.depth);
    let target = rng.random_range(spec.rooms[0]..=spec.rooms[1]);
    let t = spec.wall_thickness;
    let mut rooms = vec![Room { lo, hi }];
    let mut obstacles = Vec::new();
    while rooms.len() < target {
        // Split the largest room that can still be split.
        let mut order: Vec<usize> = (0..rooms.len()).collect();
        order.sort_by(|&a, &b| {
            let area = |r: &Room| (r.hi.x - r.lo.x) * (r.hi.y - r.lo.y);
            area(&rooms[b]).partial_cmp(&area(&rooms[a])).unwrap()
        });
        let mut split = None;
        for idx in order {
            let r = rooms[idx];
            let size = r.hi - r.lo;
            let axis = if size.x >= size.y { 0 } else { 1 };
            let room_len = size[axis];
            if room_len - t < 2.0 * spec.min_room_size {
                continue;
            }
            split = Some((idx, axis, r));
            break;
        }
        let (idx, axis, r) = split?;
        let min_c = r.lo[axis] + spec.min_room_size + 0.5 * t;
        let max_c = r.hi[axis] - spec.min_room_size - 0.5 * t;
        let c = rng.random_range(min_c..=max_c);
        let other = 1 - axis;
        let (w0, w1) = (r.lo[other], r.hi[other]);
        let door = rng.random_range(spec.door_width[0]..=spec.door_width[1]);
        if w1 - w0 < door + 2.0 * t {
            return None;
        }
        let d0 = rng.random_range(w0 + t..=w1 - t - door);
        let d1 = d0 + door;
        let slab = |a: f64, b: f64| {
            let mut l = Vec2::zeros();
            let mut h = Vec2::zeros();
            l[axis] = c - 0.5 * t;
            h[axis] = c + 0.5 * t;
            l[other] = a;
            h[other] = b;
            (l, h)
        };
        for (a, b) in [(w0, d0), (d1, w1)] {
            let (l, h) = slab(a, b);
            tiled_slab(l, h, spec.tile_length, rng, &mut obstacles);
        }
        let mut first = r;
        let mut second = r;
        first.hi[axis] = c - 0.5 * t;
        second.lo[axis] = c + 0.5 * t;
        rooms[idx] = first;
        rooms.push(second);
    }

    let mut walls = Vec::new();
    let corners = [lo, Vec2::new(hi.x, lo.y), hi, Vec2::new(lo.x, hi.y)];
    for k in 0..4 {
        tiled_wall(corners[k], corners[(k + 1) % 4], spec.wall_height, spec.tile_length, rng, &mut walls);
    }
    let mut plan = FloorPlan { body_length: spec.body_length, bbox: [[lo.x, lo.y], [hi.x, hi.y]], walls, obstacles };

    let radius = SAFETY_FACTOR * spec.body_length;
    let res = 0.05;
    if !FreeRaster::new(&plan, radius, res).is_connected() {
        return None;
    }

    let n_boxes = (spec.obstacle_density * spec.width * spec.depth).round() as usize;
    let mut placed = 0;
    let mut tries = 0;
    while placed < n_boxes && tries < 50 * n_boxes.max(1) {
        tries += 1;
        let sx = rng.random_range(0.2..0.5);
        let sy = rng.random_range(0.2..0.5);
        let cx = rng.random_range(lo.x + 0.3..hi.x - 0.3);
        let cy = rng.random_range(lo.y + 0.3..hi.y - 0.3);
        let l = Vec2::new(cx - 0.5 * sx, cy - 0.5 * sy);
        let h = Vec2::new(cx + 0.5 * sx, cy + 0.5 * sy);
        let candidate = Obstacle { poly: rect(l, h), rgb: random_rgb(rng) };
        // Keep boxes off walls and doors so they do not seal a room.
        let centre = Vec2::new(cx, cy);
        if plan.clearance(&centre) < 0.5 * sx.hypot(sy) + 2.0 * radius + 0.05 {
            continue;
        }
        plan.obstacles.push(candidate);
        if FreeRaster::new(&plan, radius, res).is_connected() {
            placed += 1;
        } else {
            plan.obstacles.pop();
        }
    }
    let rooms = rooms.iter().map(|r| [[r.lo.x, r.lo.y], [r.hi.x, r.hi.y]]).collect();
    Some(Layout { plan, rooms })
}

/// Stable 64-bit digest of a plan's JSON, for comparing plans.
pub fn plan_digest(plan: &FloorPlan) -> u64 {
    let text = serde_json::to_string(plan).unwrap_or_default();
    // FNV-1a
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
