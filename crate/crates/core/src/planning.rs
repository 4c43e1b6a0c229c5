//! A* over the occupancy slice and the rotate-then-move controller.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, AgentState, Control, ControlLimits, Vec2, Vec3};
use crate::simulator::floorplan::{point_in_convex_polygon, segments_intersect, Edge, FloorPlan, SAFETY_FACTOR};
use crate::voxel_map::{OccupancySlice, VoxelMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub step: f64,
    pub safety: f64,
    pub goal_tolerance: f64,
    pub los_samples: usize,
    pub threshold: f64,
    /// Cap on node expansions before giving up.
    pub max_expansions: usize,
}

impl PlanConfig {
    pub fn for_body(body_length: f64) -> Self {
        Self {
            step: 0.8 * body_length,
            safety: SAFETY_FACTOR * body_length,
            goal_tolerance: 0.8 * body_length,
            los_samples: 100,
            threshold: 0.5,
            max_expansions: 2_000_000,
        }
    }

    /// Fine lattice used for reference shortest paths.
    pub fn reference(body_length: f64) -> Self {
        let step = 0.25 * body_length;
        Self { step, goal_tolerance: 0.8 * step, ..Self::for_body(body_length) }
    }

    /// Distance at which a waypoint counts as reached.
    pub fn arrival(&self) -> f64 {
        0.5 * self.step
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.step, self.safety, self.goal_tolerance, self.threshold];
        if !v.iter().all(|x| *x > 0.0 && x.is_finite()) || self.los_samples < 2 || self.max_expansions == 0 {
            return Err(Error::Config("plan settings must be positive".into()));
        }
        Ok(())
    }
}

/// What the planner needs to know about the world.
pub trait Traversability {
    /// No obstacle on the segment.
    fn line_of_sight(&self, a: &Vec2, b: &Vec2) -> bool;
    /// At least `radius` away from every obstacle, and inside the known area.
    fn is_safe(&self, p: &Vec2, radius: f64) -> bool;
}

/// Exact radius queries over 2D points bucketed on a square grid.
#[derive(Debug, Clone)]
pub struct ObstacleIndex {
    bucket: f64,
    cells: HashMap<(i64, i64), Vec<Vec2>>,
}

impl ObstacleIndex {
    pub fn new(points: &[Vec2], bucket: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<Vec2>> = HashMap::new();
        for p in points {
            cells.entry(Self::key(p, bucket)).or_default().push(*p);
        }
        Self { bucket, cells }
    }

    fn key(p: &Vec2, bucket: f64) -> (i64, i64) {
        ((p.x / bucket).floor() as i64, (p.y / bucket).floor() as i64)
    }

    /// Whether any point lies strictly closer than `radius` to `p`.
    pub fn any_within(&self, p: &Vec2, radius: f64) -> bool {
        let r = (radius / self.bucket).ceil() as i64;
        let (ci, cj) = Self::key(p, self.bucket);
        let r2 = radius * radius;
        for dj in -r..=r {
            for di in -r..=r {
                if let Some(v) = self.cells.get(&(ci + di, cj + dj)) {
                    if v.iter().any(|q| (q - p).norm_squared() < r2) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// Traversability from the learned occupancy at a fixed height.
pub struct LearnedTraversability<'a> {
    pub map: &'a VoxelMap,
    pub slice: OccupancySlice,
    pub cfg: PlanConfig,
    index: ObstacleIndex,
}

impl<'a> LearnedTraversability<'a> {
    pub fn new(map: &'a VoxelMap, height: f64, cfg: PlanConfig) -> Result<Self> {
        let slice = map.occupancy_slice(height, cfg.threshold)?;
        let bucket = cfg.safety.max(slice.resolution.x).max(slice.resolution.y);
        let index = ObstacleIndex::new(&slice.obstacles, bucket);
        Ok(Self { map, slice, cfg, index })
    }

    fn inside(&self, p: &Vec2) -> bool {
        let (lo, hi) = (self.slice.min_corner(), self.slice.max_corner());
        p.x >= lo.x && p.y >= lo.y && p.x <= hi.x && p.y <= hi.y
    }
}

impl Traversability for LearnedTraversability<'_> {
    fn line_of_sight(&self, a: &Vec2, b: &Vec2) -> bool {
        line_of_sight(self.map, a, b, self.slice.height, &self.cfg)
    }

    fn is_safe(&self, p: &Vec2, radius: f64) -> bool {
        self.inside(p) && !self.index.any_within(p, radius)
    }
}

/// Ground-truth traversability of a floor plan.
pub struct PlanTraversability<'a> {
    pub plan: &'a FloorPlan,
    edges: Vec<Edge>,
}

impl<'a> PlanTraversability<'a> {
    pub fn new(plan: &'a FloorPlan) -> Self {
        Self { plan, edges: plan.edges() }
    }
}

impl Traversability for PlanTraversability<'_> {
    fn line_of_sight(&self, a: &Vec2, b: &Vec2) -> bool {
        !self.edges.iter().any(|e| segments_intersect(a, b, &e.a, &e.b))
            && !self.plan.obstacles.iter().any(|o| point_in_convex_polygon(a, &o.poly))
    }

    fn is_safe(&self, p: &Vec2, radius: f64) -> bool {
        self.plan.is_free(p, radius)
    }
}

/// Occupancy below the threshold at `los_samples` equally spaced points of
/// the segment `ab` at `height`.
pub fn line_of_sight(map: &VoxelMap, a: &Vec2, b: &Vec2, height: f64, cfg: &PlanConfig) -> bool {
    let n = cfg.los_samples;
    (0..n).all(|k| {
        let t = k as f64 / (n - 1) as f64;
        let p = a + (b - a) * t;
        map.sample_occ(&Vec3::new(p.x, p.y, height)) < cfg.threshold
    })
}

/// Lattice path cost from its straight and diagonal step counts.
pub fn lattice_cost(straight: u64, diagonal: u64, step: f64) -> f64 {
    straight as f64 * step + diagonal as f64 * step * std::f64::consts::SQRT_2
}

pub const DIRECTIONS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

/// The 8-connected lattice `start + step·(a, b)` with admissible edges.
pub struct Lattice<'a, T: Traversability + ?Sized> {
    pub world: &'a T,
    pub start: Vec2,
    pub cfg: PlanConfig,
    safe: std::cell::RefCell<HashMap<(i64, i64), bool>>,
}

impl<'a, T: Traversability + ?Sized> Lattice<'a, T> {
    pub fn new(world: &'a T, start: Vec2, cfg: PlanConfig) -> Self {
        Self { world, start, cfg, safe: Default::default() }
    }

    pub fn point(&self, n: (i64, i64)) -> Vec2 {
        self.start + Vec2::new(n.0 as f64, n.1 as f64) * self.cfg.step
    }

    fn node_is_safe(&self, n: (i64, i64)) -> bool {
        if let Some(&s) = self.safe.borrow().get(&n) {
            return s;
        }
        let s = self.world.is_safe(&self.point(n), self.cfg.safety);
        self.safe.borrow_mut().insert(n, s);
        s
    }

    /// Edge into `to` is admitted iff `to` keeps the safety distance and the
    /// segment has line of sight. The source is never checked, so an agent
    /// that drifted too close to an obstacle can still leave.
    pub fn admits(&self, from: (i64, i64), to: (i64, i64)) -> bool {
        self.node_is_safe(to) && self.world.line_of_sight(&self.point(from), &self.point(to))
    }

    pub fn is_goal(&self, n: (i64, i64), goal: &Vec2) -> bool {
        (self.point(n) - goal).norm() <= self.cfg.goal_tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoints {
    pub points: Vec<[f64; 2]>,
}

impl Waypoints {
    pub fn new(points: Vec<Vec2>) -> Self {
        Self { points: points.iter().map(|p| [p.x, p.y]).collect() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, k: usize) -> Vec2 {
        Vec2::new(self.points[k][0], self.points[k][1])
    }

    /// Sum of segment lengths from `from` through all waypoints.
    pub fn length_from(&self, from: &Vec2) -> f64 {
        let mut prev = *from;
        let mut total = 0.0;
        for k in 0..self.len() {
            total += (self.get(k) - prev).norm();
            prev = self.get(k);
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub waypoints: Waypoints,
    /// Cost of each straight run between consecutive waypoints.
    pub edge_costs: Vec<f64>,
    /// Total lattice cost.
    pub cost: f64,
    pub straight_steps: u64,
    pub diagonal_steps: u64,
    pub expansions: usize,
}

impl Plan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Queued {
    f: f64,
    seq: u64,
    node: (i64, i64),
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Copy)]
struct Label {
    straight: u64,
    diagonal: u64,
    g: f64,
    parent: Option<(i64, i64)>,
    closed: bool,
}

/// A* from `start` to within the goal tolerance of `goal`. Edge costs are the
/// step length; the heuristic `max(0, ‖n − goal‖ − tolerance)` stays
/// consistent with a goal region.
pub fn astar<T: Traversability + ?Sized>(world: &T, start: &Vec2, goal: &Vec2, cfg: &PlanConfig) -> Result<Plan> {
    cfg.validate()?;
    let lat = Lattice::new(world, *start, *cfg);
    let h = |n: (i64, i64)| ((lat.point(n) - goal).norm() - cfg.goal_tolerance).max(0.0);
    let mut labels: HashMap<(i64, i64), Label> = HashMap::new();
    let mut open = BinaryHeap::new();
    let mut seq = 0;
    labels.insert((0, 0), Label { straight: 0, diagonal: 0, g: 0.0, parent: None, closed: false });
    open.push(Queued { f: h((0, 0)), seq, node: (0, 0) });
    let mut expansions = 0;
    while let Some(Queued { node, .. }) = open.pop() {
        let label = labels[&node];
        if label.closed {
            continue;
        }
        if lat.is_goal(node, goal) {
            return Ok(build_plan(&lat, &labels, node, goal, expansions));
        }
        labels.get_mut(&node).unwrap().closed = true;
        expansions += 1;
        if expansions > cfg.max_expansions {
            break;
        }
        for (k, d) in DIRECTIONS.iter().enumerate() {
            let next = (node.0 + d.0, node.1 + d.1);
            if labels.get(&next).is_some_and(|l| l.closed) {
                continue;
            }
            let (s, dg) = if k % 2 == 0 { (label.straight + 1, label.diagonal) } else { (label.straight, label.diagonal + 1) };
            let g = lattice_cost(s, dg, cfg.step);
            if labels.get(&next).is_some_and(|l| l.g <= g) {
                continue;
            }
            if !lat.admits(node, next) {
                continue;
            }
            labels.insert(next, Label { straight: s, diagonal: dg, g, parent: Some(node), closed: false });
            seq += 1;
            open.push(Queued { f: g + h(next), seq, node: next });
        }
    }
    Err(Error::NoPath)
}

fn build_plan<T: Traversability + ?Sized>(
    lat: &Lattice<'_, T>,
    labels: &HashMap<(i64, i64), Label>,
    end: (i64, i64),
    goal: &Vec2,
    expansions: usize,
) -> Plan {
    let mut nodes = vec![end];
    while let Some(p) = labels[nodes.last().unwrap()].parent {
        nodes.push(p);
    }
    nodes.reverse();
    // Keep only the corners of straight runs.
    let mut points = Vec::new();
    let mut costs = Vec::new();
    let mut run = 0.0;
    for k in 1..nodes.len() {
        let d = (nodes[k].0 - nodes[k - 1].0, nodes[k].1 - nodes[k - 1].1);
        run += if d.0 != 0 && d.1 != 0 { lat.cfg.step * std::f64::consts::SQRT_2 } else { lat.cfg.step };
        let turn = k + 1 == nodes.len() || {
            let e = (nodes[k + 1].0 - nodes[k].0, nodes[k + 1].1 - nodes[k].1);
            e != d
        };
        if turn {
            points.push(lat.point(nodes[k]));
            costs.push(run);
            run = 0.0;
        }
    }
    let l = labels[&end];
    Plan {
        start: [lat.start.x, lat.start.y],
        goal: [goal.x, goal.y],
        waypoints: Waypoints::new(points),
        edge_costs: costs,
        cost: l.g,
        straight_steps: l.straight,
        diagonal_steps: l.diagonal,
        expansions,
    }
}

/// A* on the learned slice at the slice height.
pub fn astar_plan(map: &VoxelMap, height: f64, start: &Vec2, goal: &Vec2, cfg: &PlanConfig) -> Result<Plan> {
    let world = LearnedTraversability::new(map, height, *cfg)?;
    astar(&world, start, goal, cfg)
}

/// Whether the target is reachable along the straight segment: line of
/// sight and the safety distance at every sampled point.
pub fn shortcut_to_target<T: Traversability + ?Sized>(world: &T, from: &Vec2, target: &Vec2, cfg: &PlanConfig) -> bool {
    if !world.line_of_sight(from, target) {
        return false;
    }
    let n = cfg.los_samples;
    (0..n).all(|k| world.is_safe(&(from + (target - from) * (k as f64 / (n - 1) as f64)), cfg.safety))
}

/// Waypoints to the target: the target alone if the straight segment is
/// traversable, otherwise the A* corners.
pub fn plan_route<T: Traversability + ?Sized>(world: &T, from: &Vec2, target: &Vec2, cfg: &PlanConfig) -> Result<Waypoints> {
    if shortcut_to_target(world, from, target, cfg) {
        return Ok(Waypoints::new(vec![*target]));
    }
    Ok(astar(world, from, target, cfg)?.waypoints)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlOutcome {
    Command(Control),
    /// Every waypoint was reached.
    Done,
}

/// Rotate toward the next waypoint until within the alignment threshold,
/// then move toward it. Waypoints closer than `arrival` are removed first.
pub fn next_control(z: &AgentState, wp: &mut Waypoints, limits: &ControlLimits, arrival: f64) -> ControlOutcome {
    while !wp.is_empty() && (wp.get(0) - z.position()).norm() < arrival {
        wp.points.remove(0);
    }
    if wp.is_empty() {
        return ControlOutcome::Done;
    }
    let delta = wp.get(0) - z.position();
    let desired = delta.y.atan2(delta.x);
    let err = wrap_angle(desired - z.heading);
    if err.abs() > limits.alignment {
        let w = err.clamp(-limits.max_angular_velocity, limits.max_angular_velocity);
        return ControlOutcome::Command(Control::rotate(w, z.heading));
    }
    ControlOutcome::Command(Control { angular_velocity: 0.0, move_direction: desired, speed: delta.norm().min(limits.max_speed) })
}
