#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxnav::geometry::{AgentState, CameraIntrinsics, CameraRig, Vec2};
use voxnav::renderer::{RenderConfig, RgbdImage};
use voxnav::simulator::{FloorPlan, Scene, Wall};

pub fn rig() -> CameraRig {
    CameraRig::new(CameraIntrinsics::new(40.0, 32.0, 24.0, 64, 48).unwrap(), 0.5)
}

/// Closed `w × d` room whose walls are split into short tiles of random colour.
pub fn textured_room(w: f64, d: f64, seed: u64) -> FloorPlan {
    let c = [[0.0, 0.0], [w, 0.0], [w, d], [0.0, d]];
    let mut walls = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..4 {
        let (a, b) = (Vec2::new(c[k][0], c[k][1]), Vec2::new(c[(k + 1) % 4][0], c[(k + 1) % 4][1]));
        let n = ((b - a).norm() / 0.25).round() as usize;
        for t in 0..n {
            let p = a + (b - a) * (t as f64 / n as f64);
            let q = a + (b - a) * ((t + 1) as f64 / n as f64);
            let rgb = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            walls.push(Wall { a: [p.x, p.y], b: [q.x, q.y], height: 1.0, rgb });
        }
    }
    FloorPlan { body_length: 0.2, bbox: [[0.0, 0.0], [w, d]], walls, obstacles: vec![] }
}

pub fn observe(plan: &FloorPlan, s: &AgentState, rig: &CameraRig) -> RgbdImage {
    Scene::new(plan).observe(s, rig, &RenderConfig::default())
}

/// Brute-force Dijkstra over the same lattice as the planner: nodes
/// `start + step·(a, b)` inside the plan's bounding box, an edge into a node
/// admitted iff the node keeps the safety distance and the segment has line
/// of sight. Returns the cheapest cost of reaching the goal region, counted
/// as (straight, diagonal) steps.
pub fn dijkstra_cost<T: voxnav::planning::Traversability>(
    world: &T,
    bbox: ([f64; 2], [f64; 2]),
    start: &Vec2,
    goal: &Vec2,
    cfg: &voxnav::planning::PlanConfig,
) -> Option<f64> {
    use std::collections::HashMap;
    let step = cfg.step;
    let (lo, hi) = bbox;
    let amin = ((lo[0] - start.x) / step).floor() as i64;
    let amax = ((hi[0] - start.x) / step).ceil() as i64;
    let bmin = ((lo[1] - start.y) / step).floor() as i64;
    let bmax = ((hi[1] - start.y) / step).ceil() as i64;
    let point = |n: (i64, i64)| start + Vec2::new(n.0 as f64, n.1 as f64) * step;
    let cost = |c: (u64, u64)| c.0 as f64 * step + c.1 as f64 * step * std::f64::consts::SQRT_2;
    let mut best: HashMap<(i64, i64), (u64, u64)> = HashMap::new();
    let mut done: HashMap<(i64, i64), bool> = HashMap::new();
    best.insert((0, 0), (0, 0));
    loop {
        // Linear scan for the cheapest open node; slow but obviously correct.
        let next = best.iter().filter(|(n, _)| !done.contains_key(*n)).min_by(|a, b| cost(*a.1).total_cmp(&cost(*b.1)));
        let (&n, &c) = next?;
        if (point(n) - goal).norm() <= cfg.goal_tolerance {
            return Some(cost(c));
        }
        done.insert(n, true);
        for da in -1..=1i64 {
            for db in -1..=1i64 {
                if da == 0 && db == 0 {
                    continue;
                }
                let m = (n.0 + da, n.1 + db);
                if m.0 < amin || m.0 > amax || m.1 < bmin || m.1 > bmax || done.contains_key(&m) {
                    continue;
                }
                if !world.is_safe(&point(m), cfg.safety) || !world.line_of_sight(&point(n), &point(m)) {
                    continue;
                }
                let cm = if da != 0 && db != 0 { (c.0, c.1 + 1) } else { (c.0 + 1, c.1) };
                if best.get(&m).is_none_or(|old| cost(cm) < cost(*old)) {
                    best.insert(m, cm);
                }
            }
        }
    }
}
