//! Ground-truth RGB-D by analytic ray casting against the floor plan.

use crate::geometry::{AgentState, CameraRig, Pose, Vec2, Vec3};
use crate::renderer::{RenderConfig, RgbdImage};
use crate::simulator::floorplan::{Edge, FloorPlan};

pub const FLOOR_RGB: [f64; 3] = [0.35, 0.3, 0.25];
pub const CEILING_RGB: [f64; 3] = [0.85, 0.85, 0.8];

/// A floor plan prepared for ray casting.
#[derive(Debug, Clone)]
pub struct Scene {
    pub edges: Vec<Edge>,
    pub ceiling: f64,
}

/// Parameter `t > 0` where `o + t d` crosses segment `e`, if it does.
fn ray_edge(o: &Vec2, d: &Vec2, e: &Edge) -> Option<f64> {
    let s = e.b - e.a;
    let denom = d.x * s.y - d.y * s.x;
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = e.a - o;
    let t = (w.x * s.y - w.y * s.x) / denom;
    let u = (w.x * d.y - w.y * d.x) / denom;
    (t > 1e-12 && (0.0..=1.0).contains(&u)).then_some(t)
}

impl Scene {
    pub fn new(plan: &FloorPlan) -> Self {
        Self { edges: plan.edges(), ceiling: plan.ceiling_height() }
    }

    /// First surface along `origin + t·dir`, as `(t, colour)`.
    pub fn cast_ray(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, [f64; 3])> {
        let o = Vec2::new(origin.x, origin.y);
        let d = Vec2::new(dir.x, dir.y);
        let mut best: Option<(f64, [f64; 3])> = self.plane_hit(origin, dir);
        for e in &self.edges {
            if let Some(t) = ray_edge(&o, &d, e) {
                let z = origin.z + t * dir.z;
                if (0.0..=e.height).contains(&z) && best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, e.rgb));
                }
            }
        }
        best
    }

    fn plane_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, [f64; 3])> {
        if dir.z < 0.0 {
            Some((-origin.z / dir.z, FLOOR_RGB))
        } else if dir.z > 0.0 {
            Some(((self.ceiling - origin.z) / dir.z, CEILING_RGB))
        } else {
            None
        }
    }

    /// Render the view from a camera pose. Depth is z-depth clipped to the
    /// maximum range.
    pub fn render(&self, pose: &Pose, rig: &CameraRig, cfg: &RenderConfig) -> RgbdImage {
        let k = rig.intrinsics;
        let mut img = RgbdImage::new(k);
        let r = &pose.rotation;
        // Level camera: image columns are vertical fans sharing one heading.
        let level = r[(2, 0)].abs() < 1e-12 && r[(2, 2)].abs() < 1e-12;
        let max = cfg.max_range();
        let o2 = Vec2::new(pose.translation.x, pose.translation.y);
        let mut hits: Vec<(f64, usize)> = Vec::new();
        for i in 0..k.width {
            if level {
                let d = r * k.unproject_unit_depth(i as f64, k.cy);
                let d2 = Vec2::new(d.x, d.y);
                hits.clear();
                hits.extend(self.edges.iter().enumerate().filter_map(|(n, e)| ray_edge(&o2, &d2, e).map(|t| (t, n))));
                hits.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
            for j in 0..k.height {
                let dir = r * k.unproject_unit_depth(i as f64, j as f64);
                let hit = if level {
                    let plane = self.plane_hit(&pose.translation, &dir);
                    let wall = hits.iter().find(|(t, n)| {
                        let z = pose.translation.z + t * dir.z;
                        (0.0..=self.edges[*n].height).contains(&z)
                    });
                    match (wall, plane) {
                        (Some(&(t, n)), Some((tp, c))) => Some(if t <= tp { (t, self.edges[n].rgb) } else { (tp, c) }),
                        (Some(&(t, n)), None) => Some((t, self.edges[n].rgb)),
                        (None, p) => p,
                    }
                } else {
                    self.cast_ray(&pose.translation, &dir)
                };
                match hit {
                    Some((t, rgb)) => img.set(i, j, rgb, t.min(max)),
                    None => img.set(i, j, cfg.background, max),
                }
            }
        }
        img
    }

    pub fn observe(&self, state: &AgentState, rig: &CameraRig, cfg: &RenderConfig) -> RgbdImage {
        self.render(&rig.camera_pose(state), rig, cfg)
    }
}

/// Ground-truth RGB-D observation of the agent's camera.
pub fn observe(plan: &FloorPlan, state: &AgentState, rig: &CameraRig, cfg: &RenderConfig) -> RgbdImage {
    Scene::new(plan).observe(state, rig, cfg)
}
