//! A 2.5D indoor world: floor plans, noisy planar dynamics, collisions,
//! ground-truth RGB-D and navigation tasks.

pub mod collision;
pub mod dynamics;
pub mod floorplan;
pub mod observe;
pub mod tasks;

use serde::{Deserialize, Serialize};

pub use collision::resolve_collision;
pub use dynamics::{apply_dynamics, step_dynamics, NoiseConfig, NoisePreset, NoiseSample};
pub use floorplan::{generate_floorplan, generate_layout, FloorPlan, GenSpec, Layout, Obstacle, Wall, SAFETY_FACTOR};
pub use observe::{observe, Scene};
pub use tasks::{sample_free_point, sample_free_pose, sample_tasks, NavTask};

use crate::geometry::{AgentState, Control, Vec3};
use crate::simulator::floorplan::point_in_convex_polygon;
use crate::voxel_map::{GridGeometry, VoxelMap};

/// One line of an episode log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub state_true: AgentState,
    pub state_est: AgentState,
    pub control: Control,
    pub collision: bool,
}

/// A voxel map painted from the plan: occupancy 1 inside solids (obstacles,
/// outside the bounding box, below the floor, above the ceiling), else 0;
/// each node takes the colour of the nearest surface.
pub fn paint_voxel_map(plan: &FloorPlan, geometry: GridGeometry) -> VoxelMap {
    let mut map = VoxelMap::new(geometry);
    let scene = Scene::new(plan);
    let (lo, hi) = (plan.bbox_min(), plan.bbox_max());
    let [nx, ny, nz] = geometry.dims;
    for j in 0..ny {
        for i in 0..nx {
            let p = geometry.node_position(i, j, 0);
            let q = crate::geometry::Vec2::new(p.x, p.y);
            let outside = q.x < lo.x || q.y < lo.y || q.x > hi.x || q.y > hi.y;
            let inside = plan.obstacles.iter().any(|o| point_in_convex_polygon(&q, &o.poly));
            // Nearest wall colour in the plane.
            let mut best = (f64::INFINITY, observe::FLOOR_RGB);
            for e in &scene.edges {
                let d = floorplan::point_segment_distance(&q, &e.a, &e.b);
                if d < best.0 {
                    best = (d, e.rgb);
                }
            }
            for k in 0..nz {
                let z = geometry.node_position(i, j, k).z;
                let idx = geometry.index(i, j, k);
                let (solid, rgb) = if z < 0.0 {
                    (true, observe::FLOOR_RGB)
                } else if z > scene.ceiling {
                    (true, observe::CEILING_RGB)
                } else {
                    (outside || inside, best.1)
                };
                let near_floor = z.abs() <= geometry.cell[2];
                let near_ceiling = (z - scene.ceiling).abs() <= geometry.cell[2];
                let rgb = if !(outside || inside) && best.0 > geometry.cell[0] {
                    if near_floor {
                        observe::FLOOR_RGB
                    } else if near_ceiling {
                        observe::CEILING_RGB
                    } else {
                        rgb
                    }
                } else {
                    rgb
                };
                map.occ[idx] = if solid { 1.0 } else { 0.0 };
                for c in 0..3 {
                    map.col[3 * idx + c] = rgb[c] as f32;
                }
            }
        }
    }
    map
}

/// A grid covering `plan` with margin one cell beyond the walls, floor and ceiling.
pub fn plan_geometry(plan: &FloorPlan, cell_xy: f64, cell_z: f64) -> crate::Result<GridGeometry> {
    let (lo, hi) = (plan.bbox_min(), plan.bbox_max());
    let h = plan.ceiling_height();
    GridGeometry::covering(
        Vec3::new(lo.x - cell_xy, lo.y - cell_xy, -cell_z),
        Vec3::new(hi.x + cell_xy, hi.y + cell_xy, h + cell_z),
        cell_xy,
        cell_z,
    )
}

/// `count` ground-truth RGB-D frames from poses drawn uniformly over the
/// collision-free space.
pub fn capture_dataset(
    plan: &FloorPlan,
    rig: &crate::geometry::CameraRig,
    render: &crate::renderer::RenderConfig,
    count: usize,
    rng: &mut impl rand::Rng,
) -> crate::Result<crate::map_learning::PosedDataset> {
    let scene = Scene::new(plan);
    let radius = 0.5 * plan.body_length;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let s = sample_free_pose(plan, radius, rng)?;
        frames.push(crate::map_learning::Frame { image: scene.observe(&s, rig, render), pose: rig.camera_pose(&s) });
    }
    crate::map_learning::PosedDataset::new(frames)
}
