//! Swept-disc collision checks against floor-plan surfaces.

use crate::geometry::Vec2;
use crate::simulator::floorplan::{segment_segment_distance, Edge, FloorPlan};

/// Whether a disc of `radius` swept from `from` to `to` stays clear of every
/// edge.
pub fn sweep_is_clear(edges: &[Edge], from: &Vec2, to: &Vec2, radius: f64) -> bool {
    edges.iter().all(|e| segment_segment_distance(from, to, &e.a, &e.b) >= radius)
}

/// `to` if the swept disc is collision-free, otherwise `from`: a blocked step
/// does not move at all.
pub fn resolve_collision(plan: &FloorPlan, from: &Vec2, to: &Vec2, radius: f64) -> Vec2 {
    resolve_with_edges(&plan.edges(), from, to, radius)
}

pub fn resolve_with_edges(edges: &[Edge], from: &Vec2, to: &Vec2, radius: f64) -> Vec2 {
    if sweep_is_clear(edges, from, to, radius) {
        *to
    } else {
        *from
    }
}
