//! Navigation task and free-pose sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AgentState, Vec2};
use crate::simulator::floorplan::{FloorPlan, SAFETY_FACTOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavTask {
    pub start: AgentState,
    pub target: [f64; 2],
}

impl NavTask {
    pub fn target(&self) -> Vec2 {
        Vec2::new(self.target[0], self.target[1])
    }

    /// Whether the task meets the separation and clearance rules of `plan`.
    pub fn is_valid(&self, plan: &FloorPlan) -> bool {
        let b = plan.body_length;
        (self.start.position() - self.target()).norm() > 3.0 * b
            && plan.is_free(&self.start.position(), SAFETY_FACTOR * b)
            && plan.is_free(&self.target(), SAFETY_FACTOR * b)
    }
}

const ATTEMPTS_PER_SAMPLE: usize = 10_000;

/// Uniform point of the bounding box with at least `radius` clearance.
pub fn sample_free_point(plan: &FloorPlan, radius: f64, rng: &mut impl Rng) -> Result<Vec2> {
    let (lo, hi) = (plan.bbox_min(), plan.bbox_max());
    for _ in 0..ATTEMPTS_PER_SAMPLE {
        let p = Vec2::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y));
        if plan.is_free(&p, radius) {
            return Ok(p);
        }
    }
    Err(Error::TaskSampling { attempts: ATTEMPTS_PER_SAMPLE })
}

/// Uniform collision-free pose with a uniform heading.
pub fn sample_free_pose(plan: &FloorPlan, radius: f64, rng: &mut impl Rng) -> Result<AgentState> {
    let p = sample_free_point(plan, radius, rng)?;
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    Ok(AgentState::new(p.x, p.y, heading))
}

/// Rejection-sample `count` tasks.
pub fn sample_tasks(plan: &FloorPlan, count: usize, rng: &mut impl Rng) -> Result<Vec<NavTask>> {
    let r = SAFETY_FACTOR * plan.body_length;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    let budget = ATTEMPTS_PER_SAMPLE * count.max(1);
    while out.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::TaskSampling { attempts: budget });
        }
        let Ok(start) = sample_free_pose(plan, r, rng) else {
            return Err(Error::TaskSampling { attempts });
        };
        let Ok(target) = sample_free_point(plan, r, rng) else {
            return Err(Error::TaskSampling { attempts });
        };
        let task = NavTask { start, target: [target.x, target.y] };
        if task.is_valid(plan) {
            out.push(task);
        }
    }
    Ok(out)
}
