mod common;

use proptest::prelude::*;
use voxnav::evaluation::*;
use voxnav::geometry::AgentState;
use voxnav::simulator::{paint_voxel_map, plan_geometry, FloorPlan, NavTask, NoiseConfig, NoisePreset};
use voxnav::tracking::TrackingMethod;
use voxnav::voxel_map::VoxelMap;

use common::{rig, textured_room};

fn result(success: bool, p: f64, l: f64) -> NavResult {
    NavResult { task: 0, success, path_length: p, optimal_length: l, steps: 1, final_distance: 0.0, failure: None }
}

proptest! {
    #[test]
    fn spl_is_a_fraction_and_monotone(
        runs in prop::collection::vec((any::<bool>(), 0.5f64..20.0, 0.5f64..20.0), 1..30),
        k in 0usize..30, extra in 0.0f64..5.0,
    ) {
        let results: Vec<NavResult> = runs.iter().map(|&(s, p, l)| result(s, p, l)).collect();
        let v = spl(&results).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let k = k % results.len();
        // A longer realized path never helps.
        let mut longer = results.clone();
        longer[k].path_length += extra;
        prop_assert!(spl(&longer).unwrap() <= v + 1e-12);
        // Turning a failure into a success never hurts.
        let mut won = results.clone();
        won[k].success = true;
        prop_assert!(spl(&won).unwrap() >= v - 1e-12);
    }
}

fn room_and_map() -> (FloorPlan, VoxelMap) {
    let plan = textured_room(4.0, 3.0, 21);
    let map = paint_voxel_map(&plan, plan_geometry(&plan, 0.05, 0.05).unwrap());
    (plan, map)
}

fn task() -> NavTask {
    NavTask { start: AgentState::new(0.7, 0.8, 0.3), target: [3.2, 2.2] }
}

#[test]
fn zero_noise_navigation_succeeds() {
    let (plan, map) = room_and_map();
    let cfg = EpisodeConfig::new(rig(), 0.2, NoiseConfig::none(), TrackingMethod::Ours);
    let (r, rec) = run_episode(&plan, &map, &task(), 0, &cfg, 1).unwrap();
    assert!(r.success, "{r:?}");
    assert!(r.spl_term() > 0.8, "{r:?}");
    let (loc, _) = rmse(&rec).unwrap();
    assert!(loc < 1e-3, "{loc}");
}

#[test]
fn episodes_are_deterministic() {
    let (plan, map) = room_and_map();
    let cfg = EpisodeConfig::new(rig(), 0.2, NoiseConfig::preset(NoisePreset::Mid, 0.2), TrackingMethod::Ours);
    let (a, ra) = run_episode(&plan, &map, &task(), 3, &cfg, 7).unwrap();
    let (b, rb) = run_episode(&plan, &map, &task(), 3, &cfg, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.steps.len(), rb.steps.len());
    for (x, y) in ra.steps.iter().zip(&rb.steps) {
        assert_eq!((x.state_true, x.state_est, x.control), (y.state_true, y.state_est, y.control));
    }
}

#[test]
fn map_tracking_beats_path_integration_at_high_noise() {
    let (plan, map) = room_and_map();
    let noise = NoiseConfig::preset(NoisePreset::High, 0.2);
    let mut ours = EpisodeConfig::new(rig(), 0.2, noise, TrackingMethod::Ours);
    ours.mode = EpisodeMode::TrackOnly;
    let dynamics = EpisodeConfig { method: TrackingMethod::Dynamics, ..ours.clone() };
    let seeds = 50;
    let mut better = 0;
    for seed in 0..seeds {
        let (_, a) = run_episode(&plan, &map, &task(), 0, &ours, seed).unwrap();
        let (_, b) = run_episode(&plan, &map, &task(), 0, &dynamics, seed).unwrap();
        if rmse(&a).unwrap().0 < rmse(&b).unwrap().0 {
            better += 1;
        }
    }
    assert!(better * 10 >= seeds * 6, "{better}/{seeds}");
}
