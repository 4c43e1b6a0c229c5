mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxnav::map_learning::{TrainConfig, Trainer};
use voxnav::renderer::RenderConfig;
use voxnav::simulator::{capture_dataset, paint_voxel_map, plan_geometry, Obstacle};

#[test]
fn learned_slice_recovers_the_walls() {
    let mut plan = common::textured_room(4.0, 3.0, 8);
    plan.obstacles.push(Obstacle { poly: vec![[1.6, 1.0], [2.4, 1.0], [2.4, 1.6], [1.6, 1.6]], rgb: [0.8, 0.3, 0.2] });
    let rig = common::rig();
    let render = RenderConfig::default();
    let data = capture_dataset(&plan, &rig, &render, 500, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let geometry = plan_geometry(&plan, 0.1, 0.1).unwrap();
    let cfg = TrainConfig { steps: 4000, ..Default::default() };
    let mut trainer = Trainer::new(geometry, cfg, render).unwrap();
    trainer.run(&data, |_, _| {}).unwrap();

    let learned = trainer.map.occupancy_slice(rig.height, 0.5).unwrap();
    let truth = paint_voxel_map(&plan, geometry).occupancy_slice(rig.height, 0.5).unwrap();
    let both = learned.occupied.iter().zip(&truth.occupied).filter(|(a, b)| **a && **b).count();
    let either = learned.occupied.iter().zip(&truth.occupied).filter(|(a, b)| **a || **b).count();
    let iou = both as f64 / either as f64;
    assert!(iou > 0.7, "IoU {iou:.3}");
}
