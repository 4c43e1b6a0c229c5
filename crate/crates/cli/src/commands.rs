use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voxnav::dataset::{load_dataset, save_dataset};
use voxnav::evaluation::*;
use voxnav::io::{write_atomic, write_text_atomic};
use voxnav::map_learning::{TrainConfig, Trainer};
use voxnav::renderer::RenderConfig;
use voxnav::simulator::floorplan::FreeRaster;
use voxnav::simulator::{capture_dataset, generate_floorplan, plan_geometry, sample_tasks, FloorPlan, GenSpec, NavTask};
use voxnav::tracking::TrackingMethod;
use voxnav::voxel_map::VoxelMap;

use crate::args::*;
use crate::error::CliError;

/// Independent streams per subcommand so runs do not share random draws.
const STREAM_CAPTURE: u64 = 1;
const STREAM_TASKS: u64 = 2;
const STREAM_TRAJECTORIES: u64 = 3;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_snapshot(dir: &Path, snapshot: &Snapshot) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(snapshot).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(write_text_atomic(&dir.join("config.json"), &text)?)
}

pub fn execute(snapshot: &Snapshot) -> Result<(), CliError> {
    let seed = snapshot.seed;
    match &snapshot.command {
        Command::GenWorld(a) => gen_world(a, seed, snapshot),
        Command::Capture(a) => capture(a, seed, snapshot),
        Command::Learn(a) => learn(a, seed, snapshot),
        Command::TrackEval(a) => track_eval(a, seed, snapshot),
        Command::Navigate(a) => navigate(a, seed, snapshot),
        Command::Bench(a) => bench(a, seed, snapshot),
    }
}

fn gen_world(a: &GenWorldArgs, seed: u64, snapshot: &Snapshot) -> Result<(), CliError> {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            serde_json::from_str::<GenSpec>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => GenSpec { width: a.width, depth: a.depth, rooms: [a.min_rooms, a.max_rooms], ..GenSpec::default() },
    };
    let plan = generate_floorplan(seed, &spec)?;
    create_dir(&a.out)?;
    plan.save(&a.out.join("plan.json"))?;
    write_snapshot(&a.out, snapshot)?;
    let raster = FreeRaster::new(&plan, 0.5 * plan.body_length, 0.05);
    let free = raster.free_count() as f64 * raster.resolution * raster.resolution;
    let area = (plan.bbox[1][0] - plan.bbox[0][0]) * (plan.bbox[1][1] - plan.bbox[0][1]);
    println!(
        "plan: {} walls, {} obstacles, free space {:.1} of {:.1} m² ({:.0}%), {} component(s)",
        plan.walls.len(),
        plan.obstacles.len(),
        free,
        area,
        100.0 * free / area,
        raster.components().len()
    );
    Ok(())
}

fn capture(a: &CaptureArgs, seed: u64, snapshot: &Snapshot) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::Config("--count must be positive".into()));
    }
    let plan = FloorPlan::load(&a.plan)?;
    let rig = a.rig.rig()?;
    let data = capture_dataset(&plan, &rig, &RenderConfig::default(), a.count, &mut rng(seed, STREAM_CAPTURE))?;
    save_dataset(&data, &a.out)?;
    write_snapshot(&a.out, snapshot)?;
    println!("captured {} frames into {}", data.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct LossRow {
    step: u64,
    loss: f64,
    sigma: f64,
}

fn read_loss_csv(path: &Path, before: u64) -> Result<Vec<LossRow>, CliError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = || -> Option<LossRow> {
            Some(LossRow { step: f.first()?.parse().ok()?, loss: f.get(1)?.parse().ok()?, sigma: f.get(2)?.parse().ok()? })
        };
        let row = parse().ok_or_else(|| CliError::Io(format!("{}: malformed row {line:?}", path.display())))?;
        if row.step < before {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn learn(a: &LearnArgs, seed: u64, snapshot: &Snapshot) -> Result<(), CliError> {
    if a.checkpoint_every == 0 {
        return Err(CliError::Config("--checkpoint-every must be positive".into()));
    }
    let cfg = TrainConfig { steps: a.steps, learning_rate: a.learning_rate, seed, ..TrainConfig::default() };
    let render = RenderConfig::default();
    let data = load_dataset(&a.dataset)?;
    let plan = FloorPlan::load(&a.plan)?;
    create_dir(&a.out)?;
    let ckpt = a.out.join("checkpoint.bin");
    let loss_path = a.out.join("loss.csv");

    let mut trainer = if a.resume && ckpt.exists() {
        let bytes = fs::read(&ckpt).map_err(|e| io_err(&ckpt, e))?;
        let mut t = Trainer::decode_checkpoint(&bytes)?;
        let mut expected = cfg;
        expected.steps = t.cfg.steps;
        if t.cfg != expected || t.render != render {
            return Err(CliError::Config("checkpoint was written with a different training configuration".into()));
        }
        t.cfg.steps = a.steps;
        println!("resuming at step {}", t.step);
        t
    } else {
        Trainer::new(plan_geometry(&plan, a.cell, a.cell)?, cfg, render)?
    };
    let mut rows = if trainer.step > 0 { read_loss_csv(&loss_path, trainer.step)? } else { Vec::new() };
    if rows.len() as u64 != trainer.step {
        return Err(CliError::Io(format!("{} does not cover the {} checkpointed steps", loss_path.display(), trainer.step)));
    }

    let save = |t: &Trainer, rows: &[LossRow]| -> Result<(), CliError> {
        write_atomic(&ckpt, &t.encode_checkpoint()?)?;
        write_csv(&loss_path, rows)?;
        Ok(())
    };
    write_snapshot(&a.out, snapshot)?;
    while (trainer.step as usize) < a.steps {
        let step = trainer.step;
        let loss = trainer.step(&data)?;
        if !loss.is_finite() {
            return Err(CliError::Algorithm(format!("loss diverged at step {step}")));
        }
        rows.push(LossRow { step, loss, sigma: trainer.map.scales.depth });
        if trainer.step % a.checkpoint_every as u64 == 0 {
            save(&trainer, &rows)?;
        }
    }
    save(&trainer, &rows)?;
    trainer.map.save(a.out.join("map.vox"))?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!("trained {} steps: loss {:.1} -> {:.1}, sigma {:.4}", rows.len(), first.loss, last.loss, last.sigma);
    }
    Ok(())
}

fn load_world(plan: &Path, map: &Path) -> Result<(FloorPlan, VoxelMap), CliError> {
    Ok((FloorPlan::load(plan)?, VoxelMap::load(map)?))
}

fn track_eval(a: &TrackEvalArgs, seed: u64, snapshot: &Snapshot) -> Result<(), CliError> {
    if a.methods.is_empty() || a.trajectories == 0 || a.seeds == 0 {
        return Err(CliError::Config("need at least one method, trajectory and seed".into()));
    }
    let (plan, map) = load_world(&a.plan, &a.map)?;
    let rig = a.rig.rig()?;
    let noise = a.noise.config(plan.body_length);
    let routes = sample_tasks(&plan, a.trajectories, &mut rng(seed, STREAM_TRAJECTORIES))?;
    create_dir(&a.out)?;
    write_snapshot(&a.out, snapshot)?;
    let mut series = Vec::new();
    for &method in &a.methods {
        let mut cfg = EpisodeConfig::new(rig, plan.body_length, noise, method);
        cfg.mode = EpisodeMode::TrackOnly;
        let jobs: Vec<(usize, u64)> = (0..routes.len()).flat_map(|t| (0..a.seeds).map(move |s| (t, s))).collect();
        let rows = jobs
            .par_iter()
            .map(|&(t, s)| {
                let (_, rec) = run_episode(&plan, &map, &routes[t], t, &cfg, seed.wrapping_add(s))?;
                let (loc, ori) = rmse(&rec)?;
                Ok(TrackRow { traj_id: t, seed: s, loc_rmse_m: loc, ori_rmse_rad: ori, mean_step_seconds: rec.mean_step_seconds() })
            })
            .collect::<voxnav::Result<Vec<_>>>()?;
        let name = method.name();
        write_csv(&a.out.join(format!("track_{name}.csv")), &rows)?;
        let loc: Vec<f64> = rows.iter().map(|r| r.loc_rmse_m).collect();
        let ori: Vec<f64> = rows.iter().map(|r| r.ori_rmse_rad).collect();
        write_csv(&a.out.join(format!("cdf_loc_{name}.csv")), &cdf_rows(&loc))?;
        write_csv(&a.out.join(format!("cdf_ori_{name}.csv")), &cdf_rows(&ori))?;
        let under = loc.iter().filter(|&&v| v < 0.5 * plan.body_length).count();
        println!("{name}: {under}/{} runs with location RMSE below half a body length", rows.len());
        series.push((name.to_string(), loc));
    }
    write_text_atomic(&a.out.join("cdf_loc.svg"), &cdf_svg("location RMSE (m)", &series))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CdfRow {
    value: f64,
    fraction: f64,
}

fn cdf_rows(values: &[f64]) -> Vec<CdfRow> {
    cdf(values).into_iter().map(|(value, fraction)| CdfRow { value, fraction }).collect()
}

#[derive(Debug, Serialize)]
struct NavSummary {
    method: String,
    noise: String,
    tasks: usize,
    successes: usize,
    spl: f64,
}

fn navigate(a: &NavigateArgs, seed: u64, snapshot: &Snapshot) -> Result<(), CliError> {
    if a.tasks == 0 {
        return Err(CliError::Config("--tasks must be positive".into()));
    }
    let (plan, map) = load_world(&a.plan, &a.map)?;
    let cfg = EpisodeConfig::new(a.rig.rig()?, plan.body_length, a.noise.config(plan.body_length), a.method);
    let tasks = sample_tasks(&plan, a.tasks, &mut rng(seed, STREAM_TASKS))?;
    create_dir(&a.out)?;
    write_snapshot(&a.out, snapshot)?;
    let env = a.plan.file_stem().and_then(|s| s.to_str()).unwrap_or("plan").to_string();
    let noise = a.noise.to_string();
    let runs =
        tasks.par_iter().enumerate().map(|(i, task)| run_episode(&plan, &map, task, i, &cfg, seed)).collect::<voxnav::Result<Vec<_>>>()?;
    let rows: Vec<NavRow> = runs.iter().map(|(r, rec)| NavRow::new(&env, a.method, &noise, r, rec)).collect();
    write_csv(&a.out.join("navigation.csv"), &rows)?;
    let results: Vec<NavResult> = runs.iter().map(|(r, _)| r.clone()).collect();
    let summary = NavSummary {
        method: a.method.name().into(),
        noise,
        tasks: results.len(),
        successes: results.iter().filter(|r| r.success).count(),
        spl: spl(&results)?,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Config(e.to_string()))?;
    write_text_atomic(&a.out.join("summary.json"), &text)?;
    write_text_atomic(&a.out.join("spl.svg"), &bar_svg("SPL", &[(summary.method.clone(), summary.spl)]))?;
    if a.plots > 0 {
        let dir = a.out.join("trajectories");
        create_dir(&dir)?;
        for (i, ((_, rec), task)) in runs.iter().zip(&tasks).take(a.plots).enumerate() {
            write_text_atomic(&dir.join(format!("task_{i:03}.svg")), &trajectory_svg(&plan, rec, task))?;
        }
    }
    println!("{}: {}/{} successes, SPL {:.3}", summary.method, summary.successes, summary.tasks, summary.spl);
    Ok(())
}

fn bench(a: &BenchArgs, seed: u64, snapshot: &Snapshot) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Config("--trials must be positive".into()));
    }
    let (plan, map) = load_world(&a.plan, &a.map)?;
    let cfg = EpisodeConfig::new(a.rig.rig()?, plan.body_length, a.noise.config(plan.body_length), TrackingMethod::Ours);
    let task: NavTask = sample_tasks(&plan, 1, &mut rng(seed, STREAM_TASKS))?[0];
    create_dir(&a.out)?;
    write_snapshot(&a.out, snapshot)?;
    let rows = bench_runtimes(&plan, &map, &task, &cfg, a.trials, seed)?.rows();
    write_csv(&a.out.join("bench.csv"), &rows)?;
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.component.clone(), 1e3 * r.mean_seconds)).collect();
    write_text_atomic(&a.out.join("bench.svg"), &bar_svg("mean step time (ms)", &bars))?;
    for r in &rows {
        println!("{:<20} {:>9.2} ms ± {:.2}", r.component, 1e3 * r.mean_seconds, 1e3 * r.std_seconds);
    }
    let mean = |name: &str| rows.iter().find(|r| r.component == name).map_or(f64::NAN, |r| r.mean_seconds);
    let (track, emission) = (mean("track_step"), mean("emission_track_step"));
    let verdict = if track <= emission / 3.0 { "PASS" } else { "FAIL" };
    println!("[{verdict}] track_step is {:.1}x faster than emission_track_step (need 3x)", emission / track);
    Ok(())
}
