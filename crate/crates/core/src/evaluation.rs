//! Metrics, closed-loop episodes, runtime benchmarks and report files.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, AgentState, CameraRig, Control, ControlLimits, Vec2};
use crate::io::write_text_atomic;
use crate::planning::{astar, next_control, plan_route, ControlOutcome, LearnedTraversability, PlanConfig, PlanTraversability, Waypoints};
use crate::renderer::{render_rgbd, RenderConfig};
use crate::simulator::collision::resolve_with_edges;
use crate::simulator::{step_dynamics, FloorPlan, NavTask, NoiseConfig, Scene};
use crate::tracking::{emission_track_step, FilterState, Tracker, TrackerConfig, TrackingMethod};
use crate::voxel_map::VoxelMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavResult {
    pub task: usize,
    pub success: bool,
    /// Realized true path length.
    pub path_length: f64,
    /// Reference shortest path length.
    pub optimal_length: f64,
    pub steps: usize,
    pub final_distance: f64,
    /// Why the episode ended early, if it did.
    pub failure: Option<String>,
}

impl NavResult {
    pub fn spl_term(&self) -> f64 {
        if self.success {
            self.optimal_length / self.path_length.max(self.optimal_length)
        } else {
            0.0
        }
    }
}

/// `(1/N) Σ s_i l_i / max(p_i, l_i)`.
pub fn spl(results: &[NavResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("navigation results"));
    }
    Ok(results.iter().map(NavResult::spl_term).sum::<f64>() / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepTimes {
    pub observe: f64,
    pub optimize: f64,
    pub render: f64,
    pub control: f64,
}

impl StepTimes {
    pub fn track(&self) -> f64 {
        self.optimize + self.render
    }

    pub fn total(&self) -> f64 {
        self.observe + self.optimize + self.render + self.control
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub state_true: AgentState,
    pub state_est: AgentState,
    pub control: Control,
    pub collision: bool,
    pub tracking_failed: bool,
    pub times: StepTimes,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub steps: Vec<TrajectoryStep>,
}

impl TrajectoryRecord {
    pub fn mean_step_seconds(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.times.track()).sum::<f64>() / self.steps.len() as f64
    }
}

/// Root-mean-square planar position and wrapped heading errors.
pub fn rmse(rec: &TrajectoryRecord) -> Result<(f64, f64)> {
    if rec.steps.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let n = rec.steps.len() as f64;
    let (mut l, mut o) = (0.0, 0.0);
    for s in &rec.steps {
        l += (s.state_true.position() - s.state_est.position()).norm_squared();
        o += wrap_angle(s.state_true.heading - s.state_est.heading).powi(2);
    }
    Ok(((l / n).sqrt(), (o / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeMode {
    /// Control from the estimate, waypoints from the learned map.
    Navigate,
    /// Control from the true state along a ground-truth route; the tracker
    /// only observes.
    TrackOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub rig: CameraRig,
    pub render: RenderConfig,
    pub tracker: TrackerConfig,
    pub plan: PlanConfig,
    pub noise: NoiseConfig,
    pub method: TrackingMethod,
    pub mode: EpisodeMode,
    /// Height of the occupancy slice used for planning.
    pub slice_height: f64,
    /// `None` picks `10 · l / max_speed`.
    pub max_steps: Option<usize>,
    /// Replan after this many steps without getting closer to the target.
    pub stall_steps: usize,
}

impl EpisodeConfig {
    pub fn new(rig: CameraRig, body_length: f64, noise: NoiseConfig, method: TrackingMethod) -> Self {
        let tracker = match method {
            TrackingMethod::Emission => TrackerConfig::emission(),
            _ => TrackerConfig::default(),
        }
        .with_noise(&noise);
        Self {
            rig,
            render: RenderConfig::default(),
            tracker,
            plan: PlanConfig::for_body(body_length),
            noise,
            method,
            mode: EpisodeMode::Navigate,
            slice_height: rig.height,
            max_steps: None,
            stall_steps: 50,
        }
    }
}

/// Shortest path length on the fine ground-truth lattice, with the last
/// stretch to the exact target added.
pub fn optimal_length(plan: &FloorPlan, task: &NavTask) -> Result<f64> {
    let cfg = PlanConfig::reference(plan.body_length);
    let world = PlanTraversability::new(plan);
    let start = task.start.position();
    let target = task.target();
    let p = astar(&world, &start, &target, &cfg)?;
    let last = p.waypoints.len().checked_sub(1).map(|k| p.waypoints.get(k)).unwrap_or(start);
    Ok(p.cost + (target - last).norm())
}

/// Noise seed of task `task` under the global `seed`; shared by all methods.
pub fn episode_seed(seed: u64, task: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (task as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// One closed-loop episode.
pub fn run_episode(
    plan: &FloorPlan,
    map: &VoxelMap,
    task: &NavTask,
    task_id: usize,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<(NavResult, TrajectoryRecord)> {
    let body = plan.body_length;
    let limits = ControlLimits::for_body(body);
    let target = task.target();
    let optimal = optimal_length(plan, task)?;
    let max_steps = cfg.max_steps.unwrap_or_else(|| (10.0 * optimal / limits.max_speed).ceil() as usize);
    let tracker = Tracker::new(cfg.tracker, cfg.rig, cfg.render, cfg.method)?;
    let scene = Scene::new(plan);
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, task_id));

    let learned = LearnedTraversability::new(map, cfg.slice_height, cfg.plan)?;
    let truth = PlanTraversability::new(plan);
    let route = |from: &Vec2| match cfg.mode {
        EpisodeMode::Navigate => plan_route(&learned, from, &target, &cfg.plan),
        EpisodeMode::TrackOnly => plan_route(&truth, from, &target, &cfg.plan),
    };

    let mut z_true = task.start;
    let first = scene.observe(&z_true, &cfg.rig, &cfg.render);
    let mut fs: FilterState = tracker.init(z_true, map, &first);
    let mut record = TrajectoryRecord::default();
    let mut path_length = 0.0;
    let mut failure = None;
    let mut wp: Waypoints = match route(&z_true.position()) {
        Ok(w) => w,
        Err(e) => {
            failure = Some(format!("planning: {e}"));
            Waypoints::new(vec![])
        }
    };
    let mut best = f64::INFINITY;
    let mut since_progress = 0;
    let radius = 0.5 * body;

    if failure.is_none() {
        for t in 0..max_steps {
            let tc = Instant::now();
            let driver = if cfg.mode == EpisodeMode::TrackOnly { z_true } else { fs.state };
            let u = match next_control(&driver, &mut wp, &limits, cfg.plan.arrival()) {
                ControlOutcome::Done => break,
                ControlOutcome::Command(u) => u,
            };
            let control = tc.elapsed().as_secs_f64();

            let to = step_dynamics(&z_true, &u, &cfg.noise, &mut rng);
            let p = resolve_with_edges(&scene.edges, &z_true.position(), &to.position(), radius);
            let collision = p != to.position();
            path_length += (p - z_true.position()).norm();
            z_true = AgentState { x: p.x, y: p.y, heading: to.heading };

            let to_obs = Instant::now();
            let obs = scene.observe(&z_true, &cfg.rig, &cfg.render);
            let observe = to_obs.elapsed().as_secs_f64();
            let out = tracker.step(&mut fs, &u, &obs, map);
            record.steps.push(TrajectoryStep {
                t,
                state_true: z_true,
                state_est: fs.state,
                control: u,
                collision,
                tracking_failed: out.failed,
                times: StepTimes { observe, optimize: out.optimize_seconds, render: out.render_seconds, control },
            });

            let d = (fs.state.position() - target).norm();
            if d < best - 1e-9 {
                best = d;
                since_progress = 0;
            } else {
                since_progress += 1;
            }
            if cfg.mode == EpisodeMode::Navigate && (out.failed || since_progress >= cfg.stall_steps) {
                since_progress = 0;
                best = d;
                match route(&fs.state.position()) {
                    Ok(w) => wp = w,
                    Err(e) => {
                        failure = Some(format!("replanning: {e}"));
                        break;
                    }
                }
            }
        }
    }
    let final_distance = (z_true.position() - target).norm();
    let result = NavResult {
        task: task_id,
        success: final_distance < 2.0 * body,
        path_length,
        optimal_length: optimal,
        steps: record.steps.len(),
        final_distance,
        failure,
    };
    Ok((result, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Render,
    TrackStep,
    EmissionTrackStep,
    PipelineStep,
}

impl Component {
    pub const ALL: [Component; 4] = [Self::Render, Self::TrackStep, Self::EmissionTrackStep, Self::PipelineStep];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Render => "voxel_render",
            Self::TrackStep => "track_step",
            Self::EmissionTrackStep => "emission_track_step",
            Self::PipelineStep => "pipeline_step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub component: String,
    pub trials: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Paired per-step timings of both trackers on identical inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairedTimings {
    pub render: Vec<f64>,
    pub track: Vec<f64>,
    pub emission: Vec<f64>,
    pub pipeline: Vec<f64>,
}

impl PairedTimings {
    pub fn rows(&self) -> Vec<BenchRow> {
        let cols = [&self.render, &self.track, &self.emission, &self.pipeline];
        Component::ALL
            .iter()
            .zip(cols)
            .map(|(c, v)| {
                let (m, s) = mean_std(v);
                BenchRow { component: c.name().into(), trials: v.len(), mean_seconds: m, std_seconds: s }
            })
            .collect()
    }
}

/// Time every component over `trials` steps of a noisy closed-loop drive.
/// At each step both trackers start from the same filter state and see the
/// same control and observation.
pub fn bench_runtimes(
    plan: &FloorPlan,
    map: &VoxelMap,
    task: &NavTask,
    cfg: &EpisodeConfig,
    trials: usize,
    seed: u64,
) -> Result<PairedTimings> {
    let limits = ControlLimits::for_body(plan.body_length);
    let ours = Tracker::new(TrackerConfig { ..cfg.tracker }, cfg.rig, cfg.render, TrackingMethod::Ours)?;
    let emission = Tracker::new(TrackerConfig::emission().with_noise(&cfg.noise), cfg.rig, cfg.render, TrackingMethod::Emission)?;
    let scene = Scene::new(plan);
    let truth = PlanTraversability::new(plan);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = task.start;
    let mut fs = ours.init(z, map, &scene.observe(&z, &cfg.rig, &cfg.render));
    let mut wp = plan_route(&truth, &z.position(), &task.target(), &cfg.plan)?;
    let mut out = PairedTimings::default();
    while out.track.len() < trials {
        let t_pipe = Instant::now();
        let u = match next_control(&fs.state, &mut wp, &limits, cfg.plan.arrival()) {
            ControlOutcome::Command(u) => u,
            ControlOutcome::Done => {
                // Turn around and head back to the start.
                wp = plan_route(&truth, &z.position(), &task.start.position(), &cfg.plan)?;
                continue;
            }
        };
        let to = step_dynamics(&z, &u, &cfg.noise, &mut rng);
        let p = resolve_with_edges(&scene.edges, &z.position(), &to.position(), 0.5 * plan.body_length);
        z = AgentState { x: p.x, y: p.y, heading: to.heading };
        let obs = scene.observe(&z, &cfg.rig, &cfg.render);

        let mut fs_emission = FilterState { reference: None, ..fs.clone() };
        let t_track = Instant::now();
        let o = ours.step(&mut fs, &u, &obs, map);
        let track = t_track.elapsed().as_secs_f64();
        let pipeline = t_pipe.elapsed().as_secs_f64();

        let t_em = Instant::now();
        emission_track_step(&emission, &mut fs_emission, &u, &obs, map);
        let em = t_em.elapsed().as_secs_f64();

        let t_r = Instant::now();
        std::hint::black_box(render_rgbd(map, &cfg.rig.camera_pose(&fs.state), &cfg.rig.intrinsics, &cfg.render));
        out.render.push(t_r.elapsed().as_secs_f64());
        out.track.push(track);
        out.emission.push(em);
        out.pipeline.push(pipeline);
        let _ = o;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavRow {
    pub env: String,
    pub task: usize,
    pub method: String,
    pub noise: String,
    pub success: bool,
    pub p_len: f64,
    pub l_len: f64,
    pub spl_term: f64,
    pub loc_rmse: f64,
    pub ori_rmse: f64,
    pub steps: usize,
    pub seconds_per_step: f64,
}

impl NavRow {
    pub fn new(env: &str, method: TrackingMethod, noise: &str, r: &NavResult, rec: &TrajectoryRecord) -> Self {
        let (loc, ori) = rmse(rec).unwrap_or((0.0, 0.0));
        Self {
            env: env.into(),
            task: r.task,
            method: method.name().into(),
            noise: noise.into(),
            success: r.success,
            p_len: r.path_length,
            l_len: r.optimal_length,
            spl_term: r.spl_term(),
            loc_rmse: loc,
            ori_rmse: ori,
            steps: r.steps,
            seconds_per_step: rec.mean_step_seconds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub traj_id: usize,
    pub seed: u64,
    pub loc_rmse_m: f64,
    pub ori_rmse_rad: f64,
    pub mean_step_seconds: f64,
}

/// Serialize rows with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_text_atomic(path, &to_csv(rows)?)
}

/// Sorted values and their cumulative fractions.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(k, x)| (x, (k + 1) as f64 / n)).collect()
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Top-down plot of the plan with true and estimated paths.
pub fn trajectory_svg(plan: &FloorPlan, rec: &TrajectoryRecord, task: &NavTask) -> String {
    let (lo, hi) = (plan.bbox_min(), plan.bbox_max());
    let scale = 600.0 / (hi - lo).max();
    let px = |p: Vec2| ((p.x - lo.x) * scale + 10.0, (hi.y - p.y) * scale + 10.0);
    let w = (hi.x - lo.x) * scale + 20.0;
    let h = (hi.y - lo.y) * scale + 20.0;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\">\n");
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for e in plan.edges() {
        let (a, b) = (px(e.a), px(e.b));
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>",
            a.0, a.1, b.0, b.1
        );
    }
    let path = |pts: Vec<Vec2>, colour: &str| {
        let d: Vec<String> = pts.into_iter().map(|p| px(p)).map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        format!("<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>\n", d.join(" "))
    };
    let start = task.start.position();
    s.push_str(&path(std::iter::once(start).chain(rec.steps.iter().map(|t| t.state_true.position())).collect(), PALETTE[0]));
    s.push_str(&path(std::iter::once(start).chain(rec.steps.iter().map(|t| t.state_est.position())).collect(), PALETTE[1]));
    for (p, c) in [(start, "green"), (task.target(), "orange")] {
        let (x, y) = px(p);
        let _ = writeln!(s, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"5\" fill=\"{c}\"/>");
    }
    s.push_str("</svg>\n");
    s
}

/// Step curves of empirical CDFs, one per series.
pub fn cdf_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let xmax = series.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0f64, f64::max).max(1e-9);
    let (w, h, m) = (480.0, 320.0, 40.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(s, "<text x=\"{m}\" y=\"20\" font-size=\"14\">{title}</text>");
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - m, w - m, h - m);
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>", h - m);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\">{xmax:.3}</text>", w - m - 20.0, h - m + 15.0);
    for (k, (name, v)) in series.iter().enumerate() {
        let mut pts = vec![format!("{m:.1},{:.1}", h - m)];
        for (x, f) in cdf(v) {
            let sx = m + x / xmax * (w - 2.0 * m);
            let sy = h - m - f * (h - 2.0 * m);
            pts.push(format!("{sx:.1},{sy:.1}"));
        }
        let c = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"2\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{c}\">{name}</text>", w - m - 80.0, m + 15.0 * k as f64);
    }
    s.push_str("</svg>\n");
    s
}

/// Horizontal bars with labels and values.
pub fn bar_svg(title: &str, bars: &[(String, f64)]) -> String {
    let vmax = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let (w, row) = (480.0, 28.0);
    let h = 40.0 + row * bars.len() as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(s, "<text x=\"10\" y=\"20\" font-size=\"14\">{title}</text>");
    for (k, (name, v)) in bars.iter().enumerate() {
        let y = 32.0 + row * k as f64;
        let len = v / vmax * (w - 260.0);
        let c = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, "<text x=\"10\" y=\"{:.1}\" font-size=\"12\">{name}</text>", y + 15.0);
        let _ = writeln!(s, "<rect x=\"170\" y=\"{y:.1}\" width=\"{len:.1}\" height=\"20\" fill=\"{c}\"/>");
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{v:.4}</text>", 175.0 + len, y + 15.0);
    }
    s.push_str("</svg>\n");
    s
}
