use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use voxnav::geometry::{CameraIntrinsics, CameraRig};
use voxnav::simulator::{NoiseConfig, NoisePreset};
use voxnav::tracking::TrackingMethod;

#[derive(Debug, Parser)]
#[command(name = "voxnav", version, about = "Navigation and pose tracking in learned voxel maps")]
pub struct Cli {
    /// Global seed; every random choice derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for independent episodes (overridden by VOXNAV_THREADS).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Replay the run recorded in a config.json snapshot.
    #[arg(long, conflicts_with = "seed")]
    pub from_config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

/// Everything needed to reproduce a run; written as `config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub seed: u64,
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a procedural multi-room floor plan.
    GenWorld(GenWorldArgs),
    /// Render ground-truth RGB-D frames from uniformly sampled free poses.
    Capture(CaptureArgs),
    /// Fit a voxel map to a posed dataset.
    Learn(LearnArgs),
    /// Tracking-only runs along ground-truth routes; writes RMSE tables.
    TrackEval(TrackEvalArgs),
    /// Closed-loop navigation tasks; writes results, SPL and plots.
    Navigate(NavigateArgs),
    /// Paired per-step timings of the trackers.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenWorldArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7.0)]
    pub width: f64,
    #[arg(long, default_value_t = 7.0)]
    pub depth: f64,
    #[arg(long, default_value_t = 3)]
    pub min_rooms: usize,
    #[arg(long, default_value_t = 5)]
    pub max_rooms: usize,
    /// JSON generator spec; its fields override the flags above.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Args, Serialize, Deserialize)]
pub struct RigArgs {
    #[arg(long, default_value_t = 128)]
    pub image_width: usize,
    #[arg(long, default_value_t = 96)]
    pub image_height: usize,
    /// Focal length in pixels.
    #[arg(long, default_value_t = 64.0)]
    pub focal: f64,
    /// Camera height above the floor in meters.
    #[arg(long, default_value_t = 0.5)]
    pub camera_height: f64,
}

impl RigArgs {
    pub fn rig(&self) -> voxnav::Result<CameraRig> {
        let (w, h) = (self.image_width, self.image_height);
        let k = CameraIntrinsics::new(self.focal, w as f64 / 2.0, h as f64 / 2.0, w, h)?;
        Ok(CameraRig::new(k, self.camera_height))
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CaptureArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub rig: RigArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LearnArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Floor plan whose bounds define the grid.
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    /// Voxel edge length in meters.
    #[arg(long, default_value_t = 0.1)]
    pub cell: f64,
    /// Write a checkpoint every this many steps.
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrackEvalArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub trajectories: usize,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value = "low")]
    pub noise: NoiseArg,
    #[arg(long, value_delimiter = ',', default_value = "ours,no-map,dynamics", value_parser = parse_method)]
    pub methods: Vec<TrackingMethod>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub rig: RigArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct NavigateArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub tasks: usize,
    #[arg(long, default_value = "low")]
    pub noise: NoiseArg,
    #[arg(long, default_value = "ours", value_parser = parse_method)]
    pub method: TrackingMethod,
    /// Trajectory plots to write, for the first tasks.
    #[arg(long, default_value_t = 10)]
    pub plots: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub rig: RigArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value = "low")]
    pub noise: NoiseArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub rig: RigArgs,
}

fn parse_method(s: &str) -> Result<TrackingMethod, String> {
    TrackingMethod::parse(s).ok_or_else(|| format!("unknown method {s:?} (expected ours, no-map, dynamics or emission)"))
}

/// `high`, `mid`, `low`, or `custom:σα,σs` with σα in degrees and σs in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseArg {
    Preset(NoisePreset),
    Custom { degrees: f64, speed: f64 },
}

impl NoiseArg {
    pub fn config(&self, body_length: f64) -> NoiseConfig {
        match *self {
            NoiseArg::Preset(p) => NoiseConfig::preset(p, body_length),
            NoiseArg::Custom { degrees, speed } => NoiseConfig { angular: degrees.to_radians(), speed, quantize: false },
        }
    }
}

impl FromStr for NoiseArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "high" => Ok(NoiseArg::Preset(NoisePreset::High)),
            "mid" => Ok(NoiseArg::Preset(NoisePreset::Mid)),
            "low" => Ok(NoiseArg::Preset(NoisePreset::Low)),
            _ => {
                let bad = || format!("invalid noise {s:?} (expected high, mid, low or custom:DEG,METERS)");
                let rest = s.strip_prefix("custom:").ok_or_else(bad)?;
                let (a, b) = rest.split_once(',').ok_or_else(bad)?;
                let degrees: f64 = a.trim().parse().map_err(|_| bad())?;
                let speed: f64 = b.trim().parse().map_err(|_| bad())?;
                if !(degrees >= 0.0 && speed >= 0.0 && degrees.is_finite() && speed.is_finite()) {
                    return Err(bad());
                }
                Ok(NoiseArg::Custom { degrees, speed })
            }
        }
    }
}

impl fmt::Display for NoiseArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseArg::Preset(NoisePreset::High) => write!(f, "high"),
            NoiseArg::Preset(NoisePreset::Mid) => write!(f, "mid"),
            NoiseArg::Preset(NoisePreset::Low) => write!(f, "low"),
            NoiseArg::Custom { degrees, speed } => write!(f, "custom:{degrees},{speed}"),
        }
    }
}

impl TryFrom<String> for NoiseArg {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<NoiseArg> for String {
    fn from(n: NoiseArg) -> String {
        n.to_string()
    }
}
