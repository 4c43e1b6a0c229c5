//! Per-step MAP state estimation.
//!
//! The current camera pose is parameterized as `P_pred ∘ exp(ξ)` around the
//! prediction from the dynamics. Each step minimizes
//!
//! ```text
//! Σ_k ‖x̂⁻[π(T p_k)] − x[π(p_k)]‖₁ + Σ_k |⟨p̂_k − T p_k, n̂_k⟩| + prior(ξ)
//! ```
//!
//! where `x̂⁻` is the image rendered at the previous estimate, `T` maps the
//! current camera frame into the previous one, and `(p̂_k, n̂_k)` come from
//! projective association. The emission tracker replaces both data terms by
//! the rendering likelihood of the current observation.

use std::time::Instant;

use nalgebra::{Matrix3x6, Vector6};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    backproject, compose_planar, project, relative_pose, se3_exp, se3_left_jacobian, AgentState, CameraIntrinsics, CameraRig, Control,
    Pose, Twist, Vec3,
};
use crate::map_learning::{adam_twist_step, AdamState};
use crate::renderer::{emission_objective, l1_sign, render_rgbd, Pixel, RenderConfig, RgbdImage};
use crate::simulator::{apply_dynamics, NoiseConfig, NoiseSample};
use crate::voxel_map::VoxelMap;

/// Noiseless mean of the dynamics.
pub fn predict_state(z: &AgentState, u: &Control) -> AgentState {
    apply_dynamics(z, u, &NoiseSample::default(), false)
}

/// Prior scales: planar dofs from the noise model, out-of-plane dofs pinned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorScales {
    /// Body-frame x and y, meters.
    pub translation: f64,
    /// Yaw, radians.
    pub yaw: f64,
    /// Body-frame z, meters.
    pub height: f64,
    /// Roll and pitch, radians.
    pub tilt: f64,
}

impl PriorScales {
    /// A zero noise scale pins the corresponding planar dofs to the prediction.
    pub fn from_noise(noise: &NoiseConfig) -> Self {
        Self { translation: noise.speed, yaw: noise.angular, height: 1e-3, tilt: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub opt_steps: usize,
    pub pixels_per_step: usize,
    pub lr_translation: f64,
    pub lr_rotation: f64,
    pub photometric_clip: f64,
    pub geometric_clip: f64,
    pub prior: PriorScales,
    /// Weight of the image terms; zero leaves only the prior.
    pub data_weight: f64,
    /// Seed of the fixed pixel schedule.
    pub schedule_seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            opt_steps: 100,
            pixels_per_step: 1000,
            lr_translation: 0.01,
            lr_rotation: 0.01,
            photometric_clip: 1.0,
            geometric_clip: 5.0,
            prior: PriorScales::from_noise(&NoiseConfig::preset(crate::simulator::NoisePreset::Mid, 0.2)),
            data_weight: 1.0,
            schedule_seed: 0,
        }
    }
}

impl TrackerConfig {
    /// Defaults of the emission-gradient tracker.
    pub fn emission() -> Self {
        Self { lr_translation: 0.001, lr_rotation: 0.002, ..Self::default() }
    }

    pub fn with_noise(self, noise: &NoiseConfig) -> Self {
        Self { prior: PriorScales::from_noise(noise), ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.prior;
        let pos = [self.lr_translation, self.lr_rotation, self.photometric_clip, self.geometric_clip, p.height, p.tilt];
        if self.opt_steps == 0 || self.pixels_per_step == 0 || !pos.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::Config("tracker settings must be positive".into()));
        }
        if !(p.translation >= 0.0 && p.yaw >= 0.0 && p.translation.is_finite() && p.yaw.is_finite()) {
            return Err(Error::Config("planar prior scales must be finite and non-negative".into()));
        }
        if !(self.data_weight >= 0.0) {
            return Err(Error::Config("data_weight must be non-negative".into()));
        }
        Ok(())
    }

    fn learning_rates(&self) -> [f64; 6] {
        let (t, r) = (self.lr_translation, self.lr_rotation);
        [t, t, t, r, r, r]
    }
}

/// The fixed per-iteration pixel indices, generated once.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSchedule {
    pub iterations: Vec<Vec<Pixel>>,
}

impl PixelSchedule {
    pub fn new(k: &CameraIntrinsics, iterations: usize, per_iteration: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = per_iteration.min(k.pixel_count());
        let iterations = (0..iterations)
            .map(|_| index::sample(&mut rng, k.pixel_count(), n).into_iter().map(|p| Pixel::from_index(p, k.width)).collect())
            .collect();
        Self { iterations }
    }
}

/// A rendered (or observed) reference frame with back-projected points and
/// normals in its camera frame.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub image: RgbdImage,
    pub points: Vec<Option<Vec3>>,
    pub normals: Vec<Option<Vec3>>,
}

impl Prediction {
    pub fn new(image: RgbdImage, max_range: f64) -> Self {
        let k = image.intrinsics;
        let points = (0..k.pixel_count())
            .map(|n| {
                let (i, j) = (n % k.width, n / k.width);
                let d = image.depth[n] as f64;
                if d >= max_range {
                    None
                } else {
                    backproject(i as f64, j as f64, d, &k)
                }
            })
            .collect::<Vec<_>>();
        let normals = normals_from_points(&points, &k);
        Self { image, points, normals }
    }
}

fn normals_from_points(points: &[Option<Vec3>], k: &CameraIntrinsics) -> Vec<Option<Vec3>> {
    let (w, h) = (k.width, k.height);
    (0..w * h)
        .map(|n| {
            let (i, j) = (n % w, n / w);
            if i == 0 || j == 0 || i + 1 == w || j + 1 == h {
                return None;
            }
            let p = points[n]?;
            let dx = points[n + 1]? - points[n - 1]?;
            let dy = points[n + w]? - points[n - w]?;
            let c = dx.cross(&dy);
            let norm = c.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return None;
            }
            let nrm = c / norm;
            Some(if nrm.dot(&p) > 0.0 { -nrm } else { nrm })
        })
        .collect()
}

/// Camera-frame normals of a depth image from central differences of
/// back-projected neighbours, facing the camera. Border pixels and pixels
/// next to depth at or beyond `max_range` are invalid.
pub fn depth_normals(depth: &[f32], k: &CameraIntrinsics, max_range: f64) -> Vec<Option<Vec3>> {
    let points: Vec<Option<Vec3>> = (0..k.pixel_count())
        .map(|n| {
            let d = depth[n] as f64;
            if d >= max_range {
                None
            } else {
                backproject((n % k.width) as f64, (n / k.width) as f64, d, k)
            }
        })
        .collect();
    normals_from_points(&points, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationEntry {
    pub pixel: Pixel,
    /// Observed point in the current camera frame.
    pub point: Vec3,
    /// Associated predicted point and normal in the reference camera frame.
    pub predicted: Vec3,
    pub normal: Vec3,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    pub entries: Vec<AssociationEntry>,
}

impl Association {
    pub fn valid_count(&self) -> usize {
        self.entries.iter().filter(|e| e.valid).count()
    }
}

/// Projective association of observed pixels with the reference frame under
/// `t` (current camera frame → reference camera frame). Pixels without valid
/// observed depth are skipped.
pub fn associate(prev: &Prediction, obs: &RgbdImage, t: &Pose, pixels: &[Pixel], max_range: f64) -> Association {
    let k = &obs.intrinsics;
    let w = prev.image.width();
    let mut entries = Vec::with_capacity(pixels.len());
    for &px in pixels {
        let (i, j) = (px.i as usize, px.j as usize);
        let d = obs.depth_at(i, j);
        if !(d < max_range) {
            continue;
        }
        let Some(point) = backproject(i as f64, j as f64, d, k) else { continue };
        let mut e = AssociationEntry { pixel: px, point, predicted: Vec3::zeros(), normal: Vec3::zeros(), valid: false };
        if let Some(uv) = project(&t.transform_point(&point), &prev.image.intrinsics) {
            let (u, v) = (uv.x.round(), uv.y.round());
            if u >= 0.0 && v >= 0.0 && (u as usize) < w && (v as usize) < prev.image.height() {
                let n = u as usize + w * v as usize;
                if let (Some(p), Some(nrm)) = (prev.points[n], prev.normals[n]) {
                    e.predicted = p;
                    e.normal = nrm;
                    e.valid = true;
                }
            }
        }
        entries.push(e);
    }
    Association { entries }
}

/// Quadratic prior on the body-frame twist `Ad_M ξ` of the camera twist ξ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarPrior {
    pub mount: Pose,
    pub scales: PriorScales,
}

impl PlanarPrior {
    /// Body-frame twist; the mount has no translation, so `Ad_M ξ = (R ρ, R ω)`.
    pub fn body_twist(&self, xi: &Twist) -> Twist {
        let r = &self.mount.rotation;
        Twist::new(r * xi.translation() + self.mount.translation.cross(&(r * xi.rotation())), r * xi.rotation())
    }

    fn scales(&self) -> [f64; 6] {
        let s = self.scales;
        [s.translation, s.translation, s.height, s.tilt, s.tilt, s.yaw]
    }

    /// Pinned dofs carry no penalty; [`PlanarPrior::pin`] keeps them at zero.
    fn weights(&self) -> [f64; 6] {
        self.scales().map(|v| if v > 0.0 { 1.0 / (v * v) } else { 0.0 })
    }

    /// Zero the body-frame components of ξ whose scale is zero.
    pub fn pin(&self, xi: &mut Twist) {
        let s = self.scales();
        if s.iter().all(|&v| v > 0.0) {
            return;
        }
        let mut b = self.body_twist(xi).0;
        for a in 0..6 {
            if s[a] == 0.0 {
                b[a] = 0.0;
            }
        }
        // Inverse of ξ_b = (R ρ + [t]× R ω, R ω).
        let r = &self.mount.rotation;
        let bw = Vec3::new(b[3], b[4], b[5]);
        let br = Vec3::new(b[0], b[1], b[2]) - self.mount.translation.cross(&bw);
        *xi = Twist::new(r.transpose() * br, r.transpose() * bw);
    }

    /// `½ Σ (ξ_b / σ)²` and its gradient with respect to ξ.
    pub fn evaluate(&self, xi: &Twist) -> (f64, Vector6<f64>) {
        let b = self.body_twist(xi).0;
        let w = self.weights();
        let mut value = 0.0;
        let mut gb = Vector6::zeros();
        for a in 0..6 {
            value += 0.5 * w[a] * b[a] * b[a];
            gb[a] = w[a] * b[a];
        }
        // ξ_b = A ξ with A = [[R, [t]×R], [0, R]]; ∂/∂ξ = Aᵀ ∂/∂ξ_b.
        let r = self.mount.rotation;
        let tr = crate::geometry::skew(&self.mount.translation) * r;
        let gr = Vec3::new(gb[0], gb[1], gb[2]);
        let gw = Vec3::new(gb[3], gb[4], gb[5]);
        let top = r.transpose() * gr;
        let bottom = tr.transpose() * gr + r.transpose() * gw;
        (value, Vector6::new(top.x, top.y, top.z, bottom.x, bottom.y, bottom.z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub gradient: Vector6<f64>,
    pub photometric: f64,
    pub geometric: f64,
    pub prior: f64,
    /// Pixels with a valid association.
    pub used: usize,
}

/// Tracking objective at one iterate: `t0` maps the predicted camera frame into the
/// reference frame, the current pose is `t0 ∘ exp(ξ)` relative to it.
pub fn tracking_objective(
    assoc: &Association,
    prev: &Prediction,
    obs: &RgbdImage,
    t0: &Pose,
    xi: &Twist,
    prior: &PlanarPrior,
    cfg: &TrackerConfig,
) -> Result<ObjectiveValue> {
    let used = assoc.valid_count();
    if used == 0 && cfg.data_weight > 0.0 {
        return Err(Error::TrackingFailure);
    }
    let k = prev.image.intrinsics;
    let delta = se3_exp(xi);
    let r0 = t0.rotation;
    let (w, h) = (k.width as f64, k.height as f64);
    let mut photometric = 0.0;
    let mut geometric = 0.0;
    let mut acc = Vector6::zeros();
    for e in assoc.entries.iter().filter(|e| e.valid) {
        let y = delta.transform_point(&e.point);
        let q = t0.transform_point(&y);
        let mut dl_dq = Vec3::zeros();

        let g = e.normal.dot(&(e.predicted - q));
        if g.abs() <= cfg.geometric_clip {
            geometric += g.abs();
            dl_dq -= e.normal * l1_sign(g);
        }

        if q.z > 0.0 {
            let u = k.focal * q.x / q.z + k.cx;
            let v = k.focal * q.y / q.z + k.cy;
            if u >= 0.0 && v >= 0.0 && u <= w - 1.0 && v <= h - 1.0 {
                let (pred, grad) = prev.image.rgb_bilinear(u, v);
                let seen = obs.rgb_at(e.pixel.i as usize, e.pixel.j as usize);
                let mut cost = 0.0;
                let mut duv = [0.0; 2];
                for c in 0..3 {
                    let r = pred[c] - seen[c];
                    cost += r.abs();
                    duv[0] += l1_sign(r) * grad[c][0];
                    duv[1] += l1_sign(r) * grad[c][1];
                }
                if cost <= cfg.photometric_clip {
                    photometric += cost;
                    let iz = 1.0 / q.z;
                    let fz = k.focal * iz;
                    // ∂(u, v)/∂q
                    dl_dq += Vec3::new(duv[0] * fz, duv[1] * fz, -(duv[0] * q.x + duv[1] * q.y) * fz * iz);
                }
            }
        }
        let gcam = r0.transpose() * dl_dq;
        let rot = y.cross(&gcam);
        acc += Vector6::new(gcam.x, gcam.y, gcam.z, rot.x, rot.y, rot.z);
    }
    let jac = se3_left_jacobian(xi);
    let data_grad = jac.transpose() * acc * cfg.data_weight;
    let (pv, pg) = prior.evaluate(xi);
    Ok(ObjectiveValue {
        value: cfg.data_weight * (photometric + geometric) + pv,
        gradient: data_grad + pg,
        photometric,
        geometric,
        prior: pv,
        used,
    })
}

/// Which estimator drives the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingMethod {
    /// Photometric and point-to-plane alignment against the map's rendering.
    Ours,
    /// The same alignment against the previous raw observation.
    NoMap,
    /// Integrate controls only.
    Dynamics,
    /// Gradient descent through the renderer's likelihood.
    Emission,
}

impl TrackingMethod {
    pub const ALL: [TrackingMethod; 4] = [Self::Ours, Self::NoMap, Self::Dynamics, Self::Emission];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ours => "ours",
            Self::NoMap => "no-map",
            Self::Dynamics => "dynamics",
            Self::Emission => "emission",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct FilterState {
    /// MAP estimate of the last step.
    pub state: AgentState,
    /// Reference frame for the next alignment, taken at `state`.
    pub reference: Option<Prediction>,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: AgentState,
    /// No valid association: the estimate is the prediction.
    pub failed: bool,
    /// Wall time of the pose optimization.
    pub optimize_seconds: f64,
    /// Wall time of refreshing the reference frame.
    pub render_seconds: f64,
}

/// A configured filter for one agent.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub rig: CameraRig,
    pub render: RenderConfig,
    pub method: TrackingMethod,
    schedule: PixelSchedule,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, rig: CameraRig, render: RenderConfig, method: TrackingMethod) -> Result<Self> {
        cfg.validate()?;
        rig.intrinsics.validate()?;
        let schedule = PixelSchedule::new(&rig.intrinsics, cfg.opt_steps, cfg.pixels_per_step, cfg.schedule_seed);
        Ok(Self { cfg, rig, render, method, schedule })
    }

    pub fn schedule(&self) -> &PixelSchedule {
        &self.schedule
    }

    /// Replace the pixel schedule, e.g. with a permuted copy.
    pub fn with_schedule(mut self, schedule: PixelSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    fn prior(&self) -> PlanarPrior {
        PlanarPrior { mount: self.rig.mount, scales: self.cfg.prior }
    }

    /// Filter state at a known start.
    pub fn init(&self, start: AgentState, map: &VoxelMap, first: &RgbdImage) -> FilterState {
        let reference = match self.method {
            TrackingMethod::Ours => Some(self.render_reference(&start, map)),
            TrackingMethod::NoMap => Some(Prediction::new(first.clone(), self.render.max_range())),
            TrackingMethod::Dynamics | TrackingMethod::Emission => None,
        };
        FilterState { state: start, reference, step: 0 }
    }

    fn render_reference(&self, state: &AgentState, map: &VoxelMap) -> Prediction {
        let pose = self.rig.camera_pose(state);
        Prediction::new(render_rgbd(map, &pose, &self.rig.intrinsics, &self.render), self.render.max_range())
    }

    /// Planar state of the camera pose `P_pred ∘ exp(ξ)`.
    pub fn planar_update(&self, pred: &AgentState, xi: &Twist) -> AgentState {
        let d = se3_exp(&self.prior().body_twist(xi));
        let r = &d.rotation;
        let dtheta = if r[(1, 0)] == 0.0 && r[(0, 0)] == 1.0 { 0.0 } else { r[(1, 0)].atan2(r[(0, 0)]) };
        compose_planar(pred, d.translation.x, d.translation.y, dtheta)
    }

    /// Optimize ξ for the alignment objective against `reference` viewed from
    /// `reference_state`.
    pub fn align(&self, reference: &Prediction, reference_state: &AgentState, pred: &AgentState, obs: &RgbdImage) -> Result<Twist> {
        let pose_ref = self.rig.camera_pose(reference_state);
        let pose_pred = self.rig.camera_pose(pred);
        let t0 = relative_pose(&pose_ref, &pose_pred);
        let prior = self.prior();
        let lr = self.cfg.learning_rates();
        let mut adam = AdamState::new(6);
        let mut xi = Twist::zero();
        let max = self.render.max_range();
        let mut any_valid = false;
        for pixels in &self.schedule.iterations {
            let t = t0.compose(&se3_exp(&xi));
            let assoc = associate(reference, obs, &t, pixels, max);
            let obj = match tracking_objective(&assoc, reference, obs, &t0, &xi, &prior, &self.cfg) {
                Ok(o) => o,
                Err(Error::TrackingFailure) => continue,
                Err(e) => return Err(e),
            };
            any_valid |= obj.used > 0;
            let g = obj.gradient;
            adam_twist_step(&mut adam, &mut xi.0, &g, &lr)?;
            prior.pin(&mut xi);
        }
        if !any_valid && self.cfg.data_weight > 0.0 {
            return Err(Error::TrackingFailure);
        }
        Ok(xi)
    }

    /// Optimize ξ by descending the rendering negative log-likelihood.
    pub fn align_emission(&self, map: &VoxelMap, pred: &AgentState, obs: &RgbdImage) -> Result<Twist> {
        let base = self.rig.camera_pose(pred);
        let prior = self.prior();
        let lr = self.cfg.learning_rates();
        let mut adam = AdamState::new(6);
        let mut xi = Twist::zero();
        let mut any_hit = false;
        for pixels in &self.schedule.iterations {
            let (_, g, hits) = emission_objective(obs, &base, &xi, map, &self.render, pixels, &map.scales);
            any_hit |= hits > 0;
            let (_, pg) = prior.evaluate(&xi);
            let grad = g * self.cfg.data_weight + pg;
            adam_twist_step(&mut adam, &mut xi.0, &grad, &lr)?;
            prior.pin(&mut xi);
        }
        if !any_hit && self.cfg.data_weight > 0.0 {
            return Err(Error::TrackingFailure);
        }
        Ok(xi)
    }

    /// One filter step given the control that led to `obs`.
    pub fn step(&self, fs: &mut FilterState, u: &Control, obs: &RgbdImage, map: &VoxelMap) -> StepOutcome {
        let t0 = Instant::now();
        let pred = predict_state(&fs.state, u);
        let result = match self.method {
            TrackingMethod::Dynamics => Ok(Twist::zero()),
            TrackingMethod::Ours | TrackingMethod::NoMap => match &fs.reference {
                Some(r) => self.align(r, &fs.state, &pred, obs),
                None => Err(Error::TrackingFailure),
            },
            TrackingMethod::Emission => self.align_emission(map, &pred, obs),
        };
        let (state, failed) = match result {
            Ok(xi) => (self.planar_update(&pred, &xi), false),
            Err(_) => (pred, true),
        };
        let optimize_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        fs.state = state;
        fs.step += 1;
        fs.reference = match self.method {
            TrackingMethod::Ours => Some(self.render_reference(&state, map)),
            TrackingMethod::NoMap => Some(Prediction::new(obs.clone(), self.render.max_range())),
            _ => None,
        };
        StepOutcome { state, failed, optimize_seconds, render_seconds: t1.elapsed().as_secs_f64() }
    }
}

/// Photometric/point-to-plane filter step.
pub fn track_step(tracker: &Tracker, fs: &mut FilterState, u: &Control, obs: &RgbdImage, map: &VoxelMap) -> StepOutcome {
    tracker.step(fs, u, obs, map)
}

/// Emission-gradient filter step: the tracker's configuration with the
/// rendering likelihood as data term.
pub fn emission_track_step(tracker: &Tracker, fs: &mut FilterState, u: &Control, obs: &RgbdImage, map: &VoxelMap) -> StepOutcome {
    let t0 = Instant::now();
    let pred = predict_state(&fs.state, u);
    let (state, failed) = match tracker.align_emission(map, &pred, obs) {
        Ok(xi) => (tracker.planar_update(&pred, &xi), false),
        Err(_) => (pred, true),
    };
    fs.state = state;
    fs.step += 1;
    StepOutcome { state, failed, optimize_seconds: t0.elapsed().as_secs_f64(), render_seconds: 0.0 }
}

/// `∂(T p)/∂ξ` at ξ for `T = t0 ∘ exp(ξ)`, for tests and diagnostics.
pub fn point_jacobian(t0: &Pose, xi: &Twist, p: &Vec3) -> Matrix3x6<f64> {
    let y = se3_exp(xi).transform_point(p);
    let mut a = Matrix3x6::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-crate::geometry::skew(&y)));
    t0.rotation * a * se3_left_jacobian(xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Vec2};
    use crate::simulator::{FloorPlan, Scene, Wall};
    use rand::{Rng, SeedableRng};

    fn rig() -> CameraRig {
        CameraRig::new(CameraIntrinsics::new(40.0, 32.0, 24.0, 64, 48).unwrap(), 0.5)
    }

    /// Room with finely tiled, colourful walls.
    fn textured_room() -> FloorPlan {
        let c = [[0.0, 0.0], [4.0, 0.0], [4.0, 3.0], [0.0, 3.0]];
        let mut walls = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 0..4 {
            let (a, b) = (Vec2::new(c[k][0], c[k][1]), Vec2::new(c[(k + 1) % 4][0], c[(k + 1) % 4][1]));
            let n = ((b - a).norm() / 0.25).round() as usize;
            for t in 0..n {
                let p = a + (b - a) * (t as f64 / n as f64);
                let q = a + (b - a) * ((t + 1) as f64 / n as f64);
                walls.push(Wall {
                    a: [p.x, p.y],
                    b: [q.x, q.y],
                    height: 1.0,
                    rgb: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
                });
            }
        }
        FloorPlan { body_length: 0.2, bbox: [[0.0, 0.0], [4.0, 3.0]], walls, obstacles: vec![] }
    }

    fn observe(plan: &FloorPlan, s: &AgentState) -> RgbdImage {
        Scene::new(plan).observe(s, &rig(), &RenderConfig::default())
    }

    #[test]
    fn prediction_examples() {
        let s = AgentState::new(1.0, 2.0, 0.5);
        assert_eq!(predict_state(&s, &Control::default()), s);
        let mut z = AgentState::new(0.0, 0.0, 0.0);
        z = predict_state(&z, &Control { angular_velocity: std::f64::consts::FRAC_PI_2, move_direction: 0.0, speed: 0.0 });
        z = predict_state(&z, &Control { angular_velocity: 0.0, move_direction: z.heading, speed: 0.5 });
        assert!((z.x).abs() < 1e-15 && (z.y - 0.5).abs() < 1e-15);
        let u = Control { angular_velocity: 0.05, move_direction: 0.5, speed: 0.1 };
        let exact = crate::simulator::step_dynamics(&s, &u, &NoiseConfig::none(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(predict_state(&s, &u), exact);
    }

    #[test]
    fn fronto_parallel_normals_and_invalid_pixels() {
        let k = CameraIntrinsics::new(10.0, 5.0, 5.0, 11, 11).unwrap();
        let mut depth = vec![2.0f32; 121];
        depth[60] = 20.0;
        let n = depth_normals(&depth, &k, 20.0);
        assert!(n[0].is_none());
        let c = n[12].unwrap();
        assert!((c - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
        assert!(n[60].is_none() && n[61].is_none() && n[49].is_none());
    }

    #[test]
    fn slanted_plane_normals() {
        let k = CameraIntrinsics::new(20.0, 10.0, 10.0, 21, 21).unwrap();
        // Plane through (0,0,2) with normal (1, 0, -1)/√2: z = 2 + x.
        let truth = Vec3::new(1.0, 0.0, -1.0).normalize();
        let mut depth = vec![0f32; 441];
        for jj in 0..21 {
            for ii in 0..21 {
                let r = k.unproject_unit_depth(ii as f64, jj as f64);
                depth[ii + 21 * jj] = (2.0 / (1.0 - r.x)) as f32;
            }
        }
        for n in depth_normals(&depth, &k, 20.0).into_iter().flatten() {
            assert!(n.dot(&truth).clamp(-1.0, 1.0).acos() < 1f64.to_radians());
        }
    }

    #[test]
    fn identity_association_has_zero_residual() {
        let plan = textured_room();
        let s = AgentState::new(1.0, 1.5, 0.2);
        let obs = observe(&plan, &s);
        let prev = Prediction::new(obs.clone(), 20.0);
        let sched = PixelSchedule::new(&obs.intrinsics, 1, 500, 3);
        let assoc = associate(&prev, &obs, &Pose::identity(), &sched.iterations[0], 20.0);
        assert!(assoc.valid_count() > 300);
        for e in assoc.entries.iter().filter(|e| e.valid) {
            assert!((e.predicted - e.point).norm() < 1e-6);
        }
        let prior = PlanarPrior { mount: rig().mount, scales: TrackerConfig::default().prior };
        let v = tracking_objective(&assoc, &prev, &obs, &Pose::identity(), &Twist::zero(), &prior, &TrackerConfig::default()).unwrap();
        assert!(v.photometric < 1e-5 && v.geometric < 1e-5, "{v:?}");
        assert_eq!(v.prior, 0.0);
    }

    #[test]
    fn translation_toward_wall_gives_residual_d() {
        let k = CameraIntrinsics::new(10.0, 5.0, 5.0, 11, 11).unwrap();
        let ref_img = RgbdImage { intrinsics: k, rgb: vec![0.5; 363], depth: vec![2.0; 121] };
        let obs = RgbdImage { intrinsics: k, rgb: vec![0.5; 363], depth: vec![1.8; 121] };
        let prev = Prediction::new(ref_img, 20.0);
        let t = Pose::from_translation(Vec3::new(0.0, 0.0, 0.2));
        let pixels = vec![Pixel::new(5, 5), Pixel::new(4, 6)];
        let assoc = associate(&prev, &obs, &t, &pixels, 20.0);
        let prior = PlanarPrior { mount: Pose::identity(), scales: TrackerConfig::default().prior };
        // Evaluate at T = t0 directly.
        let v = tracking_objective(&assoc, &prev, &obs, &t, &Twist::zero(), &prior, &TrackerConfig::default()).unwrap();
        assert!(v.geometric < 1e-5, "{}", v.geometric);
        let v = tracking_objective(&assoc, &prev, &obs, &Pose::identity(), &Twist::zero(), &prior, &TrackerConfig::default()).unwrap();
        assert!((v.geometric - 2.0 * 0.2).abs() < 1e-6, "{}", v.geometric);
        // Out of frame.
        let far = Pose::from_translation(Vec3::new(10.0, 0.0, 0.0));
        assert_eq!(associate(&prev, &obs, &far, &pixels, 20.0).valid_count(), 0);
    }

    #[test]
    fn in_plane_translation_has_zero_geometric_term() {
        let k = CameraIntrinsics::new(10.0, 5.0, 5.0, 11, 11).unwrap();
        let ref_img = RgbdImage { intrinsics: k, rgb: vec![0.5; 363], depth: vec![2.0; 121] };
        let prev = Prediction::new(ref_img.clone(), 20.0);
        let pixels: Vec<Pixel> = (2..9).map(|i| Pixel::new(i, i)).collect();
        let assoc = associate(&prev, &ref_img, &Pose::identity(), &pixels, 20.0);
        let prior = PlanarPrior { mount: Pose::identity(), scales: TrackerConfig::default().prior };
        let slide = Pose::from_translation(Vec3::new(0.07, -0.03, 0.0));
        let v = tracking_objective(&assoc, &prev, &ref_img, &slide, &Twist::zero(), &prior, &TrackerConfig::default()).unwrap();
        assert!(v.geometric.abs() < 1e-12);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let plan = textured_room();
        let r = rig();
        let cfg = TrackerConfig::default();
        let prior = PlanarPrior { mount: r.mount, scales: cfg.prior };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let s_ref = AgentState::new(rng.random_range(0.8..1.5), rng.random_range(1.0..2.0), rng.random_range(-0.5..0.5));
            let s_cur = AgentState::new(s_ref.x + 0.05, s_ref.y - 0.03, s_ref.heading + 0.03);
            let prev = Prediction::new(observe(&plan, &s_ref), 20.0);
            let obs = observe(&plan, &s_cur);
            let t0 = relative_pose(&r.camera_pose(&s_ref), &r.camera_pose(&s_cur));
            let xi = Twist::new(
                Vec3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)),
                Vec3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)),
            );
            let sched = PixelSchedule::new(&obs.intrinsics, 1, 400, rng.random());
            let assoc = associate(&prev, &obs, &t0.compose(&se3_exp(&xi)), &sched.iterations[0], 20.0);
            let f = |x: &Twist| tracking_objective(&assoc, &prev, &obs, &t0, x, &prior, &cfg).unwrap().value;
            let an = tracking_objective(&assoc, &prev, &obs, &t0, &xi, &prior, &cfg).unwrap().gradient;
            let h = 1e-6;
            let mut fd = Vector6::zeros();
            for a in 0..6 {
                let (mut p, mut m) = (xi, xi);
                p.0[a] += h;
                m.0[a] -= h;
                fd[a] = (f(&p) - f(&m)) / (2.0 * h);
            }
            worst = worst.max((an - fd).norm() / fd.norm());
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn zero_scales_pin_planar_dofs() {
        let prior = PlanarPrior { mount: rig().mount, scales: PriorScales { translation: 0.0, yaw: 0.0, height: 1e-3, tilt: 1e-3 } };
        let mut xi = Twist::new(Vec3::new(0.01, -0.02, 0.03), Vec3::new(0.001, 0.02, -0.004));
        prior.pin(&mut xi);
        let b = prior.body_twist(&xi).0;
        assert!(b[0].abs() < 1e-15 && b[1].abs() < 1e-15 && b[5].abs() < 1e-15);
        assert!((b[2].abs() - 0.02).abs() < 1e-12, "{b:?}");
        let s = AgentState::new(0.3, 0.2, 0.1);
        let tracker =
            Tracker::new(TrackerConfig::default().with_noise(&NoiseConfig::none()), rig(), RenderConfig::default(), TrackingMethod::NoMap)
                .unwrap();
        // The remaining tilt couples into the plane only at second order.
        let moved = tracker.planar_update(&s, &xi);
        assert!((moved.position() - s.position()).norm() < 1e-4 && (moved.heading - s.heading).abs() < 1e-5);
    }

    #[test]
    fn prior_gradient_and_mode() {
        let prior = PlanarPrior { mount: rig().mount, scales: PriorScales { translation: 0.03, yaw: 0.1, height: 1e-3, tilt: 1e-3 } };
        let (v, g) = prior.evaluate(&Twist::zero());
        assert_eq!((v, g), (0.0, Vector6::zeros()));
        let xi = Twist::new(Vec3::new(0.01, -0.002, 0.03), Vec3::new(0.001, 0.02, -0.0005));
        let (_, g) = prior.evaluate(&xi);
        let h = 1e-7;
        for a in 0..6 {
            let (mut p, mut m) = (xi, xi);
            p.0[a] += h;
            m.0[a] -= h;
            let fd = (prior.evaluate(&p).0 - prior.evaluate(&m).0) / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-4 * fd.abs().max(1.0), "{a}: {fd} vs {}", g[a]);
        }
        // Optical z maps to body x: forward motion is a planar dof.
        let b = prior.body_twist(&Twist::new(Vec3::new(0.0, 0.0, 0.1), Vec3::zeros()));
        assert!((b.0[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn data_weight_zero_returns_prediction_exactly() {
        let plan = textured_room();
        let cfg = TrackerConfig { data_weight: 0.0, opt_steps: 10, ..Default::default() };
        let tracker = Tracker::new(cfg, rig(), RenderConfig::default(), TrackingMethod::NoMap).unwrap();
        let s0 = AgentState::new(1.0, 1.5, 0.0);
        let mut fs = tracker.init(
            s0,
            &VoxelMap::new(crate::voxel_map::GridGeometry::new([2, 2, 2], Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)).unwrap()),
            &observe(&plan, &s0),
        );
        let u = Control { angular_velocity: 0.0, move_direction: 0.0, speed: 0.1 };
        let obs = observe(&plan, &AgentState::new(1.12, 1.5, 0.01));
        let dummy = VoxelMap::new(crate::voxel_map::GridGeometry::new([2, 2, 2], Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)).unwrap());
        let out = tracker.step(&mut fs, &u, &obs, &dummy);
        assert_eq!(out.state, predict_state(&s0, &u));
    }

    #[test]
    fn no_map_alignment_recovers_offset() {
        let plan = textured_room();
        let tracker = Tracker::new(TrackerConfig::default(), rig(), RenderConfig::default(), TrackingMethod::NoMap).unwrap();
        let s0 = AgentState::new(1.0, 1.5, 0.1);
        let reference = Prediction::new(observe(&plan, &s0), 20.0);
        let truth = AgentState::new(1.15, 1.52, 0.13);
        let pred = AgentState::new(1.10, 1.5, 0.13 - 2f64.to_radians());
        let xi = tracker.align(&reference, &s0, &pred, &observe(&plan, &truth)).unwrap();
        let est = tracker.planar_update(&pred, &xi);
        let err = (est.position() - truth.position()).norm();
        assert!(err < 0.02, "error {err} m, est {est:?}");
        assert!((est.heading - truth.heading).abs() < 1f64.to_radians());
    }

    #[test]
    fn featureless_view_falls_back_to_prediction() {
        let k = rig().intrinsics;
        let blank = RgbdImage { intrinsics: k, rgb: vec![0.5; 3 * k.pixel_count()], depth: vec![20.0; k.pixel_count()] };
        let tracker =
            Tracker::new(TrackerConfig { opt_steps: 5, ..Default::default() }, rig(), RenderConfig::default(), TrackingMethod::NoMap)
                .unwrap();
        let dummy = VoxelMap::new(crate::voxel_map::GridGeometry::new([2, 2, 2], Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)).unwrap());
        let s0 = AgentState::new(0.0, 0.0, 0.0);
        let mut fs = tracker.init(s0, &dummy, &blank);
        let u = Control { angular_velocity: 0.1, move_direction: 0.0, speed: 0.0 };
        let out = tracker.step(&mut fs, &u, &blank, &dummy);
        assert!(out.failed);
        assert_eq!(out.state, predict_state(&s0, &u));
    }

    #[test]
    fn schedule_is_fixed_and_without_replacement() {
        let k = rig().intrinsics;
        let a = PixelSchedule::new(&k, 100, 1000, 7);
        assert_eq!(a, PixelSchedule::new(&k, 100, 1000, 7));
        assert_eq!(a.iterations.len(), 100);
        let mut it = a.iterations[3].clone();
        it.sort();
        it.dedup();
        assert_eq!(it.len(), 1000);
    }

    #[test]
    fn point_jacobian_matches_finite_differences() {
        let t0 = se3_exp(&Twist::new(Vec3::new(0.3, -0.1, 0.2), Vec3::new(0.1, 0.4, -0.2)));
        let xi = Twist::new(Vec3::new(0.05, 0.02, -0.03), Vec3::new(-0.1, 0.2, 0.05));
        let p = Vec3::new(0.4, -0.3, 2.0);
        let j = point_jacobian(&t0, &xi, &p);
        let f = |x: &Twist| t0.compose(&se3_exp(x)).transform_point(&p);
        for a in 0..6 {
            let (mut pp, mut mm) = (xi, xi);
            pp.0[a] += 1e-6;
            mm.0[a] -= 1e-6;
            let fd = (f(&pp) - f(&mm)) / 2e-6;
            assert!((fd - j.column(a)).norm() < 1e-8);
        }
    }
}
