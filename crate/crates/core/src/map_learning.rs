//! Offline map fitting from posed RGB-D images.
//!
//! The negative log-likelihood of Monte-Carlo batches of pixels is minimized
//! over the occupancy grid, colour grid and depth scale σ2 (σ1 = σ2/5) with
//! Adam and analytic gradients.

use nalgebra::Vector6;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::renderer::{depth_ray, pixel_emission, Observation, Pixel, PixelEmission, RenderConfig, RgbdImage};
use crate::voxel_map::{decode_map, encode_map, EmissionScales, GridGeometry, VoxelMap, INITIAL_DEPTH_SCALE};

#[derive(Debug, Clone)]
pub struct Frame {
    pub image: RgbdImage,
    pub pose: Pose,
}

/// Images with known camera-to-world poses, all sharing one set of intrinsics.
#[derive(Debug, Clone)]
pub struct PosedDataset {
    frames: Vec<Frame>,
}

impl PosedDataset {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptyDataset)?;
        let k = first.image.intrinsics;
        for (n, f) in frames.iter().enumerate() {
            if f.image.intrinsics != k {
                return Err(Error::Dataset(format!("frame {n} has different intrinsics")));
            }
            if !f.pose.rotation.iter().chain(f.pose.translation.iter()).all(|v| v.is_finite()) {
                return Err(Error::Dataset(format!("frame {n} has a non-finite pose")));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.frames[0].image.intrinsics
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_images: usize,
    pub pixels_per_image: usize,
    /// Adam learning rate of σ2.
    pub scale_lr: f64,
    pub seed: u64,
    pub initial_scale: f64,
    /// σ2 is not allowed below this.
    pub min_scale: f64,
    /// Occupancy starts uniform in `initial_occupancy ± initial_jitter`.
    pub initial_occupancy: f64,
    pub initial_jitter: f64,
    /// Let the colour residual move the surface through the crossing
    /// location. This is the exact gradient, but on finely textured scenes it
    /// drags occupancy into free space; off, occupancy follows depth only and
    /// colour is fitted at the crossing.
    pub colour_shapes_occupancy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            learning_rate: 0.05,
            batch_images: 25,
            pixels_per_image: 200,
            scale_lr: 0.01,
            seed: 0,
            initial_scale: INITIAL_DEPTH_SCALE,
            min_scale: 1e-3,
            initial_occupancy: 0.45,
            initial_jitter: 0.1,
            colour_shapes_occupancy: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("scale_lr", self.scale_lr),
            ("initial_scale", self.initial_scale),
            ("min_scale", self.min_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.steps == 0 || self.batch_images == 0 || self.pixels_per_image == 0 {
            return Err(Error::Config("steps, batch_images and pixels_per_image must be positive".into()));
        }
        if !(self.initial_jitter >= 0.0) {
            return Err(Error::Config("initial_jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// One Monte-Carlo sample: a pixel of a dataset image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub image: usize,
    pub pixel: Pixel,
}

/// Draw `batch_images` distinct images and `pixels_per_image` distinct pixels
/// in each. Depends only on `(seed, step)`.
pub fn sample_batch(dataset: &PosedDataset, cfg: &TrainConfig, step: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let k = dataset.intrinsics();
    let n_img = cfg.batch_images.min(dataset.len());
    let n_px = cfg.pixels_per_image.min(k.pixel_count());
    let mut out = Vec::with_capacity(n_img * n_px);
    for image in index::sample(&mut rng, dataset.len(), n_img) {
        for p in index::sample(&mut rng, k.pixel_count(), n_px) {
            out.push(Sample { image, pixel: Pixel::from_index(p, k.width) });
        }
    }
    out
}

/// Every pixel of every image.
pub fn full_batch(dataset: &PosedDataset) -> Vec<Sample> {
    let k = dataset.intrinsics();
    (0..dataset.len()).flat_map(|image| (0..k.pixel_count()).map(move |p| Sample { image, pixel: Pixel::from_index(p, k.width) })).collect()
}

fn emissions(map: &VoxelMap, dataset: &PosedDataset, batch: &[Sample], cfg: &RenderConfig) -> Vec<PixelEmission> {
    let k = dataset.intrinsics();
    batch
        .par_iter()
        .map(|s| {
            let f = &dataset.frames[s.image];
            let (i, j) = (s.pixel.i as usize, s.pixel.j as usize);
            let ray = depth_ray(&f.pose, &k, i as f64, j as f64);
            let obs = Observation { rgb: f.image.rgb_at(i, j), depth: f.image.depth_at(i, j) };
            pixel_emission(map, &ray, cfg, &map.scales, &obs)
        })
        .collect()
}

/// Negative log-likelihood of the batch under the map's current scales.
pub fn minibatch_loss(map: &VoxelMap, dataset: &PosedDataset, batch: &[Sample], cfg: &RenderConfig) -> f64 {
    emissions(map, dataset, batch, cfg).iter().map(|e| e.neg_log_lik).sum()
}

/// Gradient entries sorted by parameter index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseGrad {
    pub fn get(&self, index: usize) -> f64 {
        match self.indices.binary_search(&index) {
            Ok(k) => self.values[k],
            Err(_) => 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn from_dense(dense: &[f64], touched: &[bool]) -> Self {
        let mut g = SparseGrad::default();
        for (i, (&v, &t)) in dense.iter().zip(touched).enumerate() {
            if t {
                g.indices.push(i);
                g.values.push(v);
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: f64,
    /// Indexed like `VoxelMap::occ`.
    pub occ: SparseGrad,
    /// Indexed like `VoxelMap::col`.
    pub col: SparseGrad,
    /// ∂loss/∂σ2 under the tying rule.
    pub scale: f64,
}

/// Dense gradient buffers with a record of which entries a ray touched.
#[derive(Debug, Clone)]
struct DenseGrad {
    occ: Vec<f64>,
    col: Vec<f64>,
    occ_touched: Vec<bool>,
    col_touched: Vec<bool>,
}

impl DenseGrad {
    fn new(n: usize) -> Self {
        Self { occ: vec![0.0; n], col: vec![0.0; 3 * n], occ_touched: vec![false; n], col_touched: vec![false; 3 * n] }
    }

    fn clear(&mut self) {
        self.occ.fill(0.0);
        self.col.fill(0.0);
        self.occ_touched.fill(false);
        self.col_touched.fill(false);
    }

    /// Sequential, fixed-order reduction; returns (loss, ∂/∂σ2). With
    /// `exact` false the occupancy sees only the depth part of ∂L/∂k*.
    fn accumulate(&mut self, em: &[PixelEmission], exact: bool) -> (f64, f64) {
        let mut loss = 0.0;
        let mut scale = 0.0;
        for e in em {
            loss += e.neg_log_lik;
            scale += e.dsigma;
            let Some(h) = e.hit else { continue };
            let dl_dk = if exact { h.dl_dk } else { h.dl_dk_depth };
            let dfm = dl_dk * h.dk_dfm;
            let dfp = dl_dk * h.dk_dfp;
            for (&(idx, w), df) in h.occ_minus.cells.iter().zip([dfm; 8]).chain(h.occ_plus.cells.iter().zip([dfp; 8])) {
                if w != 0.0 {
                    self.occ[idx] += w * df;
                    self.occ_touched[idx] = true;
                }
            }
            for &(idx, w) in &h.col_cells {
                if w == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    self.col[3 * idx + c] += w * h.dl_dcol[c];
                    self.col_touched[3 * idx + c] = true;
                }
            }
        }
        (loss, scale)
    }
}

/// Loss and analytic gradients of a batch.
pub fn loss_gradients(map: &VoxelMap, dataset: &PosedDataset, batch: &[Sample], cfg: &RenderConfig) -> LossGradients {
    let em = emissions(map, dataset, batch, cfg);
    let mut dense = DenseGrad::new(map.geometry.len());
    let (loss, scale) = dense.accumulate(&em, true);
    LossGradients {
        loss,
        occ: SparseGrad::from_dense(&dense.occ, &dense.occ_touched),
        col: SparseGrad::from_dense(&dense.col, &dense.col_touched),
        scale,
    }
}

/// Parameters Adam can update in place.
pub trait AdamParam: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl AdamParam for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl AdamParam for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn check(&self, params: usize, grads: usize) -> Result<()> {
        if params != self.m.len() {
            return Err(Error::ShapeMismatch { expected: self.m.len(), found: params });
        }
        if grads != self.m.len() {
            return Err(Error::ShapeMismatch { expected: self.m.len(), found: grads });
        }
        Ok(())
    }

    /// One bias-corrected Adam step with a shared learning rate.
    pub fn step<P: AdamParam>(&mut self, params: &mut [P], grads: &[f64], lr: f64) -> Result<()> {
        self.check(params.len(), grads.len())?;
        let (c1, c2) = self.advance();
        for i in 0..params.len() {
            params[i] = P::from_f64(params[i].to_f64() - lr * self.update(i, grads[i], c1, c2));
        }
        Ok(())
    }

    /// As [`AdamState::step`] with one learning rate per parameter.
    pub fn step_per_element<P: AdamParam>(&mut self, params: &mut [P], grads: &[f64], lr: &[f64]) -> Result<()> {
        self.check(params.len(), grads.len())?;
        if lr.len() != params.len() {
            return Err(Error::ShapeMismatch { expected: params.len(), found: lr.len() });
        }
        let (c1, c2) = self.advance();
        for i in 0..params.len() {
            params[i] = P::from_f64(params[i].to_f64() - lr[i] * self.update(i, grads[i], c1, c2));
        }
        Ok(())
    }

    fn advance(&mut self) -> (f64, f64) {
        self.step += 1;
        let t = self.step as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    #[inline]
    fn update(&mut self, i: usize, g: f64, c1: f64, c2: f64) -> f64 {
        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
        (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps)
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn decode(bytes: &[u8], at: &mut usize) -> Result<Self> {
        let len = read_u64(bytes, at)? as usize;
        let step = read_u64(bytes, at)?;
        let mut st = AdamState::new(len);
        st.step = step;
        for k in 0..2 * len {
            let x = f64::from_bits(read_u64(bytes, at)?);
            if k < len {
                st.m[k] = x;
            } else {
                st.v[k - len] = x;
            }
        }
        Ok(st)
    }
}

fn read_u64(bytes: &[u8], at: &mut usize) -> Result<u64> {
    let end = *at + 8;
    if end > bytes.len() {
        return Err(Error::Truncated { expected: end, found: bytes.len() });
    }
    let v = u64::from_le_bytes(bytes[*at..end].try_into().unwrap());
    *at = end;
    Ok(v)
}

/// A map with jittered occupancy around `cfg.initial_occupancy` and grey colour.
///
/// A constant initial field below τ renders no surface and receives no
/// gradient, so the level set is seeded with noise.
pub fn initial_map(geometry: GridGeometry, cfg: &TrainConfig) -> VoxelMap {
    let mut map = VoxelMap::new(geometry);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0cc0);
    let (lo, hi) = (cfg.initial_occupancy - cfg.initial_jitter, cfg.initial_occupancy + cfg.initial_jitter);
    for v in map.occ.iter_mut() {
        *v = if hi > lo { rng.random_range(lo..hi) as f32 } else { lo as f32 };
    }
    map.scales = EmissionScales::tied(cfg.initial_scale);
    map
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VXCK";
const CHECKPOINT_VERSION: u8 = 1;

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub map: VoxelMap,
    pub cfg: TrainConfig,
    pub render: RenderConfig,
    /// Number of completed steps.
    pub step: u64,
    occ_adam: AdamState,
    col_adam: AdamState,
    scale_adam: AdamState,
    grad: DenseGrad,
}

impl Trainer {
    pub fn new(geometry: GridGeometry, cfg: TrainConfig, render: RenderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::from_map(initial_map(geometry, &cfg), cfg, render))
    }

    fn from_map(map: VoxelMap, cfg: TrainConfig, render: RenderConfig) -> Self {
        let n = map.geometry.len();
        Self {
            map,
            cfg,
            render,
            step: 0,
            occ_adam: AdamState::new(n),
            col_adam: AdamState::new(3 * n),
            scale_adam: AdamState::new(1),
            grad: DenseGrad::new(n),
        }
    }

    /// One Adam step; returns the batch loss before the update.
    pub fn step(&mut self, dataset: &PosedDataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let batch = sample_batch(dataset, &self.cfg, self.step);
        let em = emissions(&self.map, dataset, &batch, &self.render);
        self.grad.clear();
        let (loss, dscale) = self.grad.accumulate(&em, self.cfg.colour_shapes_occupancy);
        let lr = self.cfg.learning_rate;
        self.occ_adam.step(&mut self.map.occ, &self.grad.occ, lr)?;
        self.col_adam.step(&mut self.map.col, &self.grad.col, lr)?;
        let mut sigma = [self.map.scales.depth];
        self.scale_adam.step(&mut sigma, &[dscale], self.cfg.scale_lr)?;
        self.map.scales = EmissionScales::tied(sigma[0].max(self.cfg.min_scale));
        self.step += 1;
        Ok(loss)
    }

    /// Run until `cfg.steps` steps are complete, reporting each step's loss.
    pub fn run(&mut self, dataset: &PosedDataset, mut on_step: impl FnMut(u64, f64)) -> Result<()> {
        while (self.step as usize) < self.cfg.steps {
            let loss = self.step(dataset)?;
            on_step(self.step - 1, loss);
        }
        Ok(())
    }

    pub fn encode_checkpoint(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let cfg = serde_json::to_vec(&(&self.cfg, &self.render))?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.step.to_le_bytes());
        let map = encode_map(&self.map);
        out.extend_from_slice(&(map.len() as u64).to_le_bytes());
        out.extend_from_slice(&map);
        for a in [&self.occ_adam, &self.col_adam, &self.scale_adam] {
            a.encode(&mut out);
        }
        Ok(out)
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::MalformedHeader("not a training checkpoint".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: bytes[4], expected: CHECKPOINT_VERSION });
        }
        let mut at = 5;
        let take = |at: &mut usize, len: usize| -> Result<&[u8]> {
            let end = *at + len;
            if end > bytes.len() {
                return Err(Error::Truncated { expected: end, found: bytes.len() });
            }
            let s = &bytes[*at..end];
            *at = end;
            Ok(s)
        };
        let cfg_len = read_u64(bytes, &mut at)? as usize;
        let (cfg, render): (TrainConfig, RenderConfig) = serde_json::from_slice(take(&mut at, cfg_len)?)?;
        let step = read_u64(bytes, &mut at)?;
        let map_len = read_u64(bytes, &mut at)? as usize;
        let map = decode_map(take(&mut at, map_len)?)?;
        let mut t = Self::from_map(map, cfg, render);
        t.step = step;
        t.occ_adam = AdamState::decode(bytes, &mut at)?;
        t.col_adam = AdamState::decode(bytes, &mut at)?;
        t.scale_adam = AdamState::decode(bytes, &mut at)?;
        let n = t.map.geometry.len();
        if t.occ_adam.m.len() != n || t.col_adam.m.len() != 3 * n || t.scale_adam.m.len() != 1 {
            return Err(Error::DimensionMismatch("optimizer state does not match the map".into()));
        }
        if at != bytes.len() {
            return Err(Error::DimensionMismatch("trailing bytes after checkpoint".into()));
        }
        Ok(t)
    }
}

/// Fit a map to `dataset` on the lattice `geometry`.
pub fn learn_map(dataset: &PosedDataset, geometry: GridGeometry, cfg: &TrainConfig, render: &RenderConfig) -> Result<VoxelMap> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut t = Trainer::new(geometry, *cfg, *render)?;
    t.run(dataset, |_, _| {})?;
    Ok(t.map)
}

/// Adam moments for a single twist, used by the trackers.
pub fn adam_twist_step(state: &mut AdamState, xi: &mut Vector6<f64>, grad: &Vector6<f64>, lr: &[f64; 6]) -> Result<()> {
    state.step_per_element(xi.as_mut_slice(), grad.as_slice(), lr)
}
