//! Differentiable RGB-D rendering of a [`VoxelMap`].
//!
//! Each pixel ray is sampled at `k ∈ {Δ, 2Δ, …, nΔ}`. At the first sample whose
//! occupancy reaches the threshold τ the occupancy is linearized between that
//! sample `k⁺` and its predecessor `k⁻ = k⁺ − Δ`:
//!
//! ```text
//! α  = (τ − f(p⁻)) / (f(p⁺) − f(p⁻))
//! k* = α k⁺ + (1 − α) k⁻
//! ```
//!
//! Rendered images march along `R K⁻¹ [i j 1]ᵀ`, whose optical-axis component
//! is one, so `k*` is the z-depth reported by a depth camera. Rays that never
//! reach τ render the maximum range and a grey background.
//!
//! Pixels are modelled with independent Laplace densities: scale σ1 for each
//! colour channel and σ2 for depth.

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{se3_exp, se3_left_jacobian, CameraIntrinsics, Pose, Twist, Vec3};
use crate::voxel_map::{EmissionScales, TrilinearSample, VoxelMap, COLOUR_SCALE_RATIO};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Distance Δ between ray samples.
    pub step: f64,
    /// Number of samples n; the maximum range is nΔ.
    pub samples: usize,
    /// Occupancy threshold τ.
    pub threshold: f64,
    /// Colour of rays that hit nothing.
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    /// 200 samples over a 20 m range.
    fn default() -> Self {
        Self { step: 0.1, samples: 200, threshold: 0.5, background: [0.5; 3] }
    }
}

impl RenderConfig {
    pub fn max_range(&self) -> f64 {
        self.samples as f64 * self.step
    }
}

/// An RGB-D frame. Colours are interleaved RGB in `[0, 1]`; depth is z-depth in
/// meters.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    pub intrinsics: CameraIntrinsics,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
}

impl RgbdImage {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        let n = intrinsics.pixel_count();
        Self { intrinsics, rgb: vec![0.0; 3 * n], depth: vec![0.0; n] }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.intrinsics.width * j
    }

    pub fn rgb_at(&self, i: usize, j: usize) -> [f64; 3] {
        let k = 3 * self.index(i, j);
        [self.rgb[k] as f64, self.rgb[k + 1] as f64, self.rgb[k + 2] as f64]
    }

    pub fn depth_at(&self, i: usize, j: usize) -> f64 {
        self.depth[self.index(i, j)] as f64
    }

    pub fn set(&mut self, i: usize, j: usize, rgb: [f64; 3], depth: f64) {
        let k = self.index(i, j);
        self.depth[k] = depth as f32;
        for c in 0..3 {
            self.rgb[3 * k + c] = rgb[c] as f32;
        }
    }

    /// Bilinear colour lookup at a continuous pixel position inside the frame,
    /// with the derivative of each channel with respect to `(u, v)`.
    pub fn rgb_bilinear(&self, u: f64, v: f64) -> ([f64; 3], [[f64; 2]; 3]) {
        let w = self.width();
        let h = self.height();
        let i0 = (u.floor() as usize).min(w - 2);
        let j0 = (v.floor() as usize).min(h - 2);
        let tu = u - i0 as f64;
        let tv = v - j0 as f64;
        let a = self.rgb_at(i0, j0);
        let b = self.rgb_at(i0 + 1, j0);
        let c = self.rgb_at(i0, j0 + 1);
        let d = self.rgb_at(i0 + 1, j0 + 1);
        let mut val = [0.0; 3];
        let mut grad = [[0.0; 2]; 3];
        for ch in 0..3 {
            let top = a[ch] + tu * (b[ch] - a[ch]);
            let bot = c[ch] + tu * (d[ch] - c[ch]);
            val[ch] = top + tv * (bot - top);
            grad[ch][0] = (1.0 - tv) * (b[ch] - a[ch]) + tv * (d[ch] - c[ch]);
            grad[ch][1] = bot - top;
        }
        (val, grad)
    }
}

/// A pixel address `(i, j)` = (column, row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub i: u32,
    pub j: u32,
}

impl Pixel {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i: i as u32, j: j as u32 }
    }

    pub fn from_index(index: usize, width: usize) -> Self {
        Self::new(index % width, index / width)
    }

    pub fn index(&self, width: usize) -> usize {
        self.i as usize + width * self.j as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// World ray of a pixel with a unit direction.
pub fn pixel_ray(pose: &Pose, k: &CameraIntrinsics, i: f64, j: f64) -> Ray {
    let r = depth_ray(pose, k, i, j);
    Ray { origin: r.origin, dir: r.dir.normalize() }
}

/// World ray `T + d R K⁻¹ [i j 1]ᵀ`, parameterized by camera z-depth `d`.
pub fn depth_ray(pose: &Pose, k: &CameraIntrinsics, i: f64, j: f64) -> Ray {
    Ray { origin: pose.translation, dir: pose.rotation * k.unproject_unit_depth(i, j) }
}

/// Result of marching one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub hit: bool,
    /// Distance along the ray in units of `|dir|`.
    pub k_star: f64,
    pub p_star: Vec3,
    pub alpha: f64,
    pub k_minus: f64,
    pub f_minus: f64,
    pub f_plus: f64,
}

/// Linearized crossing between `k⁻` and `k⁻ + step`; `α` is clamped to `[0, 1]`.
pub fn crossing(k_minus: f64, step: f64, f_minus: f64, f_plus: f64, threshold: f64) -> (f64, f64) {
    let denom = f_plus - f_minus;
    let alpha = if denom > 0.0 { ((threshold - f_minus) / denom).clamp(0.0, 1.0) } else { 0.0 };
    (alpha, alpha * (k_minus + step) + (1.0 - alpha) * k_minus)
}

/// Derivatives `(∂k*/∂f⁻, ∂k*/∂f⁺)` of the crossing distance. Zero where `α`
/// is clamped.
pub fn crossing_derivatives(step: f64, f_minus: f64, f_plus: f64, threshold: f64) -> (f64, f64) {
    let denom = f_plus - f_minus;
    if !(denom > 0.0) || f_minus > threshold || f_plus < threshold {
        return (0.0, 0.0);
    }
    let d2 = denom * denom;
    (step * (threshold - f_plus) / d2, -step * (threshold - f_minus) / d2)
}

/// March `origin + k·dir` at `k = Δ, 2Δ, …, nΔ` to the first threshold crossing.
pub fn march_ray(map: &VoxelMap, origin: &Vec3, dir: &Vec3, cfg: &RenderConfig) -> RayHit {
    let stride = dir * cfg.step;
    let mut p = *origin;
    let mut f_prev = map.sample_occ(origin);
    for s in 1..=cfg.samples {
        p += stride;
        let f = map.sample_occ(&p);
        if f >= cfg.threshold {
            let k_minus = (s - 1) as f64 * cfg.step;
            let (alpha, k_star) = crossing(k_minus, cfg.step, f_prev, f, cfg.threshold);
            return RayHit { hit: true, k_star, p_star: origin + dir * k_star, alpha, k_minus, f_minus: f_prev, f_plus: f };
        }
        f_prev = f;
    }
    let k_star = cfg.max_range();
    RayHit { hit: false, k_star, p_star: origin + dir * k_star, alpha: 1.0, k_minus: k_star, f_minus: f_prev, f_plus: f_prev }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Rendered colour and depth of one pixel ray.
pub fn shade(map: &VoxelMap, ray: &Ray, cfg: &RenderConfig) -> ([f64; 3], f64, RayHit) {
    let hit = march_ray(map, &ray.origin, &ray.dir, cfg);
    if hit.hit {
        let c = map.sample_col(&hit.p_star);
        ([clamp01(c[0]), clamp01(c[1]), clamp01(c[2])], hit.k_star, hit)
    } else {
        (cfg.background, cfg.max_range(), hit)
    }
}

/// Render a full RGB-D image from a camera pose.
pub fn render_rgbd(map: &VoxelMap, pose: &Pose, k: &CameraIntrinsics, cfg: &RenderConfig) -> RgbdImage {
    let mut img = RgbdImage::new(*k);
    let w = k.width;
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..k.height)
        .into_par_iter()
        .map(|j| {
            let mut rgb = Vec::with_capacity(3 * w);
            let mut depth = Vec::with_capacity(w);
            for i in 0..w {
                let (c, d, _) = shade(map, &depth_ray(pose, k, i as f64, j as f64), cfg);
                rgb.extend(c.iter().map(|&v| v as f32));
                depth.push(d as f32);
            }
            (rgb, depth)
        })
        .collect();
    for (j, (rgb, depth)) in rows.into_iter().enumerate() {
        img.rgb[3 * w * j..3 * w * (j + 1)].copy_from_slice(&rgb);
        img.depth[w * j..w * (j + 1)].copy_from_slice(&depth);
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedPixel {
    pub pixel: Pixel,
    pub rgb: [f64; 3],
    pub depth: f64,
    pub hit: bool,
}

/// Render only the requested pixels.
pub fn render_pixels(map: &VoxelMap, pose: &Pose, k: &CameraIntrinsics, cfg: &RenderConfig, pixels: &[Pixel]) -> Vec<RenderedPixel> {
    pixels
        .iter()
        .map(|&px| {
            let (rgb, depth, hit) = shade(map, &depth_ray(pose, k, px.i as f64, px.j as f64), cfg);
            RenderedPixel { pixel: px, rgb, depth, hit: hit.hit }
        })
        .collect()
}

/// `log Laplace(x | μ, σ) = −log(2σ) − |x − μ|/σ`.
pub fn laplace_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    -(2.0 * sigma).ln() - (x - mu).abs() / sigma
}

/// Sign with `sign(0) = 0`, the subgradient used for L1 terms.
pub fn l1_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of per-pixel Laplace log-densities of `x` under the rendering at `pose`.
pub fn log_likelihood(x: &RgbdImage, pose: &Pose, map: &VoxelMap, cfg: &RenderConfig, pixels: &[Pixel], scales: &EmissionScales) -> f64 {
    let k = &x.intrinsics;
    let mut total = 0.0;
    for r in render_pixels(map, pose, k, cfg, pixels) {
        let (i, j) = (r.pixel.i as usize, r.pixel.j as usize);
        let obs = x.rgb_at(i, j);
        for c in 0..3 {
            total += laplace_log_pdf(obs[c], r.rgb[c], scales.colour);
        }
        total += laplace_log_pdf(x.depth_at(i, j), r.depth, scales.depth);
    }
    total
}

/// Observed values of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub rgb: [f64; 3],
    pub depth: f64,
}

/// Negative log-likelihood of one pixel and everything needed to push its
/// gradient into grid cells or a camera pose.
#[derive(Debug, Clone, Copy)]
pub struct PixelEmission {
    pub neg_log_lik: f64,
    /// ∂/∂σ2 under the tying rule σ1 = σ2/5.
    pub dsigma: f64,
    pub hit: Option<HitGradient>,
}

#[derive(Debug, Clone, Copy)]
pub struct HitGradient {
    pub k_minus: f64,
    pub k_star: f64,
    pub step: f64,
    /// Total ∂L/∂k*, including the colour sample's motion along the ray.
    pub dl_dk: f64,
    /// The depth residual's share of `dl_dk`.
    pub dl_dk_depth: f64,
    pub dk_dfm: f64,
    pub dk_dfp: f64,
    pub occ_minus: TrilinearSample,
    pub occ_plus: TrilinearSample,
    /// ∂L/∂(colour at p*) per channel, zero where the colour was clamped.
    pub dl_dcol: [f64; 3],
    pub col_cells: [(usize, f64); 8],
    /// ∂L/∂p* with k* held fixed.
    pub dl_dp_star: Vec3,
}

impl HitGradient {
    /// `(k, ∂L/∂X)` for the three world points through which the pixel
    /// depends on the ray geometry: p⁻, p⁺ and p*.
    pub fn point_gradients(&self) -> [(f64, Vec3); 3] {
        [
            (self.k_minus, self.occ_minus.gradient * (self.dl_dk * self.dk_dfm)),
            (self.k_minus + self.step, self.occ_plus.gradient * (self.dl_dk * self.dk_dfp)),
            (self.k_star, self.dl_dp_star),
        ]
    }
}

/// Emission term of a single ray against an observation.
pub fn pixel_emission(map: &VoxelMap, ray: &Ray, cfg: &RenderConfig, scales: &EmissionScales, obs: &Observation) -> PixelEmission {
    let hit = march_ray(map, &ray.origin, &ray.dir, cfg);
    let (s1, s2) = (scales.colour, scales.depth);
    let norm = 3.0 * (2.0 * s1).ln() + (2.0 * s2).ln();
    let dnorm = 3.0 * COLOUR_SCALE_RATIO / s1 + 1.0 / s2;

    if !hit.hit {
        let mut abs_c = 0.0;
        for c in 0..3 {
            abs_c += (obs.rgb[c] - cfg.background[c]).abs();
        }
        let abs_d = (obs.depth - cfg.max_range()).abs();
        return PixelEmission {
            neg_log_lik: norm + abs_c / s1 + abs_d / s2,
            dsigma: dnorm - COLOUR_SCALE_RATIO * abs_c / (s1 * s1) - abs_d / (s2 * s2),
            hit: None,
        };
    }

    let col = map.sample_col_grad(&hit.p_star);
    let mut abs_c = 0.0;
    let mut dl_dcol = [0.0; 3];
    let mut dl_dp_star = Vec3::zeros();
    for c in 0..3 {
        let mu = clamp01(col.value[c]);
        let r = obs.rgb[c] - mu;
        abs_c += r.abs();
        if col.value[c] > 0.0 && col.value[c] < 1.0 {
            dl_dcol[c] = -l1_sign(r) / s1;
            dl_dp_star += col.gradient[c] * dl_dcol[c];
        }
    }
    let rd = obs.depth - hit.k_star;
    let dl_dk_depth = -l1_sign(rd) / s2;
    let dl_dk = dl_dk_depth + dl_dp_star.dot(&ray.dir);

    let p_minus = ray.origin + ray.dir * hit.k_minus;
    let p_plus = ray.origin + ray.dir * (hit.k_minus + cfg.step);
    let (dk_dfm, dk_dfp) = crossing_derivatives(cfg.step, hit.f_minus, hit.f_plus, cfg.threshold);

    PixelEmission {
        neg_log_lik: norm + abs_c / s1 + rd.abs() / s2,
        dsigma: dnorm - COLOUR_SCALE_RATIO * abs_c / (s1 * s1) - rd.abs() / (s2 * s2),
        hit: Some(HitGradient {
            k_minus: hit.k_minus,
            k_star: hit.k_star,
            step: cfg.step,
            dl_dk,
            dl_dk_depth,
            dk_dfm,
            dk_dfp,
            occ_minus: map.sample_occ_grad(&p_minus),
            occ_plus: map.sample_occ_grad(&p_plus),
            dl_dcol,
            col_cells: col.cells,
            dl_dp_star,
        }),
    }
}

/// Negative log-likelihood of the sampled pixels of `x` at the camera pose
/// `base ∘ exp(ξ)`, and its gradient with respect to ξ.
///
/// Returns the number of pixels whose ray hit a surface alongside.
pub fn emission_objective(
    x: &RgbdImage,
    base: &Pose,
    xi: &Twist,
    map: &VoxelMap,
    cfg: &RenderConfig,
    pixels: &[Pixel],
    scales: &EmissionScales,
) -> (f64, Vector6<f64>, usize) {
    let k = &x.intrinsics;
    let delta = se3_exp(xi);
    let pose = base.compose(&delta);
    let rt = base.rotation.transpose();
    let mut value = 0.0;
    let mut h = Vector6::zeros();
    let mut hits = 0;
    for px in pixels {
        let (i, j) = (px.i as usize, px.j as usize);
        let unit = k.unproject_unit_depth(i as f64, j as f64);
        let ray = Ray { origin: pose.translation, dir: pose.rotation * unit };
        let obs = Observation { rgb: x.rgb_at(i, j), depth: x.depth_at(i, j) };
        let e = pixel_emission(map, &ray, cfg, scales, &obs);
        value += e.neg_log_lik;
        if let Some(g) = e.hit {
            hits += 1;
            for (kk, dl_dx) in g.point_gradients() {
                // y = exp(ξ)·(k·unit) in the base camera frame.
                let y = delta.transform_point(&(unit * kk));
                let gb = rt * dl_dx;
                let r = y.cross(&gb);
                h += Vector6::new(gb.x, gb.y, gb.z, r.x, r.y, r.z);
            }
        }
    }
    let jac: Matrix6<f64> = se3_left_jacobian(xi);
    (value, jac.transpose() * h, hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{agent_to_camera, AgentState, CameraRig, DEFAULT_MOUNT_QUATERNION};
    use crate::voxel_map::GridGeometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Red half-space: occupancy 1 for x ≥ wall_x, else 0.
    fn wall_map(wall_x: f64) -> VoxelMap {
        let g = GridGeometry::new([61, 41, 21], Vec3::new(-1.0, -2.0, -0.5), Vec3::new(0.1, 0.1, 0.1)).unwrap();
        let mut m = VoxelMap::new(g);
        for k in 0..21 {
            for j in 0..41 {
                for i in 0..61 {
                    let p = g.node_position(i, j, k);
                    let idx = g.index(i, j, k);
                    if p.x >= wall_x - 1e-9 {
                        m.occ[idx] = 1.0;
                    }
                    m.col[3 * idx] = 1.0;
                    m.col[3 * idx + 1] = 0.0;
                    m.col[3 * idx + 2] = 0.0;
                }
            }
        }
        m
    }

    fn small_k() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn crossing_example() {
        let (alpha, k) = crossing(1.0, 0.1, 0.2, 0.8, 0.5);
        assert!((alpha - 0.5).abs() < 1e-15);
        assert!((k - 1.05).abs() < 1e-12);
        let (alpha, k) = crossing(1.0, 0.1, 0.5, 0.8, 0.5);
        assert_eq!((alpha, k), (0.0, 1.0));
    }

    #[test]
    fn march_through_constant_field() {
        let g = GridGeometry::new([4, 4, 4], Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let m = VoxelMap::new(g);
        let cfg = RenderConfig::default();
        let h = march_ray(&m, &Vec3::new(1.0, 1.0, 1.0), &Vec3::x(), &cfg);
        assert!(!h.hit);
        assert_eq!(h.k_star, cfg.max_range());
    }

    #[test]
    fn march_linear_ramp_matches_crossing_formula() {
        // f(x) = x/3 along x; τ = 0.5 is crossed at x = 1.5.
        let g = GridGeometry::new([4, 2, 2], Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let mut m = VoxelMap::new(g);
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..4 {
                    m.occ[g.index(i, j, k)] = i as f32 / 3.0;
                }
            }
        }
        let cfg = RenderConfig { step: 0.25, samples: 40, ..Default::default() };
        let h = march_ray(&m, &Vec3::new(0.0, 0.5, 0.5), &Vec3::x(), &cfg);
        assert!(h.hit);
        // Node values are stored as f32.
        assert!((h.k_star - 1.5).abs() < 1e-6, "{}", h.k_star);
        assert!(h.k_minus <= h.k_star && h.k_star <= h.k_minus + cfg.step);
        assert!((0.0..=1.0).contains(&h.alpha));
    }

    #[test]
    fn pixel_ray_properties() {
        let k = small_k();
        let id = Pose::identity();
        let c = pixel_ray(&id, &k, k.cx, k.cy);
        assert_eq!(c.dir, Vec3::z());
        let a = pixel_ray(&id, &k, 0.0, 0.0);
        let b = pixel_ray(&id, &k, 2.0 * k.cx, 2.0 * k.cy);
        assert!((a.dir.x + b.dir.x).abs() < 1e-15 && (a.dir.y + b.dir.y).abs() < 1e-15);
        assert!((a.dir.z - b.dir.z).abs() < 1e-15);
        let moved = Pose::from_translation(Vec3::new(1.0, 2.0, 3.0));
        let m = pixel_ray(&moved, &k, 5.0, 7.0);
        assert_eq!(m.origin, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(m.dir, pixel_ray(&id, &k, 5.0, 7.0).dir);
    }

    #[test]
    fn wall_depth_matches_analytic_intersection() {
        let map = wall_map(2.0);
        let cfg = RenderConfig { step: 0.1, samples: 60, ..Default::default() };
        let k = small_k();
        let rig = CameraRig::new(k, 0.5);
        // Facing +x from the origin: the wall plane x = 2 is at z-depth 2.
        let pose = rig.camera_pose(&AgentState::new(0.0, 0.0, 0.0));
        let img = render_rgbd(&map, &pose, &k, &cfg);
        for j in 0..k.height {
            for i in 0..k.width {
                let d = img.depth_at(i, j);
                assert!((d - 2.0).abs() <= cfg.step, "pixel ({i},{j}) depth {d}");
                let rgb = img.rgb_at(i, j);
                assert!((rgb[0] - 1.0).abs() < 0.05 && rgb[1] < 0.05 && rgb[2] < 0.05);
            }
        }
    }

    #[test]
    fn empty_map_renders_max_range() {
        let g = GridGeometry::new([4, 4, 4], Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let m = VoxelMap::new(g);
        let cfg = RenderConfig { samples: 30, ..Default::default() };
        let img = render_rgbd(&m, &Pose::identity(), &small_k(), &cfg);
        assert!(img.depth.iter().all(|&d| d as f64 == cfg.max_range()));
        assert!(img.rgb.iter().all(|&c| c == 0.5));
    }

    #[test]
    fn render_is_deterministic() {
        let map = wall_map(1.7);
        let cfg = RenderConfig { samples: 50, ..Default::default() };
        let pose = agent_to_camera(&AgentState::new(0.1, 0.2, 0.3), &Pose::from_quaternion(DEFAULT_MOUNT_QUATERNION), 0.4);
        let a = render_rgbd(&map, &pose, &small_k(), &cfg);
        let b = render_rgbd(&map, &pose, &small_k(), &cfg);
        assert_eq!(a, b);
        let pixels: Vec<Pixel> = (0..20).map(|k| Pixel::new(3 * k, 2 * k)).collect();
        for r in render_pixels(&map, &pose, &small_k(), &cfg, &pixels) {
            let (i, j) = (r.pixel.i as usize, r.pixel.j as usize);
            assert_eq!(r.depth as f32, a.depth_at(i, j) as f32);
        }
    }

    #[test]
    fn raising_occupancy_never_increases_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut map = wall_map(2.5);
        for v in map.occ.iter_mut() {
            *v *= rng.random_range(0.3..1.0);
        }
        let cfg = RenderConfig { samples: 60, ..Default::default() };
        let origin = Vec3::new(0.0, 0.0, 0.5);
        for _ in 0..200 {
            let dir = Vec3::new(1.0, rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3));
            let before = march_ray(&map, &origin, &dir, &cfg).k_star;
            let mut edited = map.clone();
            let idx = rng.random_range(0..edited.occ.len());
            edited.occ[idx] += rng.random_range(0.0..1.0);
            let after = march_ray(&edited, &origin, &dir, &cfg).k_star;
            assert!(after <= before + 1e-12, "{after} > {before}");
        }
    }

    #[test]
    fn laplace_examples() {
        assert!((laplace_log_pdf(0.3, 0.3, 1.0) + 2f64.ln()).abs() < 1e-15);
        let a = laplace_log_pdf(1.0, 0.0, 0.5);
        let b = laplace_log_pdf(1.5, 0.0, 0.5);
        assert!(b < a);
    }

    #[test]
    fn log_likelihood_matches_scalar_oracle() {
        let map = wall_map(2.0);
        let cfg = RenderConfig { samples: 60, ..Default::default() };
        let k = small_k();
        let pose = CameraRig::new(k, 0.5).camera_pose(&AgentState::new(0.2, -0.1, 0.2));
        let rendered = render_rgbd(&map, &pose, &k, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut obs = rendered.clone();
        for v in obs.rgb.iter_mut() {
            *v = (*v + rng.random_range(-0.2f32..0.2)).clamp(0.0, 1.0);
        }
        for v in obs.depth.iter_mut() {
            *v += rng.random_range(-0.3f32..0.3);
        }
        let pixels: Vec<Pixel> = (0..100).map(|_| Pixel::new(rng.random_range(0..k.width), rng.random_range(0..k.height))).collect();
        let scales = EmissionScales::tied(0.4);
        let ll = log_likelihood(&obs, &pose, &map, &cfg, &pixels, &scales);
        let mut oracle = 0.0;
        for px in &pixels {
            let (i, j) = (px.i as usize, px.j as usize);
            let (x, mu) = (obs.rgb_at(i, j), rendered.rgb_at(i, j));
            for c in 0..3 {
                let s = scales.colour;
                oracle += -(2.0 * s).ln() - ((x[c] - mu[c]).abs() / s);
            }
            let s = scales.depth;
            oracle += -(2.0 * s).ln() - (obs.depth_at(i, j) - rendered.depth_at(i, j)).abs() / s;
        }
        // The oracle reads the rendering through f32 storage.
        assert!((ll - oracle).abs() < 1e-4 * oracle.abs(), "{ll} vs {oracle}");

        // Exact match against a rendering kept in f64.
        let mut exact = 0.0;
        for r in render_pixels(&map, &pose, &k, &cfg, &pixels) {
            let (i, j) = (r.pixel.i as usize, r.pixel.j as usize);
            let x = obs.rgb_at(i, j);
            for c in 0..3 {
                exact += -(2.0 * scales.colour).ln() - (x[c] - r.rgb[c]).abs() / scales.colour;
            }
            exact += -(2.0 * scales.depth).ln() - (obs.depth_at(i, j) - r.depth).abs() / scales.depth;
        }
        assert!((ll - exact).abs() < 1e-10 * exact.abs().max(1.0));
    }

    #[test]
    fn perfect_observation_scores_minus_log_two_per_scalar() {
        let map = wall_map(2.0);
        let cfg = RenderConfig { samples: 60, ..Default::default() };
        let k = small_k();
        let pose = CameraRig::new(k, 0.5).camera_pose(&AgentState::default());
        let pixels: Vec<Pixel> = (0..10).map(|n| Pixel::new(n * 5, n * 4)).collect();
        let mut obs = RgbdImage::new(k);
        for r in render_pixels(&map, &pose, &k, &cfg, &pixels) {
            obs.set(r.pixel.i as usize, r.pixel.j as usize, r.rgb, r.depth);
        }
        // Values are exact in f32 for this scene (depth 2.0, pure red).
        let ll = log_likelihood(&obs, &pose, &map, &cfg, &pixels, &EmissionScales { colour: 1.0, depth: 1.0 });
        assert!((ll + 40.0 * 2f64.ln()).abs() < 1e-6, "{ll}");
    }

    /// Smooth scene for gradient checks: occupancy ramps with distance along a
    /// tilted direction, colours vary smoothly.
    fn smooth_map() -> VoxelMap {
        let g = GridGeometry::new([40, 40, 12], Vec3::new(-1.0, -2.0, -0.1), Vec3::new(0.1, 0.1, 0.1)).unwrap();
        let mut m = VoxelMap::new(g);
        for k in 0..12 {
            for j in 0..40 {
                for i in 0..40 {
                    let p = g.node_position(i, j, k);
                    let idx = g.index(i, j, k);
                    m.occ[idx] = (0.8 * (p.x - 1.2) + 0.3 * (p.y * 2.0).sin()) as f32;
                    m.col[3 * idx] = (0.5 + 0.3 * (3.0 * p.y).sin()) as f32;
                    m.col[3 * idx + 1] = (0.5 + 0.3 * (2.0 * p.z + p.x).cos()) as f32;
                    m.col[3 * idx + 2] = (0.4 + 0.1 * p.x) as f32;
                }
            }
        }
        m
    }

    #[test]
    fn emission_pose_gradient_matches_finite_differences() {
        let map = smooth_map();
        let cfg = RenderConfig { step: 0.1, samples: 60, ..Default::default() };
        let k = small_k();
        let rig = CameraRig::new(k, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let truth = rig.camera_pose(&AgentState::new(0.0, 0.0, 0.1));
        let obs = render_rgbd(&map, &truth, &k, &cfg);
        let scales = EmissionScales::tied(0.5);
        for trial in 0..10 {
            let base =
                rig.camera_pose(&AgentState::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.3)));
            let xi = Twist::new(
                Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)),
                Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)),
            );
            let pixels: Vec<Pixel> = (0..60).map(|_| Pixel::new(rng.random_range(0..k.width), rng.random_range(0..k.height))).collect();
            let (_, grad, hits) = emission_objective(&obs, &base, &xi, &map, &cfg, &pixels, &scales);
            assert!(hits > 0);
            let h = 1e-5;
            let mut fd = Vector6::zeros();
            for a in 0..6 {
                let mut p = xi;
                let mut m = xi;
                p.0[a] += h;
                m.0[a] -= h;
                let fp = emission_objective(&obs, &base, &p, &map, &cfg, &pixels, &scales).0;
                let fm = emission_objective(&obs, &base, &m, &map, &cfg, &pixels, &scales).0;
                fd[a] = (fp - fm) / (2.0 * h);
            }
            let rel = (grad - fd).norm() / fd.norm();
            assert!(rel < 1e-3, "trial {trial}: rel {rel}\n{grad}\n{fd}");
        }
    }
}
