//! Rigid-body math: SE(3) poses and se(3) twists, planar agent state and the
//! camera mount, pinhole projection.
//!
//! # Conventions
//!
//! A [`Pose`] maps points from its local frame into its parent frame:
//! `p_parent = R * p_local + t`. Camera poses are camera-to-world.
//!
//! [`relative_pose(a, b)`](relative_pose) is `a⁻¹ ∘ b`: it maps points expressed
//! in frame `b` into frame `a`. The tracker calls it with `a` = previous camera
//! and `b` = current camera, so the result maps current-frame points into the
//! previous frame. Every module uses this one convention.
//!
//! Twists are ordered `(ρ, ω)`: translational part first, rotational second.
//!
//! Pixels are addressed as `(i, j)` = (column, row); the ray of pixel `(i, j)`
//! passes through `K⁻¹ [i j 1]ᵀ` with no half-pixel offset.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation angle the closed-form Lie coefficients are replaced by
/// their Taylor series.
const SMALL_ANGLE: f64 = 0.05;

/// Angles closer than this to π make the rotation axis ambiguous in `se3_log`.
const LOG_DEGENERATE_MARGIN: f64 = 1e-6;

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Row-major rotation and translation, as stored in config files.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        Self {
            rotation: std::array::from_fn(|r| std::array::from_fn(|c| p.rotation[(r, c)])),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl From<PoseRepr> for Pose {
    fn from(p: PoseRepr) -> Self {
        Pose::new(Mat3::from_fn(|r, c| p.rotation[r][c]), Vec3::from(p.translation))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation }
    }

    /// Rotation from a quaternion given as `[w, x, y, z]`. The quaternion is
    /// normalized first.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Self { rotation: *uq.to_rotation_matrix().matrix(), translation: Vec3::zeros() }
    }

    /// Rotation about the world z axis.
    pub fn yaw(angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Largest entry-wise deviation between two poses.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }
}

/// se(3) coordinates `(ρ, ω)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(translation: Vec3, rotation: Vec3) -> Self {
        Self(Vector6::new(translation.x, translation.y, translation.z, rotation.x, rotation.y, rotation.z))
    }

    pub fn translation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients `sin θ / θ`, `(1 − cos θ)/θ²`, `(θ − sin θ)/θ³`.
fn so3_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (1.0 - t2 / 6.0 + t4 / 120.0, 0.5 - t2 / 24.0 + t4 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0)
    } else {
        let s = theta.sin();
        let half = (0.5 * theta).sin();
        (s / theta, 2.0 * half * half / (theta * theta), (theta - s) / (theta * theta * theta))
    }
}

pub fn so3_exp(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let (a, b, _) = so3_coefficients(theta);
    let k = skew(omega);
    Mat3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3); also the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let (_, b, c) = so3_coefficients(theta);
    let k = skew(omega);
    Mat3::identity() + k * b + k * k * c
}

/// Rotation log; fails within `LOG_DEGENERATE_MARGIN` of angle π.
pub fn so3_log(r: &Mat3) -> Result<Vec3> {
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    // atan2 keeps full precision at small angles where acos does not.
    let theta = (0.5 * vee.norm()).atan2(0.5 * (r.trace() - 1.0));
    if PI - theta < LOG_DEGENERATE_MARGIN {
        return Err(Error::DegenerateRotation { angle: theta });
    }
    let scale = if theta < SMALL_ANGLE {
        // θ / (2 sin θ)
        let t2 = theta * theta;
        0.5 * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0 + 31.0 * t2 * t2 * t2 / 15120.0)
    } else {
        theta / (2.0 * theta.sin())
    };
    Ok(vee * scale)
}

/// Exponential map of a twist; rotation via Rodrigues, translation via `V ρ`.
pub fn se3_exp(xi: &Twist) -> Pose {
    let omega = xi.rotation();
    Pose { rotation: so3_exp(&omega), translation: so3_left_jacobian(&omega) * xi.translation() }
}

/// Inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(pose: &Pose) -> Result<Twist> {
    let omega = so3_log(&pose.rotation)?;
    let theta = omega.norm();
    let k = skew(&omega);
    let coeff = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (s, half) = (theta.sin(), (0.5 * theta).sin());
        (1.0 - theta * s / (4.0 * half * half)) / (theta * theta)
    };
    let v_inv = Mat3::identity() - k * 0.5 + k * k * coeff;
    Ok(Twist::new(v_inv * pose.translation, omega))
}

/// Left Jacobian of SE(3): `exp(ξ + δ) ≈ exp(J(ξ) δ) · exp(ξ)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let rho = xi.translation();
    let omega = xi.rotation();
    let theta = omega.norm();
    let jl = so3_left_jacobian(&omega);

    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0, 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0, 1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        ((theta - s) / (t2 * theta), (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2), (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta))
    };
    let p = skew(&rho);
    let w = skew(&omega);
    let ww = w * w;
    let q = p * 0.5 + (w * p + p * w + w * p * w) * c1 + (ww * p + p * ww - w * p * w * 3.0) * c2 + (w * p * ww + ww * p * w) * c3;

    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    out
}

/// `a⁻¹ ∘ b`: maps points expressed in frame `b` into frame `a`.
pub fn relative_pose(a: &Pose, b: &Pose) -> Pose {
    a.inverse().compose(b)
}

/// Wrap an angle into `(−π, π]`. Angles already in range are returned as is.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Pinhole intrinsics with a single focal length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    /// The calibrated simulator camera: focal 150, principal point (160, 120),
    /// 320×240 pixels.
    fn default() -> Self {
        Self { focal: 150.0, cx: 160.0, cy: 120.0, width: 320, height: 240 }
    }
}

impl CameraIntrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { focal, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.focal > 0.0 && self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Same field of view at a different resolution.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            focal: self.focal * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width: (self.width as f64 * factor).round() as usize,
            height: (self.height as f64 * factor).round() as usize,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// `K⁻¹ [i j 1]ᵀ`; the z component is 1.
    pub fn unproject_unit_depth(&self, i: f64, j: f64) -> Vec3 {
        Vec3::new((i - self.cx) / self.focal, (j - self.cy) / self.focal, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Perspective projection; `None` for points on or behind the image plane.
pub fn project(p_cam: &Vec3, k: &CameraIntrinsics) -> Option<Vec2> {
    if p_cam.z <= 0.0 {
        return None;
    }
    Some(Vec2::new(k.focal * p_cam.x / p_cam.z + k.cx, k.focal * p_cam.y / p_cam.z + k.cy))
}

/// `depth · K⁻¹ [i j 1]ᵀ`; `None` for non-positive or non-finite depth.
pub fn backproject(i: f64, j: f64, depth: f64, k: &CameraIntrinsics) -> Option<Vec3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return None;
    }
    Some(k.unproject_unit_depth(i, j) * depth)
}

/// Planar body state: position in meters, heading in `(−π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: wrap_angle(heading) }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Body-to-world pose with the body origin lifted to `height`.
    pub fn body_pose(&self, height: f64) -> Pose {
        Pose::new(Pose::yaw(self.heading), Vec3::new(self.x, self.y, height))
    }
}

/// Command `(α̇, o, s)`: angular velocity (rad/step), movement direction (rad),
/// speed (m/step).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub angular_velocity: f64,
    pub move_direction: f64,
    pub speed: f64,
}

impl Control {
    pub fn rotate(angular_velocity: f64, heading: f64) -> Self {
        Self { angular_velocity, move_direction: heading, speed: 0.0 }
    }
}

/// Bounds on a valid [`Control`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLimits {
    pub max_angular_velocity: f64,
    pub max_speed: f64,
    pub alignment: f64,
}

impl ControlLimits {
    /// 11.5°/step, 0.8 body lengths per step, 5° heading alignment.
    pub fn for_body(body_length: f64) -> Self {
        Self { max_angular_velocity: 11.5f64.to_radians(), max_speed: 0.8 * body_length, alignment: 5f64.to_radians() }
    }

    pub fn clamp(&self, u: &Control, heading: f64) -> Control {
        let angular_velocity = u.angular_velocity.clamp(-self.max_angular_velocity, self.max_angular_velocity);
        let speed = u.speed.clamp(0.0, self.max_speed);
        let offset = wrap_angle(u.move_direction - heading).clamp(-self.alignment, self.alignment);
        Control { angular_velocity, move_direction: wrap_angle(heading + offset), speed }
    }

    pub fn admits(&self, u: &Control, heading: f64) -> bool {
        const SLACK: f64 = 1e-12;
        u.angular_velocity.abs() <= self.max_angular_velocity + SLACK
            && u.speed >= 0.0
            && u.speed <= self.max_speed + SLACK
            && (u.speed == 0.0 || wrap_angle(u.move_direction - heading).abs() <= self.alignment + SLACK)
    }
}

/// Camera-to-body mount quaternion `[w, x, y, z]` that turns the optical
/// frame (z forward, x right, y down) into the body frame (x forward, y left,
/// z up).
pub const DEFAULT_MOUNT_QUATERNION: [f64; 4] = [0.5, -0.5, 0.5, -0.5];

/// Rigid camera placement on a planar agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-body transform.
    pub mount: Pose,
    /// Height of the body origin (and the camera) above the floor.
    pub height: f64,
}

impl CameraRig {
    pub fn new(intrinsics: CameraIntrinsics, height: f64) -> Self {
        Self { intrinsics, mount: Pose::from_quaternion(DEFAULT_MOUNT_QUATERNION), height }
    }

    pub fn camera_pose(&self, state: &AgentState) -> Pose {
        agent_to_camera(state, &self.mount, self.height)
    }
}

/// World-frame camera pose of an agent: planar body pose composed with the
/// camera-to-body mount.
pub fn agent_to_camera(state: &AgentState, mount: &Pose, body_height: f64) -> Pose {
    state.body_pose(body_height).compose(mount)
}

/// Planar state of a body-to-world pose (yaw extracted from the rotation).
pub fn planar_state(body: &Pose) -> AgentState {
    let r = &body.rotation;
    AgentState::new(body.translation.x, body.translation.y, r[(1, 0)].atan2(r[(0, 0)]))
}

/// Apply a body-frame planar displacement `(dx, dy, dθ)` to a state.
pub fn compose_planar(state: &AgentState, dx: f64, dy: f64, dtheta: f64) -> AgentState {
    if dx == 0.0 && dy == 0.0 && dtheta == 0.0 {
        return *state;
    }
    let (s, c) = state.heading.sin_cos();
    AgentState::new(state.x + c * dx - s * dy, state.y + s * dx + c * dy, state.heading + dtheta)
}
