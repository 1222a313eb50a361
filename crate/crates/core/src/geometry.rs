//! Pose representation and pose-update algebra.
//!
//! Object poses live in the camera frame (x right, y down, z forward). The
//! translation is stored in polar form `(d, phi, theta)` with
//! `T = d * (sin(theta) cos(phi), sin(theta) sin(phi), cos(theta))`, so the
//! pole points along the optical axis. Model points are scaled in the
//! canonical frame, then rotated, then translated. The canonical vertical
//! axis of every model is its local `+y`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Drift beyond which a quaternion is renormalized after composition.
const RENORM_DRIFT: f64 = 1e-12;

/// Quaternion stored as `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quat {
    fn from(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Quat> for [f64; 4] {
    fn from(q: Quat) -> Self {
        [q.w, q.x, q.y, q.z]
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn conjugate(&self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Inverse of a unit quaternion.
    pub fn inverse(&self) -> Quat {
        let n2 = self.dot(self);
        let c = self.conjugate();
        Quat::new(c.w / n2, c.x / n2, c.y / n2, c.z / n2)
    }

    /// Hamilton product `self ∘ o`; as rotations, `o` is applied first.
    pub fn mul(&self, o: &Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn normalized(&self) -> Result<Quat> {
        let n = self.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidRotation(format!("quaternion norm {n}")));
        }
        Ok(Quat::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Sign-canonical form with `w >= 0`.
    pub fn canonical(&self) -> Quat {
        if self.w < 0.0 {
            Quat::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            *self
        }
    }

    /// Renormalizes only when the norm has drifted, then canonicalizes the sign.
    fn tidy(&self) -> Quat {
        let n = self.norm();
        let q = if (n - 1.0).abs() > RENORM_DRIFT && n > 0.0 {
            Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
        } else {
            *self
        };
        q.canonical()
    }

    pub fn to_matrix(&self) -> Result<Mat3> {
        quat_to_matrix(self)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        // unit quaternions only; callers hold normalized values
        let m = quat_to_matrix(self).unwrap_or_else(|_| Mat3::identity());
        m * v
    }

    /// Geodesic angle in radians between two rotations.
    pub fn angle_to(&self, o: &Quat) -> f64 {
        let r = self.conjugate().mul(o);
        let v = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
        2.0 * v.atan2(r.w.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Converts a (renormalized) quaternion into a proper rotation matrix.
pub fn quat_to_matrix(q: &Quat) -> Result<Mat3> {
    let q = q.normalized()?;
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Ok(Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Rotation about the canonical vertical axis (local `+y`).
pub fn vertical_rotation(angle: f64) -> Quat {
    Quat::from_axis_angle(Vec3::y(), angle)
}

/// Object-frame perturbation from (tilt, azimuth, elevation) angles in radians:
/// azimuth about local `y`, elevation about local `x`, tilt about local `z`.
pub fn euler_perturbation(tilt: f64, azimuth: f64, elevation: f64) -> Quat {
    let qa = Quat::from_axis_angle(Vec3::y(), azimuth);
    let qe = Quat::from_axis_angle(Vec3::x(), elevation);
    let qt = Quat::from_axis_angle(Vec3::z(), tilt);
    qa.mul(&qe).mul(&qt)
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// 9-DoF object pose in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub d: f64,
    pub phi: f64,
    pub theta: f64,
    #[serde(rename = "quat")]
    pub q: Quat,
    #[serde(rename = "scale", with = "vec3_array")]
    pub s: Vec3,
}

pub(crate) mod vec3_array {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    }
}

impl Pose {
    /// Builds a canonical pose, validating the invariants.
    pub fn new(d: f64, phi: f64, theta: f64, q: Quat, s: Vec3) -> Result<Pose> {
        let q = q.normalized()?.canonical();
        let pose = Pose { d, phi, theta, q, s }.canonicalized();
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(t: Vec3, q: Quat, s: Vec3) -> Result<Pose> {
        let d = t.norm();
        if d <= 0.0 {
            return Err(Error::InvalidRotation("zero-length translation".into()));
        }
        let theta = (t.z / d).clamp(-1.0, 1.0).acos();
        let phi = t.y.atan2(t.x);
        Pose::new(d, phi, theta, q, s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.d > 0.0
            && self.d.is_finite()
            && self.phi.is_finite()
            && self.theta.is_finite()
            && self.q.is_finite()
            && (self.q.norm() - 1.0).abs() <= 1e-9
            && self.s.iter().all(|v| *v > 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidRotation(format!("pose violates invariants: {self:?}")))
        }
    }

    /// Folds `theta` into `[0, pi]` (shifting `phi` by pi when it flips) and
    /// wraps `phi` into `[-pi, pi)`.
    pub fn canonicalized(mut self) -> Pose {
        if !(0.0..=PI).contains(&self.theta) {
            let mut t = self.theta.rem_euclid(2.0 * PI);
            if t > PI {
                t = 2.0 * PI - t;
                self.phi += PI;
            }
            self.theta = t;
        }
        if !(-PI..PI).contains(&self.phi) {
            self.phi = wrap_angle(self.phi);
        }
        self
    }

    pub fn translation(&self) -> Vec3 {
        translation_vector(self)
    }

    pub fn rotation(&self) -> Mat3 {
        quat_to_matrix(&self.q).unwrap_or_else(|_| Mat3::identity())
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation() * self.s.component_mul(p) + self.translation()
    }

    /// Transforms a canonical-frame surface normal (inverse-transpose of the scale).
    pub fn transform_normal(&self, n: &Vec3) -> Vec3 {
        let scaled = n.component_div(&self.s);
        let r = self.rotation() * scaled;
        let len = r.norm();
        if len > 0.0 {
            r / len
        } else {
            r
        }
    }
}

/// `d * (sin(theta) cos(phi), sin(theta) sin(phi), cos(theta))`.
pub fn translation_vector(pose: &Pose) -> Vec3 {
    let (st, ct) = pose.theta.sin_cos();
    let (sp, cp) = pose.phi.sin_cos();
    Vec3::new(pose.d * st * cp, pose.d * st * sp, pose.d * ct)
}

/// Applies scale, then rotation, then translation to each point.
pub fn apply_pose(pose: &Pose, points: &[Vec3]) -> Vec<Vec3> {
    let r = pose.rotation();
    let t = pose.translation();
    points.iter().map(|p| r * pose.s.component_mul(p) + t).collect()
}

/// Network-predicted pose update plus classification score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub dd: f64,
    pub dphi: f64,
    pub dtheta: f64,
    pub dq: Quat,
    #[serde(with = "vec3_array")]
    pub ds: Vec3,
    pub sigma: f64,
}

impl PoseDelta {
    pub fn identity() -> PoseDelta {
        PoseDelta { dd: 1.0, dphi: 0.0, dtheta: 0.0, dq: Quat::IDENTITY, ds: Vec3::new(1.0, 1.0, 1.0), sigma: 0.5 }
    }

    /// Delta that undoes `self` when applied after it.
    pub fn inverse(&self) -> PoseDelta {
        PoseDelta {
            dd: 1.0 / self.dd,
            dphi: -self.dphi,
            dtheta: -self.dtheta,
            dq: self.dq.inverse(),
            ds: Vec3::new(1.0 / self.ds.x, 1.0 / self.ds.y, 1.0 / self.ds.z),
            sigma: self.sigma,
        }
    }

    /// Closed-form delta taking `from` exactly onto `to`.
    pub fn between(from: &Pose, to: &Pose) -> PoseDelta {
        PoseDelta {
            dd: to.d / from.d,
            dphi: wrap_angle(to.phi - from.phi),
            dtheta: to.theta - from.theta,
            dq: from.q.inverse().mul(&to.q),
            ds: to.s.component_div(&from.s),
            sigma: 0.5,
        }
    }

    /// Flat `[dd, dphi, dtheta, qw, qx, qy, qz, sx, sy, sz, sigma]`.
    pub fn to_array(&self) -> [f64; 11] {
        [self.dd, self.dphi, self.dtheta, self.dq.w, self.dq.x, self.dq.y, self.dq.z, self.ds.x, self.ds.y, self.ds.z, self.sigma]
    }

    pub fn is_valid(&self) -> bool {
        self.dd > 0.0
            && self.ds.iter().all(|v| *v > 0.0)
            && (self.dq.norm() - 1.0).abs() <= 1e-9
            && (0.0..=1.0).contains(&self.sigma)
            && self.dphi.is_finite()
            && self.dtheta.is_finite()
    }
}

/// Multiplicative distance/scale update, additive angle update, right-composed rotation.
pub fn update_pose(pose: &Pose, delta: &PoseDelta) -> Pose {
    Pose {
        d: pose.d * delta.dd,
        phi: pose.phi + delta.dphi,
        theta: pose.theta + delta.dtheta,
        q: pose.q.mul(&delta.dq).tidy(),
        s: pose.s.component_mul(&delta.ds),
    }
    .canonicalized()
}

/// Pinhole camera intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Camera> {
        let cam = Camera { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx > 0.0
            && self.fy > 0.0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy)
        {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Camera with the principal point at the image center.
    pub fn centered(fx: f64, width: usize, height: usize) -> Camera {
        Camera { fx, fy: fx, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height }
    }

    /// Continuous image coordinates of the center of pixel `(col, row)`.
    pub fn pixel_center(col: usize, row: usize) -> (f64, f64) {
        (col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Integer pixel containing continuous coordinates, if inside the image.
    pub fn pixel_at(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }

    pub fn project(&self, p: &Vec3) -> Result<(f64, f64, f64)> {
        project(self, p)
    }

    pub fn bearing(&self, u: f64, v: f64) -> Vec3 {
        pixel_bearing(self, u, v)
    }
}

/// Projects a camera-frame point to `(u, v, depth)`.
pub fn project(camera: &Camera, p: &Vec3) -> Result<(f64, f64, f64)> {
    if p.z <= 0.0 {
        return Err(Error::BehindCamera(p.z));
    }
    Ok((camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy, p.z))
}

/// Unit ray direction through continuous image coordinates `(u, v)`.
pub fn pixel_bearing(camera: &Camera, u: f64, v: f64) -> Vec3 {
    Vec3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0).normalize()
}

/// Rotational symmetry of a model about its vertical axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryTag {
    None,
    TwoFold,
    FourFold,
    Infinite,
}

impl SymmetryTag {
    /// Vertical rotation offsets of the finite symmetry group (radians).
    pub fn offsets(&self) -> &'static [f64] {
        const NONE: [f64; 1] = [0.0];
        const TWO: [f64; 2] = [0.0, PI];
        const FOUR: [f64; 4] = [0.0, 0.5 * PI, PI, 1.5 * PI];
        match self {
            SymmetryTag::None | SymmetryTag::Infinite => &NONE,
            SymmetryTag::TwoFold => &TWO,
            SymmetryTag::FourFold => &FOUR,
        }
    }
}

/// Symmetry-aware rotation error in degrees, in `[0, 180]`.
///
/// Infinitely symmetric objects are compared only by where the rotations
/// send the vertical axis.
pub fn rotation_error_deg(q_pred: &Quat, q_gt: &Quat, sym: SymmetryTag) -> f64 {
    let rad = match sym {
        SymmetryTag::Infinite => {
            let a = q_pred.rotate(&Vec3::y());
            let b = q_gt.rotate(&Vec3::y());
            a.cross(&b).norm().atan2(a.dot(&b))
        }
        _ => {
            sym.offsets().iter().map(|&alpha| q_pred.angle_to(&q_gt.mul(&vertical_rotation(alpha)))).fold(f64::INFINITY, f64::min)
        }
    };
    rad.to_degrees().clamp(0.0, 180.0)
}

/// Correctness thresholds for translation (m), rotation (deg) and scale (relative).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub t_max: f64,
    pub r_max: f64,
    pub s_max: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { t_max: 0.20, r_max: 20.0, s_max: 0.20 }
    }
}

/// Per-component pose errors: translation (m), rotation (deg), max per-axis scale deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseErrors {
    pub translation: f64,
    pub rotation_deg: f64,
    pub scale: f64,
}

impl PoseErrors {
    pub fn within(&self, th: &Thresholds) -> bool {
        self.translation < th.t_max && self.rotation_deg < th.r_max && self.scale < th.s_max
    }
}

pub fn pose_errors(pred: &Pose, gt: &Pose, sym: SymmetryTag) -> PoseErrors {
    let translation = (pred.translation() - gt.translation()).norm();
    let rotation_deg = rotation_error_deg(&pred.q, &gt.q, sym);
    let scale = (0..3).map(|i| (pred.s[i] / gt.s[i] - 1.0).abs()).fold(0.0, f64::max);
    PoseErrors { translation, rotation_deg, scale }
}

/// Strict 20 cm / 20° / 20% test.
pub fn pose_is_correct(pred: &Pose, gt: &Pose, sym: SymmetryTag) -> bool {
    pose_is_correct_with(pred, gt, sym, &Thresholds::default())
}

pub fn pose_is_correct_with(pred: &Pose, gt: &Pose, sym: SymmetryTag, th: &Thresholds) -> bool {
    pose_errors(pred, gt, sym).within(th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pose_at(t: Vec3) -> Pose {
        Pose::from_translation(t, Quat::IDENTITY, Vec3::new(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn quat_to_matrix_examples() {
        let m = quat_to_matrix(&Quat::IDENTITY).unwrap();
        assert_eq!(m, Mat3::identity());

        let m = quat_to_matrix(&Quat::new(0.0, 0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(m, Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0)), epsilon = 1e-15);

        let h = 0.5f64.sqrt();
        let m = quat_to_matrix(&Quat::new(h, 0.0, 0.0, h)).unwrap();
        assert_abs_diff_eq!(m * Vec3::x(), Vec3::y(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        assert!(matches!(quat_to_matrix(&Quat::new(0.0, 0.0, 0.0, 0.0)), Err(Error::InvalidRotation(_))));
    }

    #[test]
    fn translation_vector_examples() {
        let s = Vec3::new(1.0, 1.0, 1.0);
        let q = Quat::IDENTITY;
        let p = Pose { d: 3.0, phi: 0.0, theta: 0.0, q, s };
        assert_abs_diff_eq!(translation_vector(&p), Vec3::new(0.0, 0.0, 3.0), epsilon = 1e-15);
        let p = Pose { d: 2.0, phi: 0.0, theta: PI / 2.0, q, s };
        assert_abs_diff_eq!(translation_vector(&p), Vec3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
        let p = Pose { d: 1.0, phi: PI / 2.0, theta: PI / 2.0, q, s };
        assert_abs_diff_eq!(translation_vector(&p), Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn apply_pose_examples() {
        // zero translation is not a valid Pose; build the fixture directly
        let ident = Pose { d: 0.0, phi: 0.0, theta: 0.0, q: Quat::IDENTITY, s: Vec3::new(1.0, 1.0, 1.0) };
        let p = Vec3::new(0.3, -0.2, 0.7);
        assert_eq!(apply_pose(&ident, &[p]), vec![p]);

        let pose = Pose { d: 3.0, phi: 0.0, theta: 0.0, q: Quat::IDENTITY, s: Vec3::new(2.0, 1.0, 1.0) };
        let out = apply_pose(&pose, &[Vec3::new(1.0, 1.0, 1.0)]);
        assert_abs_diff_eq!(out[0], Vec3::new(2.0, 1.0, 4.0), epsilon = 1e-15);

        let rot =
            Pose { d: 0.0, phi: 0.0, theta: 0.0, q: Quat::from_axis_angle(Vec3::z(), PI / 2.0), s: Vec3::new(1.0, 1.0, 1.0) };
        let out = apply_pose(&rot, &[Vec3::x()]);
        assert_abs_diff_eq!(out[0], Vec3::y(), epsilon = 1e-15);
    }

    #[test]
    fn update_pose_examples() {
        let pose =
            Pose::new(2.0, 0.3, 0.4, Quat::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7), Vec3::new(1.0, 2.0, 1.0)).unwrap();
        assert_eq!(update_pose(&pose, &PoseDelta::identity()), pose);

        let p0 = Pose::new(2.0, 0.0, 0.0, Quat::IDENTITY, Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let delta = PoseDelta { dd: 1.5, ..PoseDelta::identity() };
        let p1 = update_pose(&p0, &delta);
        assert_eq!(p1.d, 3.0);
        assert_abs_diff_eq!(p1.translation(), Vec3::new(0.0, 0.0, 3.0), epsilon = 1e-15);

        let delta = PoseDelta { ds: Vec3::new(2.0, 0.5, 1.0), ..PoseDelta::identity() };
        assert_eq!(update_pose(&pose, &delta).s, Vec3::new(2.0, 1.0, 1.0));
    }

    #[test]
    fn theta_leaving_range_is_folded() {
        let p0 = Pose::new(2.0, 0.5, 0.1, Quat::IDENTITY, Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let p1 = update_pose(&p0, &PoseDelta { dtheta: -0.3, ..PoseDelta::identity() });
        assert!((0.0..=PI).contains(&p1.theta));
        assert!((-PI..PI).contains(&p1.phi));
        // same translation as the unfolded parameters
        let raw = Vec3::new((-0.2f64).sin() * 0.5f64.cos(), (-0.2f64).sin() * 0.5f64.sin(), (-0.2f64).cos()) * 2.0;
        assert_abs_diff_eq!(p1.translation(), raw, epsilon = 1e-12);
    }

    #[test]
    fn project_examples() {
        let cam = Camera::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        assert_eq!(project(&cam, &Vec3::new(0.0, 0.0, 2.0)).unwrap(), (50.0, 50.0, 2.0));
        assert_eq!(project(&cam, &Vec3::new(1.0, 0.0, 2.0)).unwrap(), (100.0, 50.0, 2.0));
        assert!(matches!(project(&cam, &Vec3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn bearing_examples() {
        let cam = Camera::new(100.0, 100.0, 50.0, 50.0, 200, 100).unwrap();
        assert_abs_diff_eq!(pixel_bearing(&cam, 50.0, 50.0), Vec3::z(), epsilon = 1e-15);
        let h = 0.5f64.sqrt();
        assert_abs_diff_eq!(pixel_bearing(&cam, 150.0, 50.0), Vec3::new(h, 0.0, h), epsilon = 1e-12);
        let p = Vec3::new(0.3, -0.4, 2.5);
        let (u, v, _) = project(&cam, &p).unwrap();
        assert!(pixel_bearing(&cam, u, v).cross(&p.normalize()).norm() < 1e-9);
    }

    #[test]
    fn rotation_error_examples() {
        let q = Quat::from_axis_angle(Vec3::new(0.2, 1.0, -0.4), 1.1);
        for sym in [SymmetryTag::None, SymmetryTag::TwoFold, SymmetryTag::FourFold, SymmetryTag::Infinite] {
            assert!(rotation_error_deg(&q, &q, sym) < 1e-6);
        }
        let r90 = vertical_rotation(PI / 2.0);
        assert!(rotation_error_deg(&r90, &Quat::IDENTITY, SymmetryTag::FourFold) < 1e-6);
        assert_abs_diff_eq!(rotation_error_deg(&r90, &Quat::IDENTITY, SymmetryTag::TwoFold), 90.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rotation_error_deg(&r90, &Quat::IDENTITY, SymmetryTag::None), 90.0, epsilon = 1e-9);
        assert!(rotation_error_deg(&r90, &Quat::IDENTITY, SymmetryTag::Infinite) < 1e-6);
    }

    #[test]
    fn correctness_thresholds() {
        let gt = pose_at(Vec3::new(0.1, 0.2, 3.0));
        assert!(pose_is_correct(&gt, &gt, SymmetryTag::None));

        let mut pred = pose_at(gt.translation() + Vec3::new(0.19, 0.0, 0.0));
        pred.q = Quat::from_axis_angle(Vec3::x(), 19f64.to_radians());
        pred.s = Vec3::new(1.19, 1.19, 1.19);
        assert!(pose_is_correct(&pred, &gt, SymmetryTag::None));

        let pred = pose_at(gt.translation() + Vec3::new(0.0, 0.21, 0.0));
        assert!(!pose_is_correct(&pred, &gt, SymmetryTag::None));

        let mut pred = gt;
        pred.s.y = 1.2001;
        assert!(!pose_is_correct(&pred, &gt, SymmetryTag::None));
        pred.s.y = 0.7;
        assert!(!pose_is_correct(&pred, &gt, SymmetryTag::None), "per-axis deviation below");
        let e = PoseErrors { translation: 0.2, rotation_deg: 0.0, scale: 0.0 };
        assert!(!e.within(&Thresholds::default()), "strict inequality");
    }

    #[test]
    fn serde_layout() {
        let p = Pose::new(2.0, 0.1, 0.2, Quat::IDENTITY, Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let v = serde_json::to_value(p).unwrap();
        assert_eq!(v["quat"], serde_json::json!([1.0, 0.0, 0.0, 0.0]));
        assert_eq!(v["scale"], serde_json::json!([1.0, 2.0, 3.0]));
        assert_eq!(v["d"], serde_json::json!(2.0));
        let back: Pose = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
