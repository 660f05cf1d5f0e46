//! SE(3) rigid-transform algebra, camera projection, frustum construction,
//! point-set alignment, and pose interpolation.
//!
//! All types here are immutable after construction and all operations are
//! pure functions.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("interpolation time {t} outside [{t0}, {t1}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },
    #[error("interpolation interval {0} s is below 1e-9 s")]
    DegenerateInterval(f64),
    #[error("point set alignment needs at least 3 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("point configuration is degenerate (collinear or coincident)")]
    DegenerateConfiguration,
}

/// Rigid-body transform: unit quaternion rotation plus translation.
///
/// The quaternion is kept canonical (w >= 0) and renormalized after every
/// operation so pose equality tests are well-defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonicalize(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_parts(qw: f64, qx: f64, qy: f64, qz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        // new_unchecked defers normalization to `canonicalize`, which skips
        // it for already-unit input so decode/encode round trips are exact.
        let q = UnitQuaternion::new_unchecked(Quaternion::new(qw, qx, qy, qz));
        Self::new(q, Vector3::new(tx, ty, tz))
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let q = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        Self::new(q, Vector3::zeros())
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Quaternion components in (w, x, y, z) order followed by translation.
    pub fn coeffs(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            q.w,
            q.i,
            q.j,
            q.k,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    /// Applies `other` then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose::new(rot_inv, -(rot_inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle of `self.inverse() * other` plus translation distance.
    pub fn delta_to(&self, other: &Pose) -> (f64, f64) {
        let d = self.inverse().compose(other);
        (d.rotation.angle(), d.translation.norm())
    }

    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        let (ang, dist) = self.delta_to(other);
        ang <= tol && dist <= tol
    }
}

fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let mut raw = q.into_inner();
    // Renormalizing an already-unit quaternion can still perturb the last
    // ulp; skip it so canonicalization is idempotent (codec round trips
    // must be exact).
    if (raw.norm_squared() - 1.0).abs() > 1e-12 {
        raw = raw.normalize();
    }
    if raw.w < 0.0 {
        raw = -raw;
    }
    UnitQuaternion::new_unchecked(raw)
}

/// Translation lerped, rotation slerped along the shortest arc.
pub fn interpolate(p0: &Pose, t0: f64, p1: &Pose, t1: f64, t: f64) -> Result<Pose, GeomError> {
    if t1 - t0 < 1e-9 {
        return Err(GeomError::DegenerateInterval(t1 - t0));
    }
    if t < t0 || t > t1 {
        return Err(GeomError::OutOfRange { t, t0, t1 });
    }
    let alpha = (t - t0) / (t1 - t0);
    let q0 = p0.rotation;
    let q1 = p1.rotation;
    // Near-identical rotations fall back to nlerp, avoiding sin(0) division.
    let rot = match q0.try_slerp(&q1, alpha, 1e-9) {
        Some(q) => q,
        None => {
            let a = q0.into_inner();
            let b = q1.into_inner();
            let b = if a.dot(&b) < 0.0 { -b } else { b };
            UnitQuaternion::from_quaternion(a.lerp(&b, alpha))
        }
    };
    let trans = p0.translation.lerp(&p1.translation, alpha);
    Ok(Pose::new(rot, trans))
}

/// Pinhole camera with a valid-depth range. Units: pixels and meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl CameraIntrinsics {
    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.depth_min > 0.0
            && self.depth_min < self.depth_max
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 320.0,
            fy: 320.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            depth_min: 0.3,
            depth_max: 10.0,
        }
    }
}

/// Calibrated relative pose between two rigidly mounted cameras.
#[derive(Debug, Clone, Copy)]
pub struct RigidExtrinsics {
    pub relative_pose: Pose,
    pub weight: f64,
}

/// Projects a world point into the image.
///
/// Returns pixel coordinates and camera-frame depth when the depth is in
/// `[depth_min, depth_max]` and the pixel lies in `[0,width) x [0,height)`,
/// otherwise `None`.
pub fn project(
    k: &CameraIntrinsics,
    cam_from_world: &Pose,
    point_w: &Vector3<f64>,
) -> Option<(f64, f64, f64)> {
    let p = cam_from_world.transform_point(point_w);
    if p.z < k.depth_min || p.z > k.depth_max {
        return None;
    }
    let u = k.fx * p.x / p.z + k.cx;
    let v = k.fy * p.y / p.z + k.cy;
    if u < 0.0 || u >= k.width as f64 || v < 0.0 || v >= k.height as f64 {
        return None;
    }
    Some((u, v, p.z))
}

/// Camera-frame ray direction (z = 1) through a pixel.
pub fn unproject_ray(k: &CameraIntrinsics, u: f64, v: f64) -> Vector3<f64> {
    Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
}

/// The 4 near-plane and 4 far-plane corners of the view frustum in world
/// coordinates. Near corners come first.
pub fn frustum_vertices(k: &CameraIntrinsics, world_from_cam: &Pose) -> [Vector3<f64>; 8] {
    let corners = [
        (0.0, 0.0),
        (k.width as f64, 0.0),
        (k.width as f64, k.height as f64),
        (0.0, k.height as f64),
    ];
    let mut out = [Vector3::zeros(); 8];
    for (i, &(u, v)) in corners.iter().enumerate() {
        let ray = unproject_ray(k, u, v);
        out[i] = world_from_cam.transform_point(&(ray * k.depth_min));
        out[i + 4] = world_from_cam.transform_point(&(ray * k.depth_max));
    }
    out
}

/// Result of a closed-form least-squares alignment of two point sets.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub transform: Pose,
    pub scale: f64,
    pub rms: f64,
}

/// Finds (s, R, t) minimizing sum ||dst_i - (s * R * src_i + t)||^2.
///
/// Scale is fixed to 1 when `with_scale` is false. Umeyama's closed form.
pub fn align_point_sets(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Alignment, GeomError> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(GeomError::TooFewPoints(n.min(dst.len())));
    }
    let inv_n = 1.0 / n as f64;
    let src_mean: Vector3<f64> = src.iter().sum::<Vector3<f64>>() * inv_n;
    let dst_mean: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() * inv_n;

    let mut cov = Matrix3::zeros();
    let mut src_var = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - src_mean;
        let dc = d - dst_mean;
        cov += dc * sc.transpose();
        src_var += sc.norm_squared();
    }
    cov *= inv_n;
    src_var *= inv_n;
    if src_var < 1e-18 {
        return Err(GeomError::DegenerateConfiguration);
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(GeomError::DegenerateConfiguration)?;
    let v_t = svd.v_t.ok_or(GeomError::DegenerateConfiguration)?;
    // Collinear points (rank 1) leave the roll about the line unobservable,
    // but the SVD rotation still maps line onto line and minimizes the rms,
    // so only coincident point sets (caught by src_var above) are rejected.
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_diag.z = -1.0;
    }
    let rot_mat = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot_mat));

    let scale = if with_scale {
        (svd.singular_values.component_mul(&s_diag)).sum() / src_var
    } else {
        1.0
    };
    let translation = dst_mean - scale * (rot_mat * src_mean);
    let transform = Pose::new(rotation, translation);

    let mut sq_sum = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let mapped = scale * (rot_mat * s) + translation;
        sq_sum += (d - mapped).norm_squared();
    }
    Ok(Alignment {
        transform,
        scale,
        rms: (sq_sum * inv_n).sqrt(),
    })
}
