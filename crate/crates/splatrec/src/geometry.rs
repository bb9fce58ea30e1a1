//! Quaternions, rigid/similarity transforms, pinhole projection and
//! Umeyama alignment. Everything here is a pure function; all rotation
//! state is kept unit-norm, scalar-first (w, x, y, z).

use crate::error::{Error, Result};
use crate::real::{c, Real};
use nalgebra::{Matrix3, Vector3};

/// Unit quaternion, scalar-first convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quaternion<T> {
    pub fn identity() -> Self {
        Self {
            w: T::one(),
            x: T::zero(),
            y: T::zero(),
            z: T::zero(),
        }
    }

    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }.normalized()
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n <= T::zero() {
            return Self::identity();
        }
        Self {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn conjugate(self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product.
    pub fn mul(self, r: Self) -> Self {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (r.w, r.x, r.y, r.z);
        Self {
            w: w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            x: w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            y: w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            z: w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        }
        .normalized()
    }

    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        quat_to_matrix(self) * v
    }

    /// Axis-angle exponential, ω in radians.
    pub fn from_axis_angle(omega: &Vector3<T>) -> Self {
        let theta = omega.norm();
        if theta < c(1e-12) {
            // First-order expansion keeps the map smooth through zero.
            return Self::new(T::one(), omega.x / c(2.0), omega.y / c(2.0), omega.z / c(2.0));
        }
        let half = theta / c(2.0);
        let s = half.sin() / theta;
        Self::new(half.cos(), omega.x * s, omega.y * s, omega.z * s)
    }

    /// Rotation matrix → quaternion (Shepperd's method), w ≥ 0 canonical.
    pub fn from_matrix(m: &Matrix3<T>) -> Self {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > T::zero() {
            let s = (tr + T::one()).sqrt() * c(2.0);
            Self {
                w: s / c(4.0),
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (T::one() + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * c(2.0);
            Self {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: s / c(4.0),
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (T::one() + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * c(2.0);
            Self {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: s / c(4.0),
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (T::one() + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * c(2.0);
            Self {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: s / c(4.0),
            }
        };
        let q = q.normalized();
        if q.w < T::zero() {
            Self {
                w: -q.w,
                x: -q.x,
                y: -q.y,
                z: -q.z,
            }
        } else {
            q
        }
    }

    pub fn cast<U: Real>(&self) -> Quaternion<U> {
        Quaternion {
            w: c(self.w.to_f64c()),
            x: c(self.x.to_f64c()),
            y: c(self.y.to_f64c()),
            z: c(self.z.to_f64c()),
        }
    }
}

/// Rotation matrix of a quaternion. The input is renormalized first, so
/// the result is orthonormal with determinant +1 for any nonzero input.
pub fn quat_to_matrix<T: Real>(q: &Quaternion<T>) -> Matrix3<T> {
    let q = q.normalized();
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let two = c::<T>(2.0);
    Matrix3::new(
        T::one() - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        T::one() - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        T::one() - two * (x * x + y * y),
    )
}

/// Pullback of `quat_to_matrix` composed with the renormalization: given
/// dL/dR, returns dL/dq_raw for the unnormalized quaternion components.
pub fn quat_to_matrix_backward<T: Real>(q_raw: &Quaternion<T>, d_mat: &Matrix3<T>) -> [T; 4] {
    let n = q_raw.norm();
    let q = q_raw.normalized();
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let two = c::<T>(2.0);
    // dR/d(unit q) assembled entry by entry.
    let mut g = [T::zero(); 4]; // gradient wrt unit quaternion
    let mut acc = |dw: T, dx: T, dy: T, dz: T, up: T| {
        g[0] += dw * up;
        g[1] += dx * up;
        g[2] += dy * up;
        g[3] += dz * up;
    };
    acc(T::zero(), T::zero(), -two * two * y, -two * two * z, d_mat[(0, 0)]);
    acc(-two * z, two * y, two * x, -two * w, d_mat[(0, 1)]);
    acc(two * y, two * z, two * w, two * x, d_mat[(0, 2)]);
    acc(two * z, two * y, two * x, two * w, d_mat[(1, 0)]);
    acc(T::zero(), -two * two * x, T::zero(), -two * two * z, d_mat[(1, 1)]);
    acc(-two * x, -two * w, two * z, two * y, d_mat[(1, 2)]);
    acc(-two * y, two * z, -two * w, two * x, d_mat[(2, 0)]);
    acc(two * x, two * w, two * z, two * y, d_mat[(2, 1)]);
    acc(T::zero(), -two * two * x, -two * two * y, T::zero(), d_mat[(2, 2)]);
    // Normalization pullback: d(unit)/d(raw) = (I - uuᵀ)/n.
    let u = [w, x, y, z];
    let dot = (0..4).map(|i| g[i] * u[i]).sum::<T>();
    std::array::from_fn(|i| (g[i] - u[i] * dot) / n)
}

/// World-to-camera rigid transform: x_cam = R·x_world + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    pub rotation: Quaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Quaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        quat_to_matrix(&self.rotation)
    }

    pub fn transform(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.conjugate();
        let t = -(quat_to_matrix(&rt) * self.translation);
        Self {
            rotation: rt,
            translation: t,
        }
    }

    pub fn compose(&self, other: &Self) -> Self {
        // (self ∘ other)(x) = self(other(x))
        Self {
            rotation: self.rotation.mul(other.rotation),
            translation: self.rotation_matrix() * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates: -Rᵀ·t.
    pub fn camera_center(&self) -> Vector3<T> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            rotation: self.rotation.cast(),
            translation: self.translation.map(|v| c(v.to_f64c())),
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        if fx <= T::zero() || fy <= T::zero() {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        if cx < T::zero() || cx >= T::from_usize(width).unwrap() {
            return Err(Error::InvalidInput("cx out of range".into()));
        }
        if cy < T::zero() || cy >= T::from_usize(height).unwrap() {
            return Err(Error::InvalidInput("cy out of range".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics centered on the image with a single focal length.
    pub fn centered(f: T, width: usize, height: usize) -> Self {
        Self {
            fx: f,
            fy: f,
            cx: T::from_usize(width).unwrap() / c(2.0),
            cy: T::from_usize(height).unwrap() / c(2.0),
            width,
            height,
        }
    }

    pub fn cast<U: Real>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: c(self.fx.to_f64c()),
            fy: c(self.fy.to_f64c()),
            cx: c(self.cx.to_f64c()),
            cy: c(self.cy.to_f64c()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Similarity transform: x ↦ scale·R·x + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3<T> {
    pub scale: T,
    pub rotation: Quaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Sim3<T> {
    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            rotation: Quaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn transform(&self, p: &Vector3<T>) -> Vector3<T> {
        quat_to_matrix(&self.rotation) * p * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.conjugate();
        let s = T::one() / self.scale;
        Self {
            scale: s,
            rotation: rt,
            translation: -(quat_to_matrix(&rt) * self.translation) * s,
        }
    }
}

/// Projection of a world point to normalized pixel coordinates ∈ [0,1]²
/// plus camera-space depth. The flag is false when the point lies at or
/// behind the camera plane (z ≤ 1e-8); the numeric output is still
/// returned so the caller can decide what to drop.
pub fn project<T: Real>(
    point: &Vector3<T>,
    pose: &Pose<T>,
    k: &Intrinsics<T>,
) -> (Vector3<T>, bool) {
    let pc = pose.transform(point);
    let in_front = pc.z > T::EPS_BEHIND;
    let z = if in_front { pc.z } else { T::EPS_BEHIND };
    let u = (k.fx * pc.x / z + k.cx) / T::from_usize(k.width).unwrap();
    let v = (k.fy * pc.y / z + k.cy) / T::from_usize(k.height).unwrap();
    (Vector3::new(u, v, pc.z), in_front)
}

/// Back-projection of normalized pixel coordinates and camera-space depth
/// to a world point.
pub fn backproject<T: Real>(
    pixel: (T, T),
    depth: T,
    pose: &Pose<T>,
    k: &Intrinsics<T>,
) -> Result<Vector3<T>> {
    if depth <= T::zero() {
        return Err(Error::InvalidInput("backproject: depth must be > 0".into()));
    }
    Ok(backproject_unchecked(pixel, depth, pose, k))
}

pub fn backproject_unchecked<T: Real>(
    pixel: (T, T),
    depth: T,
    pose: &Pose<T>,
    k: &Intrinsics<T>,
) -> Vector3<T> {
    let cam = backproject_camera(pixel, depth, k);
    let inv = pose.inverse();
    inv.transform(&cam)
}

/// Camera-frame point of a normalized pixel at the given depth.
pub fn backproject_camera<T: Real>(pixel: (T, T), depth: T, k: &Intrinsics<T>) -> Vector3<T> {
    let px = pixel.0 * T::from_usize(k.width).unwrap();
    let py = pixel.1 * T::from_usize(k.height).unwrap();
    Vector3::new(
        (px - k.cx) / k.fx * depth,
        (py - k.cy) / k.fy * depth,
        depth,
    )
}

/// Least-squares similarity (or rigid, when `with_scale` is off) mapping
/// src onto dst: minimizes Σ‖dst − s·R·src − t‖².
pub fn umeyama_align<T: Real>(
    src: &[Vector3<T>],
    dst: &[Vector3<T>],
    with_scale: bool,
) -> Result<Sim3<T>> {
    if src.len() != dst.len() {
        return Err(Error::InvalidInput(format!(
            "umeyama: src has {} points, dst has {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "umeyama: need at least 3 point pairs, got {}",
            src.len()
        )));
    }
    let n = T::from_usize(src.len()).unwrap();
    let mean_src = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mean_dst = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;

    let mut cov = Matrix3::<T>::zeros();
    let mut var_src = T::zero();
    for (s, d) in src.iter().zip(dst.iter()) {
        let sc = s - mean_src;
        let dc = d - mean_dst;
        cov += dc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov /= n;
    var_src /= n;
    if var_src <= c(1e-24) {
        return Err(Error::Degenerate("umeyama: coincident source points".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("umeyama: svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Degenerate("umeyama: svd failed".into()))?;
    let sing = svd.singular_values;
    if sing[1] <= sing[0] * c(1e-9) {
        return Err(Error::Degenerate(
            "umeyama: collinear points (rank-deficient covariance)".into(),
        ));
    }

    let mut s_diag = Vector3::new(T::one(), T::one(), T::one());
    if (u.determinant() * vt.determinant()) < T::zero() {
        s_diag.z = -T::one();
    }
    let rot = u * Matrix3::from_diagonal(&s_diag) * vt;
    let scale = if with_scale {
        (sing[0] * s_diag.x + sing[1] * s_diag.y + sing[2] * s_diag.z) / var_src
    } else {
        T::one()
    };
    let t = mean_dst - rot * mean_src * scale;
    Ok(Sim3 {
        scale,
        rotation: Quaternion::from_matrix(&rot),
        translation: t,
    })
}

/// Left-multiplicative manifold update: rotation ← exp([ω]×)·R, with ω the
/// first three components of `delta` and the translation increment the last
/// three. The result is renormalized.
pub fn pose_retract<T: Real>(pose: &Pose<T>, delta: &[T; 6]) -> Pose<T> {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let dq = Quaternion::from_axis_angle(&omega);
    Pose {
        rotation: dq.mul(pose.rotation),
        translation: pose.translation + Vector3::new(delta[3], delta[4], delta[5]),
    }
}

/// Skew-symmetric cross-product matrix [v]×.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_quat(rng: &mut ChaCha8Rng) -> Quaternion<f64> {
        Quaternion::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        )
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
        Pose::new(
            random_unit_quat(rng),
            Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5),
        )
    }

    #[test]
    fn quat_identity_maps_to_identity_matrix() {
        let m = quat_to_matrix(&Quaternion::<f64>::identity());
        assert_relative_eq!(m, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn quat_z_rotation_90deg() {
        let half = std::f64::consts::FRAC_PI_4;
        let q = Quaternion::new(half.cos(), 0.0, 0.0, half.sin());
        let v = quat_to_matrix(&q) * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(v, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn quat_matrices_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q = random_unit_quat(&mut rng);
            let r = quat_to_matrix(&q);
            let err = (r.transpose() * r - Matrix3::identity()).norm();
            assert!(err < 1e-6, "RᵀR deviates by {err}");
            assert!((r.determinant() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn quat_double_cover() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let q = random_unit_quat(&mut rng);
            let neg = Quaternion {
                w: -q.w,
                x: -q.x,
                y: -q.y,
                z: -q.z,
            };
            assert_relative_eq!(quat_to_matrix(&q), quat_to_matrix(&neg), epsilon = 1e-12);
        }
    }

    #[test]
    fn quat_matrix_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let q = random_unit_quat(&mut rng);
            let m = quat_to_matrix(&q);
            let q2 = Quaternion::from_matrix(&m);
            let m2 = quat_to_matrix(&q2);
            assert_relative_eq!(m, m2, epsilon = 1e-9);
        }
    }

    #[test]
    fn quat_to_matrix_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let raw = Quaternion {
                w: rng.gen::<f64>() - 0.5,
                x: rng.gen::<f64>() - 0.5,
                y: rng.gen::<f64>() - 0.5,
                z: rng.gen::<f64>() - 0.5,
            };
            if raw.norm() < 0.3 {
                continue;
            }
            let up = Matrix3::from_fn(|_, _| rng.gen::<f64>() - 0.5);
            let analytic = quat_to_matrix_backward(&raw, &up);
            let h = 1e-6;
            for i in 0..4 {
                let mut plus = raw.as_array();
                let mut minus = raw.as_array();
                plus[i] += h;
                minus[i] -= h;
                let f = |a: [f64; 4]| {
                    let m = quat_to_matrix(&Quaternion {
                        w: a[0],
                        x: a[1],
                        y: a[2],
                        z: a[3],
                    });
                    m.component_mul(&up).sum()
                };
                let fd = (f(plus) - f(minus)) / (2.0 * h);
                assert!(
                    (analytic[i] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                    "component {i}: analytic {} vs fd {}",
                    analytic[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn project_optical_axis() {
        let k = Intrinsics::centered(100.0, 100, 100);
        let (uvd, ok) = project(&Vector3::new(0.0, 0.0, 3.5), &Pose::identity(), &k);
        assert!(ok);
        assert_relative_eq!(uvd.x, 0.5, epsilon = 1e-12);
        assert_relative_eq!(uvd.y, 0.5, epsilon = 1e-12);
        assert_relative_eq!(uvd.z, 3.5, epsilon = 1e-12);
    }

    #[test]
    fn project_direct_arithmetic() {
        // camera-space point (1, 0, 2), fx=fy=100, cx=cy=50, W=H=100:
        // u = (100·0.5 + 50)/100 = 1.0
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let (uvd, ok) = project(&Vector3::new(1.0, 0.0, 2.0), &Pose::identity(), &k);
        assert!(ok);
        assert_relative_eq!(uvd.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(uvd.y, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn backproject_optical_axis() {
        let k = Intrinsics::centered(100.0, 100, 100);
        let p = backproject((0.5, 0.5), 1.0, &Pose::identity(), &k).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_rejects_nonpositive_depth() {
        let k = Intrinsics::centered(100.0, 100, 100);
        assert!(backproject((0.5, 0.5), 0.0, &Pose::identity(), &k).is_err());
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = Intrinsics::centered(120.0, 64, 48);
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let pixel = (rng.gen::<f64>(), rng.gen::<f64>());
            let depth = 0.5 + rng.gen::<f64>() * 5.0;
            let world = backproject(pixel, depth, &pose, &k).unwrap();
            let (uvd, ok) = project(&world, &pose, &k);
            assert!(ok);
            assert_relative_eq!(uvd.x, pixel.0, epsilon = 1e-6);
            assert_relative_eq!(uvd.y, pixel.1, epsilon = 1e-6);
            assert_relative_eq!(uvd.z, depth, epsilon = 1e-6);
        }
    }

    #[test]
    fn umeyama_identity() {
        let pts: Vec<_> = (0..5)
            .map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, -(i as f64) * 0.3))
            .collect();
        let s = umeyama_align(&pts, &pts, true).unwrap();
        assert_relative_eq!(s.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.translation.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            quat_to_matrix(&s.rotation),
            Matrix3::identity(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn umeyama_recovers_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q0 = random_unit_quat(&mut rng);
        let r0 = quat_to_matrix(&q0);
        let t0 = Vector3::new(0.4, -1.1, 2.3);
        let src: Vec<_> = (0..20)
            .map(|_| {
                Vector3::new(
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                )
            })
            .collect();
        let dst: Vec<_> = src.iter().map(|p| r0 * p * 2.0 + t0).collect();
        let s = umeyama_align(&src, &dst, true).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-9 * 2.0);
        assert!((quat_to_matrix(&s.rotation) - r0).norm() < 1e-9);
        assert!((s.translation - t0).norm() < 1e-9 * t0.norm().max(1.0));
    }

    #[test]
    fn umeyama_rejects_two_points() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        assert!(umeyama_align(&pts, &pts, true).is_err());
    }

    #[test]
    fn umeyama_rejects_collinear() {
        let src: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let dst = src.clone();
        assert!(matches!(
            umeyama_align(&src, &dst, true),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn retract_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_pose(&mut rng);
        let p2 = pose_retract(&p, &[0.0; 6]);
        assert_relative_eq!(p2.translation, p.translation, epsilon = 1e-15);
        assert!((p2.rotation.w - p.rotation.w).abs() < 1e-15);
    }

    #[test]
    fn retract_closed_form_z_rotation() {
        let p = pose_retract(
            &Pose::<f64>::identity(),
            &[0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0],
        );
        let v = p.rotation_matrix() * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(v, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn retract_small_delta_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let delta: [f64; 6] = std::array::from_fn(|_| (rng.gen::<f64>() - 0.5) * 2e-2);
            let neg: [f64; 6] = std::array::from_fn(|i| -delta[i]);
            let q = pose_retract(&pose_retract(&p, &delta), &neg);
            // exp(-ω)exp(ω) = I exactly; only rounding remains.
            assert!((q.translation - p.translation).norm() < 1e-6);
            let dr = (q.rotation_matrix() - p.rotation_matrix()).norm();
            assert!(dr < 1e-6, "rotation deviates by {dr}");
        }
    }

    #[test]
    fn sim3_inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let s = Sim3 {
                scale: 0.2 + rng.gen::<f64>() * 3.0,
                rotation: random_unit_quat(&mut rng),
                translation: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            };
            let p = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let back = s.inverse().transform(&s.transform(&p));
            assert_relative_eq!(back, p, epsilon = 1e-9);
        }
    }
}
