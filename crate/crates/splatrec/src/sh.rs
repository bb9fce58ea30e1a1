//! Real spherical-harmonics basis up to degree 3 for view-dependent color.
//!
//! Coefficient layout per channel follows the common splatting convention:
//! index 0 is the DC band, 1..4 degree 1, 4..9 degree 2, 9..16 degree 3.
//! Rendered color is `max(0, Σ c_k·Y_k(dir) + 0.5)`.

use crate::real::{c, Real};
use nalgebra::Vector3;

pub const SH_DEGREE: usize = 3;
pub const SH_COEFFS: usize = (SH_DEGREE + 1) * (SH_DEGREE + 1); // 16 per channel
pub const SH_CHANNELS: usize = 3;
pub const SH_TOTAL: usize = SH_COEFFS * SH_CHANNELS; // 48 scalars per surfel

const C0: f64 = 0.28209479177387814;
const C1: f64 = 0.4886025119029199;
const C2_0: f64 = 1.0925484305920792;
const C2_1: f64 = 0.31539156525252005;
const C2_2: f64 = 0.5462742152960396;
const C3_0: f64 = 0.5900435899266435;
const C3_1: f64 = 2.890611442640554;
const C3_2: f64 = 0.4570457994644658;
const C3_3: f64 = 0.3731763325901154;
const C3_4: f64 = 1.445305721320277;

/// Basis values at a unit direction.
pub fn sh_basis<T: Real>(dir: &Vector3<T>) -> [T; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (x2, y2, z2) = (x * x, y * y, z * z);
    let mut b = [T::zero(); SH_COEFFS];
    b[0] = c(C0);
    b[1] = -c::<T>(C1) * y;
    b[2] = c::<T>(C1) * z;
    b[3] = -c::<T>(C1) * x;
    b[4] = c::<T>(C2_0) * x * y;
    b[5] = -c::<T>(C2_0) * y * z;
    b[6] = c::<T>(C2_1) * (c::<T>(3.0) * z2 - T::one());
    b[7] = -c::<T>(C2_0) * x * z;
    b[8] = c::<T>(C2_2) * (x2 - y2);
    b[9] = -c::<T>(C3_0) * y * (c::<T>(3.0) * x2 - y2);
    b[10] = c::<T>(C3_1) * x * y * z;
    b[11] = -c::<T>(C3_2) * y * (c::<T>(5.0) * z2 - T::one());
    b[12] = c::<T>(C3_3) * z * (c::<T>(5.0) * z2 - c::<T>(3.0));
    b[13] = -c::<T>(C3_2) * x * (c::<T>(5.0) * z2 - T::one());
    b[14] = c::<T>(C3_4) * z * (x2 - y2);
    b[15] = -c::<T>(C3_0) * x * (x2 - c::<T>(3.0) * y2);
    b
}

/// Basis gradient ∂Y_k/∂dir at a unit direction (treating dir as free 3-vector).
pub fn sh_basis_grad<T: Real>(dir: &Vector3<T>) -> [Vector3<T>; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (x2, y2, z2) = (x * x, y * y, z * z);
    let z3 = T::zero();
    let mut g = [Vector3::new(z3, z3, z3); SH_COEFFS];
    g[1] = Vector3::new(T::zero(), -c::<T>(C1), T::zero());
    g[2] = Vector3::new(T::zero(), T::zero(), c::<T>(C1));
    g[3] = Vector3::new(-c::<T>(C1), T::zero(), T::zero());
    g[4] = Vector3::new(c::<T>(C2_0) * y, c::<T>(C2_0) * x, T::zero());
    g[5] = Vector3::new(T::zero(), -c::<T>(C2_0) * z, -c::<T>(C2_0) * y);
    g[6] = Vector3::new(T::zero(), T::zero(), c::<T>(C2_1) * c::<T>(6.0) * z);
    g[7] = Vector3::new(-c::<T>(C2_0) * z, T::zero(), -c::<T>(C2_0) * x);
    g[8] = Vector3::new(c::<T>(C2_2) * c::<T>(2.0) * x, -c::<T>(C2_2) * c::<T>(2.0) * y, T::zero());
    g[9] = Vector3::new(
        -c::<T>(C3_0) * c::<T>(6.0) * x * y,
        -c::<T>(C3_0) * (c::<T>(3.0) * x2 - c::<T>(3.0) * y2),
        T::zero(),
    );
    g[10] = Vector3::new(c::<T>(C3_1) * y * z, c::<T>(C3_1) * x * z, c::<T>(C3_1) * x * y);
    g[11] = Vector3::new(
        T::zero(),
        -c::<T>(C3_2) * (c::<T>(5.0) * z2 - T::one()),
        -c::<T>(C3_2) * y * c::<T>(10.0) * z,
    );
    g[12] = Vector3::new(
        T::zero(),
        T::zero(),
        c::<T>(C3_3) * (c::<T>(15.0) * z2 - c::<T>(3.0)),
    );
    g[13] = Vector3::new(
        -c::<T>(C3_2) * (c::<T>(5.0) * z2 - T::one()),
        T::zero(),
        -c::<T>(C3_2) * x * c::<T>(10.0) * z,
    );
    g[14] = Vector3::new(
        c::<T>(C3_4) * c::<T>(2.0) * x * z,
        -c::<T>(C3_4) * c::<T>(2.0) * y * z,
        c::<T>(C3_4) * (x2 - y2),
    );
    g[15] = Vector3::new(
        -c::<T>(C3_0) * (c::<T>(3.0) * x2 - c::<T>(3.0) * y2),
        c::<T>(C3_0) * c::<T>(6.0) * x * y,
        T::zero(),
    );
    g
}

/// View-dependent RGB from per-channel coefficients (layout: 16 per channel,
/// channel-major). Clamped at zero after the +0.5 DC offset.
pub fn evaluate_sh<T: Real>(sh: &[T], dir: &Vector3<T>) -> [T; 3] {
    debug_assert_eq!(sh.len(), SH_TOTAL);
    let b = sh_basis(dir);
    let half = c::<T>(0.5);
    std::array::from_fn(|ch| {
        let base = ch * SH_COEFFS;
        let mut v = half;
        for k in 0..SH_COEFFS {
            v += sh[base + k] * b[k];
        }
        v.max(T::zero())
    })
}

/// Pullback of `evaluate_sh`: accumulates dL/dsh and returns dL/ddir
/// (raw 3-vector; the caller handles normalization of the direction).
pub fn evaluate_sh_backward<T: Real>(
    sh: &[T],
    dir: &Vector3<T>,
    d_rgb: &[T; 3],
    d_sh: &mut [T],
) -> Vector3<T> {
    debug_assert_eq!(sh.len(), SH_TOTAL);
    let b = sh_basis(dir);
    let gb = sh_basis_grad(dir);
    let half = c::<T>(0.5);
    let mut d_dir = Vector3::zeros();
    for ch in 0..3 {
        let base = ch * SH_COEFFS;
        let mut v = half;
        for k in 0..SH_COEFFS {
            v += sh[base + k] * b[k];
        }
        if v <= T::zero() {
            continue; // clamp gate
        }
        let up = d_rgb[ch];
        for k in 0..SH_COEFFS {
            d_sh[base + k] += up * b[k];
            d_dir += gb[k] * (up * sh[base + k]);
        }
    }
    d_dir
}

/// Coefficient count for a given degree; used by tests and the PLY layout.
pub fn coeffs_for_degree(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// DC coefficient that renders to `color` under degree-0 evaluation.
pub fn dc_from_color<T: Real>(color: T) -> T {
    (color - c::<T>(0.5)) / c::<T>(C0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vector3<f64>) -> Vector3<f64> {
        v / v.norm()
    }

    #[test]
    fn dc_only_is_view_independent() {
        let mut sh = [0.0f64; SH_TOTAL];
        sh[0] = dc_from_color(0.8);
        sh[SH_COEFFS] = dc_from_color(0.2);
        sh[2 * SH_COEFFS] = dc_from_color(0.5);
        for dir in [
            Vector3::new(0.0, 0.0, 1.0),
            unit(Vector3::new(1.0, 2.0, -0.5)),
        ] {
            let rgb = evaluate_sh(&sh, &dir);
            assert!((rgb[0] - 0.8).abs() < 1e-12);
            assert!((rgb[1] - 0.2).abs() < 1e-12);
            assert!((rgb[2] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coefficients_give_dc_offset() {
        let sh = [0.0f64; SH_TOTAL];
        let rgb = evaluate_sh(&sh, &Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(rgb, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn degree1_z_coefficient_antisymmetric() {
        // Closed form: Y_1^0 = C1·z, so flipping the view along z changes the
        // channel by 2·c·C1.
        let mut sh = [0.0f64; SH_TOTAL];
        let coef = 0.3;
        sh[2] = coef;
        let up = evaluate_sh(&sh, &Vector3::new(0.0, 0.0, 1.0));
        let down = evaluate_sh(&sh, &Vector3::new(0.0, 0.0, -1.0));
        let expected = 2.0 * coef * C1;
        assert!((up[0] - down[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn basis_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let dir = unit(Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ));
            let g = sh_basis_grad(&dir);
            let h = 1e-6;
            for axis in 0..3 {
                let mut dp = dir;
                let mut dm = dir;
                dp[axis] += h;
                dm[axis] -= h;
                let bp = sh_basis(&dp);
                let bm = sh_basis(&dm);
                for k in 0..SH_COEFFS {
                    let fd = (bp[k] - bm[k]) / (2.0 * h);
                    assert!(
                        (g[k][axis] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                        "basis {k} axis {axis}: {} vs {fd}",
                        g[k][axis]
                    );
                }
            }
        }
    }

    #[test]
    fn eval_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut sh = [0.0f64; SH_TOTAL];
        for v in sh.iter_mut() {
            *v = rng.gen::<f64>() * 0.4 - 0.2;
        }
        sh[0] += 1.0; // keep channels away from the clamp
        sh[SH_COEFFS] += 1.0;
        sh[2 * SH_COEFFS] += 1.0;
        let dir = unit(Vector3::new(0.3, -0.7, 0.64));
        let up = [0.7, -0.4, 0.25];
        let mut d_sh = [0.0f64; SH_TOTAL];
        let d_dir = evaluate_sh_backward(&sh, &dir, &up, &mut d_sh);

        let f = |sh: &[f64], dir: &Vector3<f64>| {
            let rgb = evaluate_sh(sh, dir);
            rgb[0] * up[0] + rgb[1] * up[1] + rgb[2] * up[2]
        };
        let h = 1e-6;
        for i in [0, 2, 5, 17, 30, 47] {
            let mut p = sh;
            let mut m = sh;
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p, &dir) - f(&m, &dir)) / (2.0 * h);
            assert!((d_sh[i] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for axis in 0..3 {
            let mut dp = dir;
            let mut dm = dir;
            dp[axis] += h;
            dm[axis] -= h;
            let fd = (f(&sh, &dp) - f(&sh, &dm)) / (2.0 * h);
            assert!((d_dir[axis] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
