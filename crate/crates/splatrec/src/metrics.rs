//! Evaluation suite: relative depth error, normal consistency, absolute
//! trajectory error, PSNR and SSIM.

use crate::error::{Error, Result};
use crate::geometry::{umeyama_align, Intrinsics, Pose};
use crate::image::{Image1, Image3};
use crate::real::{c, Real};
use nalgebra::Vector3;

/// Depth comparison input; pixels count only where the ground truth is
/// positive and the mask (when present) is set.
pub struct DepthEval<'a, T> {
    pub pred: &'a Image1<T>,
    pub gt: &'a Image1<T>,
    pub mask: Option<&'a Image1<T>>,
}

impl<'a, T: Real> DepthEval<'a, T> {
    fn valid(&self, i: usize) -> bool {
        self.gt.data[i] > T::zero()
            && self.mask.map(|m| m.data[i] > c(0.5)).unwrap_or(true)
    }
}

/// Mean absolute relative depth error ×100 (table units). With `align`,
/// the prediction is first scaled by median(gt)/median(pred) over the
/// valid set.
pub fn rel_error<T: Real>(eval: &DepthEval<T>, align: bool) -> Result<T> {
    if !eval.pred.same_size(eval.gt) {
        return Err(Error::InvalidInput("rel_error: size mismatch".into()));
    }
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for i in 0..eval.gt.data.len() {
        if eval.valid(i) {
            preds.push(eval.pred.data[i]);
            gts.push(eval.gt.data[i]);
        }
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("rel_error: no valid pixels".into()));
    }
    let scale = if align {
        let med = |v: &[T]| {
            let mut s = v.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            s[s.len() / 2]
        };
        let mp = med(&preds);
        if mp <= T::zero() {
            return Err(Error::Degenerate("rel_error: non-positive median prediction".into()));
        }
        med(&gts) / mp
    } else {
        T::one()
    };
    let n = T::from_usize(preds.len()).unwrap();
    let mut sum = T::zero();
    for (p, g) in preds.iter().zip(&gts) {
        sum += ((*p * scale - *g) / *g).abs();
    }
    Ok(sum / n * c(100.0))
}

/// Mean clamped cosine between predicted normals and ground-truth normals
/// derived from the gt depth map by central differences, both oriented
/// toward the camera. Evaluated on interior pixels where both inputs are
/// valid.
pub fn normal_consistency<T: Real>(
    pred_normals: &Image3<T>,
    gt_depth: &Image1<T>,
    k: &Intrinsics<T>,
) -> Result<T> {
    if pred_normals.width != gt_depth.width || pred_normals.height != gt_depth.height {
        return Err(Error::InvalidInput("normal_consistency: size mismatch".into()));
    }
    let (w, h) = (gt_depth.width, gt_depth.height);
    let dirvec = |x: usize, y: usize| {
        Vector3::new(
            (T::from_usize(x).unwrap() + c(0.5) - k.cx) / k.fx,
            (T::from_usize(y).unwrap() + c(0.5) - k.cy) / k.fy,
            T::one(),
        )
    };
    let point = |x: usize, y: usize| dirvec(x, y) * gt_depth.get(x, y)[0];
    let mut sum = T::zero();
    let mut count = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let ok = gt_depth.get(x, y)[0] > T::zero()
                && gt_depth.get(x - 1, y)[0] > T::zero()
                && gt_depth.get(x + 1, y)[0] > T::zero()
                && gt_depth.get(x, y - 1)[0] > T::zero()
                && gt_depth.get(x, y + 1)[0] > T::zero();
            if !ok {
                continue;
            }
            let pn = pred_normals.get(x, y);
            let pred = Vector3::new(pn[0], pn[1], pn[2]);
            if pred.norm() < c(1e-12) {
                continue;
            }
            let half = c::<T>(0.5);
            let ddx = (point(x + 1, y) - point(x - 1, y)) * half;
            let ddy = (point(x, y + 1) - point(x, y - 1)) * half;
            let cvec = ddx.cross(&ddy);
            if cvec.norm() < c(1e-20) {
                continue;
            }
            // Orient both toward the camera (negative z in camera space).
            let mut gt_n = cvec.normalize();
            if gt_n.z > T::zero() {
                gt_n = -gt_n;
            }
            let mut pr_n = pred.normalize();
            if pr_n.z > T::zero() {
                pr_n = -pr_n;
            }
            sum += pr_n.dot(&gt_n).max(T::zero());
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("normal_consistency: empty overlap".into()));
    }
    Ok(sum / T::from_usize(count).unwrap())
}

/// Trajectory comparison input: per-view camera centers.
pub struct TrajectoryEval<T> {
    pub estimated: Vec<Vector3<T>>,
    pub reference: Vec<Vector3<T>>,
}

impl<T: Real> TrajectoryEval<T> {
    pub fn from_poses(estimated: &[Pose<T>], reference: &[Pose<T>]) -> Self {
        Self {
            estimated: estimated.iter().map(|p| p.camera_center()).collect(),
            reference: reference.iter().map(|p| p.camera_center()).collect(),
        }
    }
}

/// Absolute trajectory error: RMSE of camera-center differences after a
/// similarity (Umeyama) alignment of estimated onto reference.
pub fn ate<T: Real>(traj: &TrajectoryEval<T>) -> Result<T> {
    if traj.estimated.len() != traj.reference.len() {
        return Err(Error::InvalidInput("ate: trajectory length mismatch".into()));
    }
    if traj.estimated.len() < 3 {
        return Err(Error::InvalidInput("ate: need at least 3 views".into()));
    }
    let sim = umeyama_align(&traj.estimated, &traj.reference, true)?;
    let n = T::from_usize(traj.estimated.len()).unwrap();
    let mut sq = T::zero();
    for (e, r) in traj.estimated.iter().zip(&traj.reference) {
        sq += (sim.transform(e) - r).norm_squared();
    }
    Ok((sq / n).sqrt())
}

/// PSNR in dB (capped at 100 when MSE < 1e-10) and mean SSIM.
pub fn psnr_ssim<T: Real>(pred: &Image3<T>, gt: &Image3<T>) -> Result<(T, T)> {
    if !pred.same_size(gt) {
        return Err(Error::InvalidInput("psnr_ssim: size mismatch".into()));
    }
    let n = T::from_usize(pred.data.len()).unwrap();
    let mut mse = T::zero();
    for (p, g) in pred.data.iter().zip(&gt.data) {
        let d = *p - *g;
        mse += d * d;
    }
    mse /= n;
    let psnr = if mse < c(1e-10) {
        c(100.0)
    } else {
        c::<T>(10.0) * (T::one() / mse).log10()
    };
    let (ssim_val, _) = crate::losses::ssim(pred, gt)?;
    Ok((psnr, ssim_val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rel_identity_is_zero() {
        let gt = Image1::from_fn(4, 4, |x, y| [1.0 + (x + y) as f64 * 0.1]);
        let eval = DepthEval {
            pred: &gt,
            gt: &gt,
            mask: None,
        };
        assert_eq!(rel_error(&eval, false).unwrap(), 0.0);
    }

    #[test]
    fn rel_uniform_scale() {
        let gt = Image1::from_fn(4, 4, |x, y| [1.0 + (x + y) as f64 * 0.1]);
        let pred = gt.map(|v| v * 1.1);
        let eval = DepthEval {
            pred: &pred,
            gt: &gt,
            mask: None,
        };
        let off = rel_error(&eval, false).unwrap();
        assert!((off - 10.0).abs() < 1e-9, "rel {off}");
        let eval = DepthEval {
            pred: &pred,
            gt: &gt,
            mask: None,
        };
        let on = rel_error(&eval, true).unwrap();
        assert!(on < 1e-6, "aligned rel {on}");
    }

    #[test]
    fn rel_empty_valid_set_errors() {
        let gt = Image1::from_fn(2, 2, |_, _| [0.0]);
        let eval = DepthEval {
            pred: &gt,
            gt: &gt,
            mask: None,
        };
        assert!(rel_error(&eval, false).is_err());
    }

    #[test]
    fn nc_identity_and_orthogonal() {
        let k = Intrinsics::centered(20.0, 8, 8);
        // Slanted plane depth; derive gt normals internally, feed matching
        // and orthogonal predictions.
        let depth = Image1::from_fn(8, 8, |x, y| {
            let dir = Vector3::new(
                (x as f64 + 0.5 - k.cx) / k.fx,
                (y as f64 + 0.5 - k.cy) / k.fy,
                1.0,
            );
            let n = Vector3::new(0.2, 0.1, 1.0).normalize();
            // n·(t·dir) = 2 → t = 2/(n·dir)
            [2.0 / n.dot(&dir)]
        });
        let plane_n = Vector3::new(0.2, 0.1, 1.0).normalize();
        let toward = Image3::from_fn(8, 8, |_, _| [-plane_n.x, -plane_n.y, -plane_n.z]);
        let score = normal_consistency(&toward, &depth, &k).unwrap();
        assert!(score >= 0.999, "nc {score}");

        let ortho = Image3::from_fn(8, 8, |_, _| {
            let t = plane_n.cross(&Vector3::new(0.0, 0.0, 1.0)).normalize();
            [t.x, t.y, t.z]
        });
        let score = normal_consistency(&ortho, &depth, &k).unwrap();
        assert!(score.abs() < 0.02, "orthogonal nc {score}");
    }

    #[test]
    fn ate_identity_and_sim3_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let centers: Vec<Vector3<f64>> = (0..6)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let traj = TrajectoryEval {
            estimated: centers.clone(),
            reference: centers.clone(),
        };
        assert!(ate(&traj).unwrap() < 1e-12);

        // estimated = 3·R·ref + t is absorbed by the alignment.
        let q = Quaternion::from_axis_angle(&Vector3::new(0.3, -0.2, 0.5));
        let r = crate::geometry::quat_to_matrix(&q);
        let t = Vector3::new(1.0, -2.0, 0.5);
        let est: Vec<_> = centers.iter().map(|c| r * c * 3.0 + t).collect();
        let traj = TrajectoryEval {
            estimated: est,
            reference: centers,
        };
        assert!(ate(&traj).unwrap() < 1e-9);
    }

    #[test]
    fn ate_noise_matches_monte_carlo_oracle() {
        // Isotropic Gaussian noise on the reference; ATE approaches the
        // direct RMSE computed on the same samples after alignment.
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let centers: Vec<Vector3<f64>> = (0..200)
            .map(|_| Vector3::new(rng.gen::<f64>() * 2.0, rng.gen::<f64>() * 2.0, rng.gen::<f64>() * 2.0))
            .collect();
        let sigma = 0.01;
        let gauss = |rng: &mut ChaCha8Rng| {
            // Box–Muller
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let noisy: Vec<_> = centers
            .iter()
            .map(|c| c + Vector3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)) * sigma)
            .collect();
        let traj = TrajectoryEval {
            estimated: noisy.clone(),
            reference: centers.clone(),
        };
        let got = ate(&traj).unwrap();
        // Direct evaluation oracle: RMSE of the injected perturbations.
        let direct = {
            let mut sq = 0.0;
            for (n, c) in noisy.iter().zip(&centers) {
                sq += (n - c).norm_squared();
            }
            (sq / centers.len() as f64).sqrt()
        };
        assert!(
            (got - direct).abs() / direct < 0.05,
            "ate {got} vs direct {direct}"
        );
    }

    #[test]
    fn ate_rejects_two_views() {
        let traj = TrajectoryEval {
            estimated: vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            reference: vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
        };
        assert!(ate(&traj).is_err());
    }

    #[test]
    fn psnr_identity_caps_and_arithmetic() {
        let img = Image3::from_fn(4, 4, |x, y| [(x as f64) / 4.0, (y as f64) / 4.0, 0.5]);
        let (psnr, ssim) = psnr_ssim(&img, &img).unwrap();
        assert_eq!(psnr, 100.0);
        assert!((ssim - 1.0).abs() < 1e-12);

        // MSE = 0.01 → 20 dB.
        let off = img.map(|v| v + 0.1);
        let (psnr, _) = psnr_ssim(&off, &img).unwrap();
        assert!((psnr - 20.0).abs() < 1e-9, "psnr {psnr}");
    }

    #[test]
    fn psnr_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let a = Image3::from_fn(6, 5, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let b = Image3::from_fn(6, 5, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let (psnr, _) = psnr_ssim(&a, &b).unwrap();
        // Naive per-pixel summation oracle.
        let mut mse = 0.0;
        let mut count = 0.0;
        for y in 0..5 {
            for x in 0..6 {
                let pa = a.get(x, y);
                let pb = b.get(x, y);
                for ch in 0..3 {
                    mse += (pa[ch] - pb[ch]).powi(2);
                    count += 1.0;
                }
            }
        }
        let want = 10.0 * (1.0 / (mse / count)).log10();
        assert!((psnr - want).abs() < 1e-6);
    }
}
