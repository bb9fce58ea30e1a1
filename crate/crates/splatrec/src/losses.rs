//! Training objectives: photometric L1+SSIM, geometric regularizers on the
//! rendered depth/normal/distortion buffers, the Huber correspondence loss,
//! the color-variance loss and the scheduled total.

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::image::{Image1, Image3};
use crate::real::{c, Real};
use crate::render::{RenderAdjoints, RenderTarget};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Per-step record of every raw term and the weights in effect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l1: f64,
    /// 1 − SSIM(pred, gt).
    pub ssim: f64,
    pub reg_distortion: f64,
    pub reg_normal: f64,
    pub corr: f64,
    pub var: f64,
    pub lambda_photo: f64,
    pub lambda_corr: f64,
    pub lambda_var: f64,
    pub ssim_mix: f64,
    pub lambda_dist: f64,
    pub lambda_normal: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,l1,ssim,reg_distortion,reg_normal,corr,var,lambda_photo,lambda_corr,lambda_var,ssim_mix,lambda_dist,lambda_normal,total"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.l1,
            self.ssim,
            self.reg_distortion,
            self.reg_normal,
            self.corr,
            self.var,
            self.lambda_photo,
            self.lambda_corr,
            self.lambda_var,
            self.ssim_mix,
            self.lambda_dist,
            self.lambda_normal,
            self.total
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_photo: f64,
    pub lambda_corr: f64,
    /// SSIM mixing weight λ inside the photometric term.
    pub ssim_mix: f64,
    pub lambda_dist: f64,
    pub lambda_normal: f64,
    pub corr_enabled: bool,
    pub var_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_photo: 1.0,
            lambda_corr: 5e-5,
            ssim_mix: 0.2,
            lambda_dist: 1000.0,
            lambda_normal: 0.05,
            corr_enabled: true,
            var_enabled: true,
        }
    }
}

/// Cosine annealing of the variance weight: 0.5·(1 + cos(πt/T)); steps past
/// the end clamp to zero.
pub fn lambda_var_schedule(step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return if step == 0 { 1.0 } else { 0.0 };
    }
    if step > total_steps {
        return 0.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

// ---------------------------------------------------------------------------
// Photometric L1 + SSIM

pub struct PhotometricOut<T> {
    pub l1: T,
    /// 1 − SSIM.
    pub ssim_loss: T,
    /// Combined (1−λ)·L1 + λ·(1−SSIM).
    pub loss: T,
    pub d_pred: Image3<T>,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel<T: Real>() -> [T; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut raw = [0.0f64; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, r) in raw.iter_mut().enumerate() {
        let d = i as f64 - half;
        *r = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *r;
    }
    std::array::from_fn(|i| c(raw[i] / sum))
}

/// Separable same-size convolution with zero padding, one channel.
fn blur<T: Real>(src: &[T], w: usize, h: usize, kernel: &[T; SSIM_WINDOW]) -> Vec<T> {
    let r = SSIM_WINDOW / 2;
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = T::zero();
            for (ki, &kv) in kernel.iter().enumerate() {
                let xi = x as i64 + ki as i64 - r as i64;
                if xi >= 0 && (xi as usize) < w {
                    s += kv * src[y * w + xi as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = T::zero();
            for (ki, &kv) in kernel.iter().enumerate() {
                let yi = y as i64 + ki as i64 - r as i64;
                if yi >= 0 && (yi as usize) < h {
                    s += kv * tmp[yi as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Mean SSIM over pixels and channels plus the adjoint w.r.t. `pred`;
/// window 11, σ 1.5, standard constants, images in [0,1].
pub fn ssim<T: Real>(pred: &Image3<T>, gt: &Image3<T>) -> Result<(T, Image3<T>)> {
    if !pred.same_size(gt) {
        return Err(Error::InvalidInput("ssim: size mismatch".into()));
    }
    let (w, h) = (pred.width, pred.height);
    let n = T::from_usize(w * h * 3).unwrap();
    let kernel = gaussian_kernel::<T>();
    let mut total = T::zero();
    let mut d_pred = Image3::zeros(w, h);

    for ch in 0..3 {
        let x: Vec<T> = (0..w * h).map(|i| pred.data[3 * i + ch]).collect();
        let y: Vec<T> = (0..w * h).map(|i| gt.data[3 * i + ch]).collect();
        let x2: Vec<T> = x.iter().map(|&v| v * v).collect();
        let y2: Vec<T> = y.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = x.iter().zip(&y).map(|(&a, &b)| a * b).collect();
        let m1 = blur(&x, w, h, &kernel);
        let m2 = blur(&y, w, h, &kernel);
        let e1 = blur(&x2, w, h, &kernel);
        let e2 = blur(&y2, w, h, &kernel);
        let exy = blur(&xy, w, h, &kernel);

        let c1 = c::<T>(SSIM_C1);
        let c2 = c::<T>(SSIM_C2);
        let two = c::<T>(2.0);
        let mut g_m1 = vec![T::zero(); w * h];
        let mut g_e1 = vec![T::zero(); w * h];
        let mut g_exy = vec![T::zero(); w * h];
        for i in 0..w * h {
            let a = two * m1[i] * m2[i] + c1;
            let b = two * (exy[i] - m1[i] * m2[i]) + c2;
            let cc = m1[i] * m1[i] + m2[i] * m2[i] + c1;
            let d = (e1[i] - m1[i] * m1[i]) + (e2[i] - m2[i] * m2[i]) + c2;
            total += a * b / (cc * d);

            let u = T::one() / n;
            let df_da = b / (cc * d);
            let df_db = a / (cc * d);
            let df_dc = -a * b / (cc * cc * d);
            let df_dd = -a * b / (cc * d * d);
            g_m1[i] = u
                * (df_da * two * m2[i] - df_db * two * m2[i] + df_dc * two * m1[i]
                    - df_dd * two * m1[i]);
            g_e1[i] = u * df_dd;
            g_exy[i] = u * df_db * two;
        }
        // Adjoint of a symmetric zero-padded convolution is the same
        // convolution.
        let b_m1 = blur(&g_m1, w, h, &kernel);
        let b_e1 = blur(&g_e1, w, h, &kernel);
        let b_exy = blur(&g_exy, w, h, &kernel);
        for i in 0..w * h {
            d_pred.data[3 * i + ch] += b_m1[i] + b_e1[i] * two * x[i] + b_exy[i] * y[i];
        }
    }
    Ok((total / n, d_pred))
}

/// (1−λ)·mean|pred−gt| + λ·(1−SSIM), with the adjoint w.r.t. `pred`.
pub fn photometric<T: Real>(
    pred: &Image3<T>,
    gt: &Image3<T>,
    ssim_mix: T,
) -> Result<PhotometricOut<T>> {
    if !pred.same_size(gt) {
        return Err(Error::InvalidInput("photometric: size mismatch".into()));
    }
    let n = T::from_usize(pred.data.len()).unwrap();
    let mut l1 = T::zero();
    let mut d_pred = Image3::zeros(pred.width, pred.height);
    for i in 0..pred.data.len() {
        let diff = pred.data[i] - gt.data[i];
        l1 += diff.abs();
        let sign = if diff > T::zero() {
            T::one()
        } else if diff < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        d_pred.data[i] = (T::one() - ssim_mix) * sign / n;
    }
    l1 /= n;

    let (ssim_val, d_ssim) = ssim(pred, gt)?;
    let ssim_loss = T::one() - ssim_val;
    for i in 0..d_pred.data.len() {
        d_pred.data[i] -= ssim_mix * d_ssim.data[i];
    }
    Ok(PhotometricOut {
        l1,
        ssim_loss,
        loss: (T::one() - ssim_mix) * l1 + ssim_mix * ssim_loss,
        d_pred,
    })
}

// ---------------------------------------------------------------------------
// Geometric regularization on the rendered buffers

pub struct RegOut<T> {
    pub distortion: T,
    pub normal: T,
    /// λ_d·distortion + λ_n·normal.
    pub loss: T,
    pub d_depth: Image1<T>,
    pub d_normal: Image3<T>,
    pub d_distortion: Image1<T>,
}

/// Depth-normal binding plus mean distortion. The depth normal is the
/// central-difference normal of back-projected camera-space points, flipped
/// toward the camera; pixels whose 4-neighborhood is not covered
/// (acc < 0.5) are excluded from the normal term.
pub fn reg_geometric<T: Real>(
    target: &RenderTarget<T>,
    k: &Intrinsics<T>,
    lambda_dist: T,
    lambda_normal: T,
) -> RegOut<T> {
    let (w, h) = (target.width(), target.height());
    let n_pix = T::from_usize(w * h).unwrap();
    let mut d_depth = Image1::zeros(w, h);
    let mut d_normal = Image3::zeros(w, h);
    let mut d_distortion = Image1::zeros(w, h);

    let mut dist_sum = T::zero();
    for i in 0..w * h {
        dist_sum += target.distortion.data[i];
        d_distortion.data[i] = lambda_dist / n_pix;
    }
    let distortion = dist_sum / n_pix;

    let covered = |x: usize, y: usize| target.acc.get(x, y)[0] >= c(0.5);
    let dirvec = |x: usize, y: usize| {
        Vector3::new(
            (T::from_usize(x).unwrap() + c(0.5) - k.cx) / k.fx,
            (T::from_usize(y).unwrap() + c(0.5) - k.cy) / k.fy,
            T::one(),
        )
    };
    let point = |x: usize, y: usize| dirvec(x, y) * target.depth.get(x, y)[0];

    let mut included = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if covered(x, y)
                && covered(x - 1, y)
                && covered(x + 1, y)
                && covered(x, y - 1)
                && covered(x, y + 1)
            {
                included.push((x, y));
            }
        }
    }
    let count = T::from_usize(included.len().max(1)).unwrap();
    let half = c::<T>(0.5);
    let mut normal_sum = T::zero();
    for &(x, y) in &included {
        let ddx = (point(x + 1, y) - point(x - 1, y)) * half;
        let ddy = (point(x, y + 1) - point(x, y - 1)) * half;
        let cvec = ddx.cross(&ddy);
        let norm = cvec.norm();
        if norm < c(1e-20) {
            continue;
        }
        let n_hat = -cvec / norm;
        let nb = target.normal.get(x, y);
        let s = Vector3::new(nb[0], nb[1], nb[2]);
        normal_sum += T::one() - s.dot(&n_hat);

        let scale = lambda_normal / count;
        d_normal.add(x, y, [-n_hat.x * scale, -n_hat.y * scale, -n_hat.z * scale]);
        // Through the normalization, the cross product and the central
        // differences back to the four depth taps.
        let g_nhat = -s * scale;
        let g_c = -(g_nhat - n_hat * n_hat.dot(&g_nhat)) / norm;
        let g_ddx = ddy.cross(&g_c);
        let g_ddy = g_c.cross(&ddx);
        let mut scatter = |xx: usize, yy: usize, g_p: Vector3<T>| {
            d_depth.add(xx, yy, [g_p.dot(&dirvec(xx, yy))]);
        };
        scatter(x + 1, y, g_ddx * half);
        scatter(x - 1, y, -g_ddx * half);
        scatter(x, y + 1, g_ddy * half);
        scatter(x, y - 1, -g_ddy * half);
    }
    let normal = normal_sum / count;

    RegOut {
        distortion,
        normal,
        loss: lambda_dist * distortion + lambda_normal * normal,
        d_depth,
        d_normal,
        d_distortion,
    }
}

// ---------------------------------------------------------------------------
// Correspondence loss (splatted-depth reprojection)

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Correspondence<T> {
    pub view_n: usize,
    pub view_m: usize,
    /// Normalized pixel in view n, ∈ [0,1]².
    pub p_n: (T, T),
    /// Corresponding normalized pixel in view m.
    pub p_m: (T, T),
    pub weight: T,
}

pub struct CorrOut<T> {
    pub loss: T,
    pub pairs_used: usize,
    pub skipped_behind: usize,
    pub dropped_low_acc: usize,
    /// Per-view adjoints on the expected-depth buffers.
    pub d_depth: Vec<Image1<T>>,
    /// Per-view pose tangent gradients.
    pub d_pose: Vec<[T; 6]>,
}

/// Mean over pairs of w·ρ(p_m − π(P_m(P_n⁻¹(π⁻¹(p_n, d_n))))), ρ the Huber
/// loss on the residual norm, d_n sampled bilinearly from view n's
/// expected-depth map. Gradients flow to both poses and to the sampled
/// depths. Behind-camera reprojections are skipped and counted; pairs with
/// accumulation below 0.5 at p_n are dropped.
pub fn correspondence_loss<T: Real>(
    corrs: &[Correspondence<T>],
    targets: &[&RenderTarget<T>],
    poses: &[Pose<T>],
    k: &Intrinsics<T>,
    huber_delta: T,
) -> Result<CorrOut<T>> {
    let n_views = poses.len();
    if targets.len() != n_views {
        return Err(Error::InvalidInput(
            "correspondence_loss: one render target per pose required".into(),
        ));
    }
    let mut out = CorrOut {
        loss: T::zero(),
        pairs_used: 0,
        skipped_behind: 0,
        dropped_low_acc: 0,
        d_depth: targets
            .iter()
            .map(|t| Image1::zeros(t.width(), t.height()))
            .collect(),
        d_pose: vec![[T::zero(); 6]; n_views],
    };
    if corrs.is_empty() {
        return Ok(out);
    }
    let denom = T::from_usize(corrs.len()).unwrap();
    let wf = T::from_usize(k.width).unwrap();
    let hf = T::from_usize(k.height).unwrap();

    for corr in corrs {
        if corr.view_n >= n_views || corr.view_m >= n_views || corr.view_n == corr.view_m {
            return Err(Error::InvalidInput(format!(
                "correspondence references invalid views ({}, {})",
                corr.view_n, corr.view_m
            )));
        }
        if corr.weight == T::zero() {
            continue;
        }
        let tn = targets[corr.view_n];
        let acc = tn.acc.sample_bilinear(corr.p_n.0, corr.p_n.1)[0];
        if acc < c(0.5) {
            out.dropped_low_acc += 1;
            continue;
        }
        let d_n = tn.depth.sample_bilinear(corr.p_n.0, corr.p_n.1)[0];
        if d_n <= T::EPS_BEHIND {
            out.skipped_behind += 1;
            continue;
        }

        let pose_n = &poses[corr.view_n];
        let pose_m = &poses[corr.view_m];
        let rn = pose_n.rotation_matrix();
        let rm = pose_m.rotation_matrix();

        let dir_n = Vector3::new(
            (corr.p_n.0 * wf - k.cx) / k.fx,
            (corr.p_n.1 * hf - k.cy) / k.fy,
            T::one(),
        );
        let x_n = dir_n * d_n;
        let v_n = x_n - pose_n.translation;
        let x_w = rn.transpose() * v_n;
        let x_m = rm * x_w + pose_m.translation;
        if x_m.z <= T::EPS_BEHIND {
            out.skipped_behind += 1;
            continue;
        }
        let proj = (
            (k.fx * x_m.x / x_m.z + k.cx) / wf,
            (k.fy * x_m.y / x_m.z + k.cy) / hf,
        );
        let rx = corr.p_m.0 - proj.0;
        let ry = corr.p_m.1 - proj.1;
        let s = (rx * rx + ry * ry).sqrt();
        let rho = if s <= huber_delta {
            s * s / c(2.0)
        } else {
            huber_delta * (s - huber_delta / c(2.0))
        };
        out.loss += corr.weight * rho / denom;
        out.pairs_used += 1;

        if s <= T::zero() {
            continue;
        }
        let rho_prime = s.min(huber_delta);
        let gscale = corr.weight * rho_prime / (s * denom);
        let g_proj = (-rx * gscale, -ry * gscale);
        let z = x_m.z;
        let g_xm = Vector3::new(
            g_proj.0 * k.fx / (wf * z),
            g_proj.1 * k.fy / (hf * z),
            -g_proj.0 * k.fx * x_m.x / (wf * z * z) - g_proj.1 * k.fy * x_m.y / (hf * z * z),
        );
        // x_m = R_m·x_w + t_m under left-tangent increments of pose m.
        let omega_m = (rm * x_w).cross(&g_xm);
        for a in 0..3 {
            out.d_pose[corr.view_m][a] += omega_m[a];
            out.d_pose[corr.view_m][3 + a] += g_xm[a];
        }
        let g_xw = rm.transpose() * g_xm;
        // x_w = R_nᵀ(x_n − t_n) under left-tangent increments of pose n.
        let rng_xw = rn * g_xw;
        let omega_n = v_n.cross(&rng_xw);
        for a in 0..3 {
            out.d_pose[corr.view_n][a] -= omega_n[a];
            out.d_pose[corr.view_n][3 + a] -= rng_xw[a];
        }
        // x_n = dir_n·d_n; scatter into the depth adjoint.
        let g_dn = rng_xw.dot(&dir_n);
        for (x, y, wgt) in tn.depth.bilinear_taps(corr.p_n.0, corr.p_n.1) {
            out.d_depth[corr.view_n].add(x, y, [g_dn * wgt]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Variance loss

pub struct VarOut<T> {
    pub loss: T,
    pub d_color: Image3<T>,
    pub d_color2: Image3<T>,
}

/// Mean over pixels and channels of max(0, E[c²] − E[c]²); the adjoint
/// flows through both moments.
pub fn variance_loss<T: Real>(target: &RenderTarget<T>) -> VarOut<T> {
    let (w, h) = (target.width(), target.height());
    let n = T::from_usize(w * h * 3).unwrap();
    let mut loss = T::zero();
    let mut d_color = Image3::zeros(w, h);
    let mut d_color2 = Image3::zeros(w, h);
    for i in 0..w * h * 3 {
        let m1 = target.color.data[i];
        let m2 = target.color2.data[i];
        let v = m2 - m1 * m1;
        if v > T::zero() {
            loss += v;
            d_color2.data[i] = T::one() / n;
            d_color.data[i] = -c::<T>(2.0) * m1 / n;
        }
    }
    VarOut {
        loss: loss / n,
        d_color,
        d_color2,
    }
}

// ---------------------------------------------------------------------------
// Total

pub struct TotalInputs {
    pub l1: f64,
    pub ssim_loss: f64,
    pub reg_distortion: f64,
    pub reg_normal: f64,
    pub corr: f64,
    pub var: f64,
}

/// Combines the raw terms per the training objective with the scheduled
/// variance weight. Non-finite components abort the step.
pub fn total_loss(
    inp: &TotalInputs,
    weights: &LossWeights,
    step: usize,
    total_steps: usize,
) -> Result<LossReport> {
    for (name, v) in [
        ("l1", inp.l1),
        ("ssim", inp.ssim_loss),
        ("reg_distortion", inp.reg_distortion),
        ("reg_normal", inp.reg_normal),
        ("corr", inp.corr),
        ("var", inp.var),
    ] {
        if !v.is_finite() {
            return Err(Error::Diverged(format!(
                "loss component {name} is non-finite at step {step}: {v}"
            )));
        }
    }
    let lambda_var = if weights.var_enabled {
        lambda_var_schedule(step, total_steps)
    } else {
        0.0
    };
    let lambda_corr = if weights.corr_enabled {
        weights.lambda_corr
    } else {
        0.0
    };
    let photo = (1.0 - weights.ssim_mix) * inp.l1
        + weights.ssim_mix * inp.ssim_loss
        + weights.lambda_dist * inp.reg_distortion
        + weights.lambda_normal * inp.reg_normal;
    let total = weights.lambda_photo * photo + lambda_corr * inp.corr + lambda_var * inp.var;
    Ok(LossReport {
        step,
        l1: inp.l1,
        ssim: inp.ssim_loss,
        reg_distortion: inp.reg_distortion,
        reg_normal: inp.reg_normal,
        corr: inp.corr,
        var: inp.var,
        lambda_photo: weights.lambda_photo,
        lambda_corr,
        lambda_var,
        ssim_mix: weights.ssim_mix,
        lambda_dist: weights.lambda_dist,
        lambda_normal: weights.lambda_normal,
        total,
    })
}

/// Scaled sum of per-loss adjoints into one set of renderer adjoints.
pub struct AdjointBuilder<T> {
    adj: RenderAdjoints<T>,
    width: usize,
    height: usize,
}

impl<T: Real> AdjointBuilder<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            adj: RenderAdjoints::default(),
            width,
            height,
        }
    }

    pub fn add_color(&mut self, img: &Image3<T>, scale: T) -> &mut Self {
        accumulate3(&mut self.adj.d_color, img, scale, self.width, self.height);
        self
    }

    pub fn add_color2(&mut self, img: &Image3<T>, scale: T) -> &mut Self {
        accumulate3(&mut self.adj.d_color2, img, scale, self.width, self.height);
        self
    }

    pub fn add_depth(&mut self, img: &Image1<T>, scale: T) -> &mut Self {
        accumulate1(&mut self.adj.d_depth, img, scale, self.width, self.height);
        self
    }

    pub fn add_normal(&mut self, img: &Image3<T>, scale: T) -> &mut Self {
        accumulate3(&mut self.adj.d_normal, img, scale, self.width, self.height);
        self
    }

    pub fn add_distortion(&mut self, img: &Image1<T>, scale: T) -> &mut Self {
        accumulate1(&mut self.adj.d_distortion, img, scale, self.width, self.height);
        self
    }

    pub fn build(self) -> RenderAdjoints<T> {
        self.adj
    }
}

fn accumulate3<T: Real>(
    slot: &mut Option<Image3<T>>,
    img: &Image3<T>,
    scale: T,
    w: usize,
    h: usize,
) {
    let dst = slot.get_or_insert_with(|| Image3::zeros(w, h));
    for (d, s) in dst.data.iter_mut().zip(&img.data) {
        *d += *s * scale;
    }
}

fn accumulate1<T: Real>(
    slot: &mut Option<Image1<T>>,
    img: &Image1<T>,
    scale: T,
    w: usize,
    h: usize,
) {
    let dst = slot.get_or_insert_with(|| Image1::zeros(w, h));
    for (d, s) in dst.data.iter_mut().zip(&img.data) {
        *d += *s * scale;
    }
}
