//! Analytic backward pass of the rasterizer.
//!
//! Gradients flow from per-buffer adjoint images to every surfel field and
//! the view's pose tangent. The pass replays the forward compositing per
//! pixel (same fragment order, cutoffs and early termination), so the
//! derivative is exact for the rendered function. Per-surfel accumulation
//! is staged per tile and reduced in fixed tile order, which keeps results
//! bit-reproducible run to run.

use super::{
    eval_fragment, prepare_splats, tile_lists, Branch, RenderConfig, SplatView,
};
use crate::error::{Error, Result};
use crate::geometry::{quat_to_matrix_backward, Intrinsics, Pose};
use crate::image::{Image1, Image3};
use crate::real::{c, Real};
use crate::sh::{sh_basis, sh_basis_grad, SH_COEFFS, SH_TOTAL};
use crate::surfel::SurfelCloud;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

/// Upstream adjoints, one optional image per rendered buffer. Missing
/// buffers contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct RenderAdjoints<T> {
    pub d_color: Option<Image3<T>>,
    pub d_color2: Option<Image3<T>>,
    pub d_depth: Option<Image1<T>>,
    pub d_normal: Option<Image3<T>>,
    pub d_acc: Option<Image1<T>>,
    pub d_distortion: Option<Image1<T>>,
}

impl<T: Real> RenderAdjoints<T> {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        fn check<T: Real, const C: usize>(
            img: &Option<crate::image::Image<T, C>>,
            width: usize,
            height: usize,
            name: &str,
        ) -> Result<()> {
            if let Some(img) = img {
                if img.width != width || img.height != height {
                    return Err(Error::InvalidInput(format!(
                        "adjoint {name}: size {}×{} does not match render {width}×{height}",
                        img.width, img.height
                    )));
                }
                if img.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "adjoint {name} contains non-finite values"
                    )));
                }
            }
            Ok(())
        }
        check(&self.d_color, width, height, "color")?;
        check(&self.d_color2, width, height, "color2")?;
        check(&self.d_depth, width, height, "depth")?;
        check(&self.d_normal, width, height, "normal")?;
        check(&self.d_acc, width, height, "acc")?;
        check(&self.d_distortion, width, height, "distortion")?;
        Ok(())
    }
}

/// Co-indexed gradients for every surfel field plus the view's pose tangent
/// (ω then δt).
#[derive(Debug, Clone)]
pub struct GradientBundle<T> {
    pub d_center: Vec<Vector3<T>>,
    pub d_quat: Vec<[T; 4]>,
    pub d_log_scale: Vec<[T; 2]>,
    pub d_opacity: Vec<T>,
    /// N × SH_TOTAL, flat.
    pub d_sh: Vec<T>,
    pub d_pose: [T; 6],
}

impl<T: Real> GradientBundle<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_center: vec![Vector3::zeros(); n],
            d_quat: vec![[T::zero(); 4]; n],
            d_log_scale: vec![[T::zero(); 2]; n],
            d_opacity: vec![T::zero(); n],
            d_sh: vec![T::zero(); n * SH_TOTAL],
            d_pose: [T::zero(); 6],
        }
    }

    pub fn len(&self) -> usize {
        self.d_opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_opacity.is_empty()
    }

    /// Elementwise accumulation of another view's bundle (splat gradients
    /// only; pose gradients stay per view).
    pub fn add_splat_grads(&mut self, other: &Self) {
        for i in 0..self.d_center.len() {
            self.d_center[i] += other.d_center[i];
            for k in 0..4 {
                self.d_quat[i][k] += other.d_quat[i][k];
            }
            for k in 0..2 {
                self.d_log_scale[i][k] += other.d_log_scale[i][k];
            }
            self.d_opacity[i] += other.d_opacity[i];
        }
        for i in 0..self.d_sh.len() {
            self.d_sh[i] += other.d_sh[i];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_center.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_quat.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_opacity.iter().all(|x| x.is_finite())
            && self.d_sh.iter().all(|x| x.is_finite())
            && self.d_pose.iter().all(|x| x.is_finite())
    }
}

/// Camera-space gradient slots for one splat, accumulated over pixels.
#[derive(Debug, Clone)]
struct SplatGrad<T> {
    g_center_cam: Vector3<T>,
    g_axis_u: Vector3<T>,
    g_axis_v: Vector3<T>,
    g_normal_cam: Vector3<T>,
    d_log_scale: [T; 2],
    d_opacity_raw: T,
    d_color: [T; 3],
}

impl<T: Real> SplatGrad<T> {
    fn zeros() -> Self {
        Self {
            g_center_cam: Vector3::zeros(),
            g_axis_u: Vector3::zeros(),
            g_axis_v: Vector3::zeros(),
            g_normal_cam: Vector3::zeros(),
            d_log_scale: [T::zero(); 2],
            d_opacity_raw: T::zero(),
            d_color: [T::zero(); 3],
        }
    }

    fn add(&mut self, o: &Self) {
        self.g_center_cam += o.g_center_cam;
        self.g_axis_u += o.g_axis_u;
        self.g_axis_v += o.g_axis_v;
        self.g_normal_cam += o.g_normal_cam;
        self.d_log_scale[0] += o.d_log_scale[0];
        self.d_log_scale[1] += o.d_log_scale[1];
        self.d_opacity_raw += o.d_opacity_raw;
        for k in 0..3 {
            self.d_color[k] += o.d_color[k];
        }
    }
}

struct ReplayFrag<T> {
    si: u32,
    alpha: T,
    gauss: T,
    t: T,
    branch: Branch,
    w: T,
    trans: T,
    prefix_w: T,
    prefix_wt: T,
}

pub fn render_backward<T: Real>(
    cloud: &SurfelCloud<T>,
    pose: &Pose<T>,
    k: &Intrinsics<T>,
    cfg: &RenderConfig<T>,
    adjoints: &RenderAdjoints<T>,
) -> Result<GradientBundle<T>> {
    adjoints.validate(k.width, k.height)?;
    let splats = prepare_splats(cloud, pose, k, cfg);
    let tile = cfg.tile_size.max(1);
    let (tiles_x, tiles_y, lists) = tile_lists(&splats, k, tile);

    let tile_grads: Vec<Vec<SplatGrad<T>>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let list = &lists[ti];
            let mut grads: Vec<SplatGrad<T>> = (0..list.len()).map(|_| SplatGrad::zeros()).collect();
            if list.is_empty() {
                return grads;
            }
            let slot: std::collections::HashMap<u32, usize> = list
                .iter()
                .enumerate()
                .map(|(pos, &si)| (si, pos))
                .collect();
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x1 = (tx * tile + tile).min(k.width);
            let y1 = (ty * tile + tile).min(k.height);
            for y in (ty * tile)..y1 {
                for x in (tx * tile)..x1 {
                    backward_pixel(&splats, list, &slot, x, y, k, cfg, adjoints, &mut grads);
                }
            }
            grads
        })
        .collect();

    // Ordered reduction into global per-splat slots.
    let mut global: Vec<SplatGrad<T>> = (0..cloud.len()).map(|_| SplatGrad::zeros()).collect();
    for (ti, grads) in tile_grads.iter().enumerate() {
        for (pos, &si) in lists[ti].iter().enumerate() {
            global[si as usize].add(&grads[pos]);
        }
    }

    // Map camera-space slots to world parameters and the pose tangent.
    let mut bundle = GradientBundle::zeros(cloud.len());
    let rot = pose.rotation_matrix();
    let rot_t = rot.transpose();
    let t_pose = pose.translation;
    for (i, (s, g)) in cloud.surfels.iter().zip(&global).enumerate() {
        let sv = &splats[i];
        // Center: x_cam = R·x + t.
        let mut d_center = rot_t * g.g_center_cam;
        let mut d_omega = (sv.center_cam - t_pose).cross(&g.g_center_cam)
            + sv.axis_u.cross(&g.g_axis_u)
            + sv.axis_v.cross(&g.g_axis_v)
            + sv.normal_cam.cross(&g.g_normal_cam);
        let mut d_dt = g.g_center_cam;

        // Frame axes: world-frame adjoint columns → quaternion.
        let d_frame = Matrix3::from_columns(&[
            rot_t * g.g_axis_u,
            rot_t * g.g_axis_v,
            rot_t * g.g_normal_cam,
        ]);
        bundle.d_quat[i] = quat_to_matrix_backward(&s.rotation, &d_frame);

        // View-dependent color: SH coefficients and the direction term.
        if g.d_color != [T::zero(); 3] {
            let d_dir_raw = truncated_sh_backward(
                &s.sh,
                &sv.dir,
                &g.d_color,
                cfg.sh_degree,
                &mut bundle.d_sh[i * SH_TOTAL..(i + 1) * SH_TOTAL],
            );
            // dir = raw/‖raw‖ with raw = x − cam_center.
            let proj = (d_dir_raw - sv.dir * sv.dir.dot(&d_dir_raw)) / sv.dist;
            d_center += proj;
            let g_cam_center = -proj;
            d_omega += t_pose.cross(&(rot * g_cam_center));
            d_dt -= rot * g_cam_center;
        }

        bundle.d_center[i] = d_center;
        bundle.d_log_scale[i] = g.d_log_scale;
        bundle.d_opacity[i] = g.d_opacity_raw;
        for a in 0..3 {
            bundle.d_pose[a] += d_omega[a];
            bundle.d_pose[3 + a] += d_dt[a];
        }
    }
    Ok(bundle)
}

/// SH evaluation pullback honoring the degree truncation and clamp used in
/// the forward pass. Returns dL/d(dir) as a raw 3-vector.
fn truncated_sh_backward<T: Real>(
    sh: &[T],
    dir: &Vector3<T>,
    d_rgb: &[T; 3],
    degree: usize,
    d_sh: &mut [T],
) -> Vector3<T> {
    let n_coef = ((degree + 1) * (degree + 1)).min(SH_COEFFS);
    let b = sh_basis(dir);
    let gb = sh_basis_grad(dir);
    let half = c::<T>(0.5);
    let mut d_dir = Vector3::zeros();
    for ch in 0..3 {
        let base = ch * SH_COEFFS;
        let mut v = half;
        for k in 0..n_coef {
            v += sh[base + k] * b[k];
        }
        if v <= T::zero() {
            continue;
        }
        let up = d_rgb[ch];
        for k in 0..n_coef {
            d_sh[base + k] += up * b[k];
            d_dir += gb[k] * (up * sh[base + k]);
        }
    }
    d_dir
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel<T: Real>(
    splats: &[SplatView<T>],
    order: &[u32],
    slot: &std::collections::HashMap<u32, usize>,
    x: usize,
    y: usize,
    k: &Intrinsics<T>,
    cfg: &RenderConfig<T>,
    adjoints: &RenderAdjoints<T>,
    grads: &mut [SplatGrad<T>],
) {
    let px = T::from_usize(x).unwrap() + c(0.5);
    let py = T::from_usize(y).unwrap() + c(0.5);

    // Forward replay with the exact same traversal.
    let mut frags: Vec<ReplayFrag<T>> = Vec::new();
    let mut trans = T::one();
    let mut sum_w = T::zero();
    let mut sum_wt = T::zero();
    for &si in order {
        if cfg.early_stop > T::zero() && trans < cfg.early_stop {
            break;
        }
        let sv = &splats[si as usize];
        let Some(f) = eval_fragment(sv, px, py, k, cfg) else {
            continue;
        };
        let w = f.alpha * trans;
        frags.push(ReplayFrag {
            si,
            alpha: f.alpha,
            gauss: f.gauss,
            t: f.t,
            branch: f.branch,
            w,
            trans,
            prefix_w: sum_w,
            prefix_wt: sum_wt,
        });
        sum_w += w;
        sum_wt += w * f.t;
        trans *= T::one() - f.alpha;
    }
    if frags.is_empty() {
        return;
    }

    let up_color = adjoints.d_color.as_ref().map(|i| i.get(x, y)).unwrap_or([T::zero(); 3]);
    let up_color2 = adjoints.d_color2.as_ref().map(|i| i.get(x, y)).unwrap_or([T::zero(); 3]);
    let up_depth = adjoints.d_depth.as_ref().map(|i| i.get(x, y)[0]).unwrap_or(T::zero());
    let up_normal = adjoints.d_normal.as_ref().map(|i| i.get(x, y)).unwrap_or([T::zero(); 3]);
    let up_acc = adjoints.d_acc.as_ref().map(|i| i.get(x, y)[0]).unwrap_or(T::zero());
    let up_dist = adjoints
        .d_distortion
        .as_ref()
        .map(|i| i.get(x, y)[0])
        .unwrap_or(T::zero());

    // depth = S_t / max(acc, ε)
    let denom = sum_w.max(cfg.depth_eps);
    let d_sum_wt = up_depth / denom;
    let mut acc_eff = up_acc;
    if sum_w > cfg.depth_eps {
        acc_eff -= up_depth * sum_wt / (denom * denom);
    }

    let two = c::<T>(2.0);
    // Background acts as a virtual terminal fragment with α' = 1.
    let mut later_acc = up_color[0] * cfg.background[0]
        + up_color[1] * cfg.background[1]
        + up_color[2] * cfg.background[2];

    for f in frags.iter().rev() {
        let sv = &splats[f.si as usize];
        let suffix_w = sum_w - f.prefix_w - f.w;
        let suffix_wt = sum_wt - f.prefix_wt - f.w * f.t;

        // dL/dw and dL/dt for this fragment.
        let mut d_w = acc_eff + d_sum_wt * f.t;
        for ch in 0..3 {
            d_w += up_color[ch] * sv.color[ch]
                + up_color2[ch] * sv.color[ch] * sv.color[ch]
                + up_normal[ch] * sv.flip * sv.normal_cam[ch];
        }
        d_w += up_dist
            * (two * (f.t * f.prefix_w - f.prefix_wt) + two * (suffix_wt - f.t * suffix_w));
        let d_t = d_sum_wt * f.w + up_dist * two * f.w * (f.prefix_w - suffix_w);

        // dL/dα' via the suffix accumulator (division-free).
        let d_alpha_mod = f.trans * (d_w - later_acc);
        later_acc = f.alpha * d_w + (T::one() - f.alpha) * later_acc;

        // Chain through α' = α·G.
        let g = &mut grads[slot[&f.si]];
        let d_alpha = d_alpha_mod * f.gauss;
        g.d_opacity_raw += d_alpha * sv.alpha * (T::one() - sv.alpha);
        let d_gauss = d_alpha_mod * sv.alpha;
        let d_r2 = -d_gauss * f.gauss / two;

        // Per-fragment color adjoint (per-splat SH backward happens later).
        for ch in 0..3 {
            g.d_color[ch] += f.w * (up_color[ch] + two * sv.color[ch] * up_color2[ch]);
        }
        // Normal buffer.
        for ch in 0..3 {
            g.g_normal_cam[ch] += f.w * sv.flip * up_normal[ch];
        }

        let dirh = Vector3::new((px - k.cx) / k.fx, (py - k.cy) / k.fy, T::one());
        match f.branch {
            Branch::Plane => {
                let den = sv.normal_cam.dot(&dirh);
                let tau = sv.normal_cam.dot(&sv.center_cam) / den;
                let dvec = dirh * tau - sv.center_cam;
                let a = dvec.dot(&sv.axis_u) / sv.su;
                let b = dvec.dot(&sv.axis_v) / sv.sv;

                let d_a = d_r2 * two * a;
                let d_b = d_r2 * two * b;
                g.d_log_scale[0] += -d_a * a;
                g.d_log_scale[1] += -d_b * b;
                let g_dvec = sv.axis_u * (d_a / sv.su) + sv.axis_v * (d_b / sv.sv);
                g.g_axis_u += dvec * (d_a / sv.su);
                g.g_axis_v += dvec * (d_b / sv.sv);

                let d_tau = g_dvec.dot(&dirh) + d_t;
                g.g_center_cam -= g_dvec;
                let d_num = d_tau / den;
                let d_den = -d_tau * tau / den;
                g.g_normal_cam += sv.center_cam * d_num + dirh * d_den;
                g.g_center_cam += sv.normal_cam * d_num;
            }
            Branch::Screen => {
                let s2 = cfg.screen_sigma * cfg.screen_sigma;
                let dx = px - sv.proj_px.0;
                let dy = py - sv.proj_px.1;
                let d_dx = d_r2 * two * dx / s2;
                let d_dy = d_r2 * two * dy / s2;
                let d_projx = -d_dx;
                let d_projy = -d_dy;
                let z = sv.depth_center;
                g.g_center_cam.x += d_projx * k.fx / z;
                g.g_center_cam.y += d_projy * k.fy / z;
                g.g_center_cam.z += -d_projx * k.fx * sv.center_cam.x / (z * z)
                    - d_projy * k.fy * sv.center_cam.y / (z * z)
                    + d_t;
            }
        }
    }
}
