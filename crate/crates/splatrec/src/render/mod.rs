//! Tile-based differentiable surfel rasterizer.
//!
//! Forward: exact ray-splat intersection, front-to-back alpha compositing
//! of color, squared color (second moment), expected depth, normal,
//! accumulated weight and pairwise depth distortion — all in one traversal.
//! Backward: analytic gradients of every emitted buffer with respect to
//! every surfel field and the view's pose tangent.

mod backward;

pub use backward::{render_backward, GradientBundle, RenderAdjoints};

use crate::geometry::{Intrinsics, Pose, Quaternion};
use crate::image::{Image1, Image3};
use crate::real::{c, Real};
use crate::sh::{sh_basis, SH_COEFFS};
use crate::surfel::{Surfel, SurfelCloud};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct RenderConfig<T> {
    pub tile_size: usize,
    /// Fragments with G below this are dropped (3σ cutoff).
    pub cutoff_gauss: T,
    /// Fragments with modified opacity below this are dropped.
    pub min_alpha: T,
    /// Early ray termination threshold on transmittance; ≤ 0 disables.
    pub early_stop: T,
    /// Constant background composited into the color buffer only.
    pub background: [T; 3],
    /// Spherical-harmonics degree used for color evaluation (0..=3).
    pub sh_degree: usize,
    /// Screen-space low-pass Gaussian sigma in pixels.
    pub screen_sigma: T,
    /// ε in the expected-depth normalization depth = Σwt / max(acc, ε).
    pub depth_eps: T,
}

impl<T: Real> Default for RenderConfig<T> {
    fn default() -> Self {
        Self {
            tile_size: 16,
            cutoff_gauss: c((-4.5f64).exp()),
            min_alpha: c(1.0 / 255.0),
            early_stop: c(1.0 / 255.0),
            background: [T::zero(); 3],
            sh_degree: 3,
            screen_sigma: c(2.0),
            depth_eps: c(1e-8),
        }
    }
}

impl<T: Real> RenderConfig<T> {
    /// No fragment culling and no early termination: the forward map stays
    /// smooth, which finite-difference verification relies on.
    pub fn exact() -> Self {
        Self {
            cutoff_gauss: T::zero(),
            min_alpha: T::zero(),
            early_stop: T::zero(),
            ..Self::default()
        }
    }
}

/// Per-pixel output buffers of one render call.
#[derive(Debug, Clone)]
pub struct RenderTarget<T> {
    pub color: Image3<T>,
    /// Per-channel second moment E[c²] under the ray termination weights.
    pub color2: Image3<T>,
    /// Accumulation-normalized expected depth.
    pub depth: Image1<T>,
    /// Σwᵢnᵢ in camera space, unnormalized.
    pub normal: Image3<T>,
    pub acc: Image1<T>,
    pub distortion: Image1<T>,
    pub frag_count: Vec<u32>,
}

impl<T: Real> RenderTarget<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Image3::zeros(width, height),
            color2: Image3::zeros(width, height),
            depth: Image1::zeros(width, height),
            normal: Image3::zeros(width, height),
            acc: Image1::zeros(width, height),
            distortion: Image1::zeros(width, height),
            frag_count: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Per-channel rendered color variance, clamped at zero.
    pub fn variance(&self, x: usize, y: usize) -> [T; 3] {
        let m1 = self.color.get(x, y);
        let m2 = self.color2.get(x, y);
        std::array::from_fn(|k| (m2[k] - m1[k] * m1[k]).max(T::zero()))
    }

    pub fn mean_variance(&self) -> T {
        let n = T::from_usize(self.color.pixels() * 3).unwrap();
        let mut s = T::zero();
        for y in 0..self.height() {
            for x in 0..self.width() {
                let v = self.variance(x, y);
                s += v[0] + v[1] + v[2];
            }
        }
        s / n
    }
}

/// One ray-splat intersection record.
#[derive(Debug, Clone, Copy)]
pub struct Fragment<T> {
    pub surfel: usize,
    /// Ray parameter (camera-space depth inside the renderer; Euclidean
    /// distance for unit-norm free rays).
    pub t: T,
    pub gauss: T,
    /// Modified opacity α·G(p).
    pub alpha: T,
}

/// Exact intersection of a free ray with a surfel. Near-parallel rays,
/// behind-origin hits and G below `cutoff` report a miss; the output is
/// always finite.
pub fn intersect<T: Real>(
    surfel: &Surfel<T>,
    index: usize,
    origin: &Vector3<T>,
    direction: &Vector3<T>,
    cutoff: T,
) -> Option<Fragment<T>> {
    let frame = surfel.frame();
    let n: Vector3<T> = frame.column(2).into();
    let denom = n.dot(direction);
    if denom.abs() < c(1e-12) {
        return None;
    }
    let t = n.dot(&(surfel.center - origin)) / denom;
    if t <= T::EPS_BEHIND {
        return None;
    }
    let hit = origin + direction * t;
    let d = hit - surfel.center;
    let [su, sv] = surfel.scale();
    let axis_u: Vector3<T> = frame.column(0).into();
    let axis_v: Vector3<T> = frame.column(1).into();
    let a = d.dot(&axis_u) / su;
    let b = d.dot(&axis_v) / sv;
    let g = (-(a * a + b * b) / c(2.0)).exp();
    if g < cutoff {
        return None;
    }
    Some(Fragment {
        surfel: index,
        t,
        gauss: g,
        alpha: surfel.opacity() * g,
    })
}

// ---------------------------------------------------------------------------
// Per-view splat preparation shared by forward and backward.

#[derive(Debug, Clone)]
pub(crate) struct SplatView<T> {
    pub center_cam: Vector3<T>,
    pub axis_u: Vector3<T>,
    pub axis_v: Vector3<T>,
    pub normal_cam: Vector3<T>,
    pub su: T,
    pub sv: T,
    pub alpha: T,
    pub color: [T; 3],
    /// Unit view direction (world), center minus camera center.
    pub dir: Vector3<T>,
    pub dist: T,
    pub proj_px: (T, T),
    pub depth_center: T,
    pub flip: T,
    /// Inclusive pixel bounds of the conservative footprint.
    pub bbox: (i64, i64, i64, i64),
    pub visible: bool,
}

pub(crate) fn prepare_splats<T: Real>(
    cloud: &SurfelCloud<T>,
    pose: &Pose<T>,
    k: &Intrinsics<T>,
    cfg: &RenderConfig<T>,
) -> Vec<SplatView<T>> {
    let rot = pose.rotation_matrix();
    let cam_center = pose.camera_center();
    let (w, h) = (k.width as i64, k.height as i64);
    cloud
        .surfels
        .iter()
        .map(|s| {
            let center_cam = rot * s.center + pose.translation;
            let frame = s.frame();
            let axis_u = rot * Vector3::from(frame.column(0));
            let axis_v = rot * Vector3::from(frame.column(1));
            let normal_cam = rot * Vector3::from(frame.column(2));
            let [su, sv] = s.scale();
            let alpha = s.opacity();

            let raw_dir = s.center - cam_center;
            let dist = raw_dir.norm().max(c(1e-12));
            let dir = raw_dir / dist;
            let color = eval_truncated_sh(&s.sh, &dir, cfg.sh_degree);

            let depth_center = center_cam.z;
            let in_front = depth_center > T::EPS_BEHIND;
            let proj_px = if in_front {
                (
                    k.fx * center_cam.x / depth_center + k.cx,
                    k.fy * center_cam.y / depth_center + k.cy,
                )
            } else {
                (T::zero(), T::zero())
            };
            // Normal buffer sign: face the camera.
            let flip = if normal_cam.dot(&center_cam) > T::zero() {
                -T::one()
            } else {
                T::one()
            };

            // Conservative footprint: projected corners of the 3σ tangent
            // rectangle, unioned with the 3σ screen-space low-pass disk.
            let three = c::<T>(3.0);
            let mut lo_x = T::max_value().unwrap();
            let mut lo_y = T::max_value().unwrap();
            let mut hi_x = T::min_value().unwrap();
            let mut hi_y = T::min_value().unwrap();
            let mut any_front = false;
            let mut all_front = true;
            for (sx, sy) in [(-three, -three), (three, -three), (-three, three), (three, three)] {
                let corner = center_cam + axis_u * (sx * su) + axis_v * (sy * sv);
                if corner.z > T::EPS_BEHIND {
                    any_front = true;
                    let px = k.fx * corner.x / corner.z + k.cx;
                    let py = k.fy * corner.y / corner.z + k.cy;
                    lo_x = lo_x.min(px);
                    lo_y = lo_y.min(py);
                    hi_x = hi_x.max(px);
                    hi_y = hi_y.max(py);
                } else {
                    all_front = false;
                }
            }
            if in_front {
                let r = three * cfg.screen_sigma;
                lo_x = lo_x.min(proj_px.0 - r);
                lo_y = lo_y.min(proj_px.1 - r);
                hi_x = hi_x.max(proj_px.0 + r);
                hi_y = hi_y.max(proj_px.1 + r);
            }
            let visible = (any_front || in_front) && alpha >= cfg.min_alpha;
            let bbox = if !visible {
                (0, 0, -1, -1)
            } else if all_front || (!any_front && in_front) {
                (
                    (lo_x.to_f64c().floor() as i64).clamp(0, w - 1),
                    (lo_y.to_f64c().floor() as i64).clamp(0, h - 1),
                    (hi_x.to_f64c().ceil() as i64).clamp(0, w - 1),
                    (hi_y.to_f64c().ceil() as i64).clamp(0, h - 1),
                )
            } else {
                // Footprint straddles the camera plane: keep every pixel.
                (0, 0, w - 1, h - 1)
            };
            SplatView {
                center_cam,
                axis_u,
                axis_v,
                normal_cam,
                su,
                sv,
                alpha,
                color,
                dir,
                dist,
                proj_px,
                depth_center,
                flip,
                bbox,
                visible,
            }
        })
        .collect()
}

fn eval_truncated_sh<T: Real>(sh: &[T], dir: &Vector3<T>, degree: usize) -> [T; 3] {
    let b = sh_basis(dir);
    let n_coef = (degree + 1) * (degree + 1);
    let half = c::<T>(0.5);
    std::array::from_fn(|ch| {
        let base = ch * SH_COEFFS;
        let mut v = half;
        for k in 0..n_coef.min(SH_COEFFS) {
            v += sh[base + k] * b[k];
        }
        v.max(T::zero())
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Branch {
    Plane,
    Screen,
}

/// Fragment evaluation of one splat at one pixel center; `None` is a miss.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FragEval<T> {
    pub t: T,
    pub gauss: T,
    pub alpha: T,
    pub branch: Branch,
}

#[inline]
pub(crate) fn eval_fragment<T: Real>(
    sv: &SplatView<T>,
    px: T,
    py: T,
    k: &Intrinsics<T>,
    cfg: &RenderConfig<T>,
) -> Option<FragEval<T>> {
    let dirh = Vector3::new((px - k.cx) / k.fx, (py - k.cy) / k.fy, T::one());
    let half = c::<T>(0.5);

    // Plane branch: exact ray-splat intersection, depth-parameterized.
    let mut plane: Option<(T, T)> = None; // (r², τ)
    let denom = sv.normal_cam.dot(&dirh);
    if denom.abs() > c(1e-12) {
        let tau = sv.normal_cam.dot(&sv.center_cam) / denom;
        if tau > T::EPS_BEHIND {
            let dvec = dirh * tau - sv.center_cam;
            let a = dvec.dot(&sv.axis_u) / sv.su;
            let b = dvec.dot(&sv.axis_v) / sv.sv;
            plane = Some((a * a + b * b, tau));
        }
    }

    // Screen branch: 2-pixel low-pass Gaussian around the projected center.
    let screen: Option<(T, T)> = if sv.depth_center > T::EPS_BEHIND {
        let dx = px - sv.proj_px.0;
        let dy = py - sv.proj_px.1;
        let s2 = cfg.screen_sigma * cfg.screen_sigma;
        Some(((dx * dx + dy * dy) / s2, sv.depth_center))
    } else {
        None
    };

    let (r2, t, branch) = match (plane, screen) {
        (Some((rp, tp)), Some((rs, _))) if rp <= rs => (rp, tp, Branch::Plane),
        (Some(_), Some((rs, ts))) => (rs, ts, Branch::Screen),
        (Some((rp, tp)), None) => (rp, tp, Branch::Plane),
        (None, Some((rs, ts))) => (rs, ts, Branch::Screen),
        (None, None) => return None,
    };
    let gauss = (-r2 * half).exp();
    if gauss < cfg.cutoff_gauss {
        return None;
    }
    let alpha = sv.alpha * gauss;
    if alpha < cfg.min_alpha {
        return None;
    }
    Some(FragEval {
        t,
        gauss,
        alpha,
        branch,
    })
}

/// Splat indices overlapping each tile, sorted by (center depth, index).
pub(crate) fn tile_lists<T: Real>(
    splats: &[SplatView<T>],
    k: &Intrinsics<T>,
    tile: usize,
) -> (usize, usize, Vec<Vec<u32>>) {
    let tiles_x = k.width.div_ceil(tile);
    let tiles_y = k.height.div_ceil(tile);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, sv) in splats.iter().enumerate() {
        if !sv.visible || sv.bbox.2 < sv.bbox.0 {
            continue;
        }
        let tx0 = (sv.bbox.0 as usize) / tile;
        let ty0 = (sv.bbox.1 as usize) / tile;
        let tx1 = (sv.bbox.2 as usize) / tile;
        let ty1 = (sv.bbox.3 as usize) / tile;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    for list in lists.iter_mut() {
        list.sort_by(|&a, &b| {
            let da = splats[a as usize].depth_center;
            let db = splats[b as usize].depth_center;
            da.partial_cmp(&db)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
    }
    (tiles_x, tiles_y, lists)
}

/// Renders the cloud into per-pixel buffers. Internally parallel over
/// tiles; the call is synchronous and deterministic.
pub fn render<T: Real>(
    cloud: &SurfelCloud<T>,
    pose: &Pose<T>,
    k: &Intrinsics<T>,
    cfg: &RenderConfig<T>,
) -> RenderTarget<T> {
    let splats = prepare_splats(cloud, pose, k, cfg);
    let tile = cfg.tile_size.max(1);
    let (tiles_x, tiles_y, lists) = tile_lists(&splats, k, tile);
    let mut target = RenderTarget::zeros(k.width, k.height);

    // Each tile owns a disjoint pixel range; gather then scatter in order.
    let tile_results: Vec<_> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x0 = tx * tile;
            let y0 = ty * tile;
            let x1 = (x0 + tile).min(k.width);
            let y1 = (y0 + tile).min(k.height);
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    out.push(composite_pixel(&splats, &lists[ti], x, y, k, cfg));
                }
            }
            out
        })
        .collect();

    for (ti, pixels) in tile_results.into_iter().enumerate() {
        let tx = ti % tiles_x;
        let ty = ti / tiles_x;
        let x0 = tx * tile;
        let x1 = (x0 + tile).min(k.width);
        let mut it = pixels.into_iter();
        for y in (ty * tile)..((ty * tile + tile).min(k.height)) {
            for x in x0..x1 {
                let px = it.next().unwrap();
                target.color.set(x, y, px.color);
                target.color2.set(x, y, px.color2);
                target.depth.set(x, y, [px.depth]);
                target.normal.set(x, y, px.normal);
                target.acc.set(x, y, [px.acc]);
                target.distortion.set(x, y, [px.distortion]);
                target.frag_count[y * k.width + x] = px.frags;
            }
        }
    }
    target
}

pub(crate) struct PixelOut<T> {
    pub color: [T; 3],
    pub color2: [T; 3],
    pub depth: T,
    pub normal: [T; 3],
    pub acc: T,
    pub distortion: T,
    pub frags: u32,
}

pub(crate) fn composite_pixel<T: Real>(
    splats: &[SplatView<T>],
    order: &[u32],
    x: usize,
    y: usize,
    k: &Intrinsics<T>,
    cfg: &RenderConfig<T>,
) -> PixelOut<T> {
    let px = T::from_usize(x).unwrap() + c(0.5);
    let py = T::from_usize(y).unwrap() + c(0.5);
    let mut color = [T::zero(); 3];
    let mut color2 = [T::zero(); 3];
    let mut normal = [T::zero(); 3];
    let mut sum_w = T::zero();
    let mut sum_wt = T::zero();
    let mut distortion = T::zero();
    let mut trans = T::one();
    let mut frags = 0u32;

    for &si in order {
        if cfg.early_stop > T::zero() && trans < cfg.early_stop {
            break;
        }
        let sv = &splats[si as usize];
        let Some(f) = eval_fragment(sv, px, py, k, cfg) else {
            continue;
        };
        let w = f.alpha * trans;
        // Pairwise depth distortion, streamed: 2w·(t·Σw_prev − Σ(w·t)_prev).
        distortion += c::<T>(2.0) * w * (f.t * sum_w - sum_wt);
        for ch in 0..3 {
            color[ch] += w * sv.color[ch];
            color2[ch] += w * sv.color[ch] * sv.color[ch];
            normal[ch] += w * sv.flip * sv.normal_cam[ch];
        }
        sum_w += w;
        sum_wt += w * f.t;
        trans *= T::one() - f.alpha;
        frags += 1;
    }
    for ch in 0..3 {
        color[ch] += trans * cfg.background[ch];
    }
    PixelOut {
        color,
        color2,
        depth: sum_wt / sum_w.max(cfg.depth_eps),
        normal,
        acc: sum_w,
        distortion,
        frags,
    }
}

/// Rotation matrix helper reused by the backward pass.
pub(crate) fn rotation_of<T: Real>(q: &Quaternion<T>) -> Matrix3<T> {
    crate::geometry::quat_to_matrix(q)
}
