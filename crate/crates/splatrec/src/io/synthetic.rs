//! Synthetic scene generator: ground-truth surfels rendered through the
//! rasterizer itself produce images and depths; pointmaps come from
//! back-projected true depth plus configurable noise; correspondences are
//! exact matches from the true geometry with deterministic outlier
//! injection. Everything is reproducible from the seed.

use super::{CameraRecord, GroundTruth, Meta, SceneBundle, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::geometry::{backproject_unchecked, project, Intrinsics, Pose, Quaternion};
use crate::image::{Image1, Image3};
use crate::losses::Correspondence;
use crate::pointmap::PointMapPair;
use crate::real::Real;
use crate::render::{render, RenderConfig};
use crate::sh::{dc_from_color, SH_COEFFS, SH_TOTAL};
use crate::surfel::{logit, tangent_frame, Surfel, SurfelCloud};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Plane,
    Sphere,
    Dihedral,
    Soup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Texture {
    Checker { period: usize },
    RandomSh,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: Shape,
    pub surfel_count: usize,
    pub texture: Texture,
    pub views: usize,
    pub ring_radius: f64,
    /// Angular spread of the camera ring in degrees.
    pub ring_spread_deg: f64,
    pub image_size: (usize, usize),
    pub focal: f64,
    /// Rotation noise on the bundled initial cameras, degrees (exact
    /// magnitude, random axis).
    pub pose_noise_deg: f64,
    /// Translation noise as a fraction of the ring radius (exact
    /// magnitude, random direction).
    pub trans_noise_frac: f64,
    /// Additive Gaussian noise on the pointmap depths.
    pub depth_noise: f64,
    /// Random per-edge scale applied to pointmap pairs, emulating the
    /// pairwise scale ambiguity: σ ∈ [1/(1+j), 1+j].
    pub edge_scale_jitter: f64,
    pub corr_count: usize,
    pub corr_outlier_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shape: Shape::Plane,
            surfel_count: 256,
            texture: Texture::Checker { period: 4 },
            views: 3,
            ring_radius: 2.0,
            ring_spread_deg: 30.0,
            image_size: (32, 32),
            focal: 32.0,
            pose_noise_deg: 0.0,
            trans_noise_frac: 0.0,
            depth_noise: 0.0,
            edge_scale_jitter: 0.0,
            corr_count: 300,
            corr_outlier_rate: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views < 1 || self.surfel_count < 1 {
            return Err(Error::InvalidInput("synthetic: counts must be ≥ 1".into()));
        }
        for (name, v) in [
            ("pose_noise_deg", self.pose_noise_deg),
            ("trans_noise_frac", self.trans_noise_frac),
            ("depth_noise", self.depth_noise),
            ("edge_scale_jitter", self.edge_scale_jitter),
            ("corr_outlier_rate", self.corr_outlier_rate),
        ] {
            if v < 0.0 {
                return Err(Error::InvalidInput(format!("synthetic: {name} must be ≥ 0")));
            }
        }
        if self.corr_outlier_rate > 1.0 {
            return Err(Error::InvalidInput("synthetic: outlier rate > 1".into()));
        }
        Ok(())
    }
}

/// World-to-camera pose looking from `eye` toward `target` with +y world
/// up mapping to image down.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Pose<f64> {
    let forward = (target - eye).normalize();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rot = nalgebra::Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]);
    let q = Quaternion::from_matrix(&rot);
    let t = -(rot * eye);
    Pose::new(q, t)
}

fn texture_color(tex: &Texture, u: f64, v: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match tex {
        Texture::Checker { period } => {
            let p = (*period).max(1) as f64;
            let cell = ((u * p).floor() as i64 + (v * p).floor() as i64).rem_euclid(2);
            if cell == 0 {
                [0.85, 0.35, 0.25]
            } else {
                [0.2, 0.55, 0.8]
            }
        }
        Texture::RandomSh => [
            0.25 + 0.5 * rng.gen::<f64>(),
            0.25 + 0.5 * rng.gen::<f64>(),
            0.25 + 0.5 * rng.gen::<f64>(),
        ],
    }
}

/// Ground-truth surfel set for a given shape. The object is centered at
/// the origin with unit-ish extent.
pub fn ground_truth_surfels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> SurfelCloud<f64> {
    let mut cloud = SurfelCloud::default();
    let mut push = |center: Vector3<f64>, normal: Vector3<f64>, scale: f64, color: [f64; 3]| {
        let (_, quat) = tangent_frame(&normal);
        let mut sh = vec![0.0; SH_TOTAL];
        for ch in 0..3 {
            sh[ch * SH_COEFFS] = dc_from_color(color[ch]);
        }
        cloud.surfels.push(Surfel {
            center,
            rotation: quat,
            log_scale: [scale.ln(), scale.ln()],
            opacity_raw: logit(0.95),
            sh,
        });
        cloud.source_view.push(0);
    };

    match spec.shape {
        Shape::Plane => {
            let grid = (spec.surfel_count as f64).sqrt().ceil() as usize;
            let extent = 1.6;
            let spacing = extent / grid as f64;
            for gy in 0..grid {
                for gx in 0..grid {
                    let u = (gx as f64 + 0.5) / grid as f64;
                    let v = (gy as f64 + 0.5) / grid as f64;
                    let color = texture_color(&spec.texture, u, v, rng);
                    push(
                        Vector3::new((u - 0.5) * extent, (v - 0.5) * extent, 0.0),
                        Vector3::new(0.0, 0.0, -1.0),
                        spacing * 0.8,
                        color,
                    );
                }
            }
        }
        Shape::Sphere => {
            let radius = 0.6;
            let n = spec.surfel_count;
            let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
            for i in 0..n {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let theta = golden * i as f64;
                let p = Vector3::new(r * theta.cos(), y, r * theta.sin());
                let u = theta.rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
                let v = (y + 1.0) / 2.0;
                let color = texture_color(&spec.texture, u * 4.0, v * 4.0, rng);
                let area_per = 4.0 * std::f64::consts::PI * radius * radius / n as f64;
                push(p * radius, p, area_per.sqrt() * 0.9, color);
            }
        }
        Shape::Dihedral => {
            let grid = (spec.surfel_count as f64 / 2.0).sqrt().ceil() as usize;
            let extent = 1.2;
            let spacing = extent / grid as f64;
            let tilt = 30.0_f64.to_radians();
            for (sign, nrm) in [
                (
                    -1.0,
                    Vector3::new(tilt.sin(), 0.0, -tilt.cos()).normalize(),
                ),
                (1.0, Vector3::new(-tilt.sin(), 0.0, -tilt.cos()).normalize()),
            ] {
                for gy in 0..grid {
                    for gx in 0..grid {
                        let u = (gx as f64 + 0.5) / grid as f64;
                        let v = (gy as f64 + 0.5) / grid as f64;
                        let x = sign * u * extent / 2.0;
                        let y = (v - 0.5) * extent;
                        let z = u * extent / 2.0 * tilt.tan();
                        let color = texture_color(&spec.texture, u, v, rng);
                        push(Vector3::new(x, y, z), nrm, spacing * 0.8, color);
                    }
                }
            }
        }
        Shape::Soup => {
            for _ in 0..spec.surfel_count {
                let center = Vector3::new(
                    (rng.gen::<f64>() - 0.5) * 1.2,
                    (rng.gen::<f64>() - 0.5) * 1.2,
                    (rng.gen::<f64>() - 0.5) * 0.6,
                );
                let normal = Vector3::new(
                    (rng.gen::<f64>() - 0.5) * 0.8,
                    (rng.gen::<f64>() - 0.5) * 0.8,
                    -1.0,
                )
                .normalize();
                let color = texture_color(&spec.texture, rng.gen(), rng.gen(), rng);
                push(center, normal, 0.06 + rng.gen::<f64>() * 0.08, color);
            }
        }
    }
    cloud
}

/// Camera ring on the −z side of the object looking at the origin.
pub fn camera_ring(spec: &SyntheticSpec) -> Vec<Pose<f64>> {
    let spread = spec.ring_spread_deg.to_radians();
    (0..spec.views)
        .map(|v| {
            let a = if spec.views == 1 {
                0.0
            } else {
                (v as f64 / (spec.views - 1) as f64 - 0.5) * spread
            };
            let eye = Vector3::new(
                spec.ring_radius * a.sin(),
                spec.ring_radius * 0.15 * a.cos(),
                -spec.ring_radius * a.cos(),
            );
            look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0))
        })
        .collect()
}

pub struct SyntheticScene {
    pub bundle: SceneBundle,
    pub gt_cloud: SurfelCloud<f64>,
    pub true_poses: Vec<Pose<f64>>,
    pub intrinsics: Intrinsics<f64>,
}

/// Unit Gaussian via Box–Muller, deterministic from the RNG stream.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = spec.image_size;
    let k = Intrinsics::centered(spec.focal, w, h);
    let gt_cloud = ground_truth_surfels(spec, &mut rng);
    let true_poses = camera_ring(spec);

    // Render ground truth through the rasterizer itself.
    let render_cfg = RenderConfig::default();
    let mut images = Vec::new();
    let mut depths = Vec::new();
    let mut normals = Vec::new();
    let mut accs = Vec::new();
    for pose in &true_poses {
        let t = render(&gt_cloud, pose, &k, &render_cfg);
        images.push(t.color.map(|v| v as f32));
        let depth = Image1::from_fn(w, h, |x, y| {
            if t.acc.get(x, y)[0] >= 0.5 {
                [t.depth.get(x, y)[0] as f32]
            } else {
                [0.0f32]
            }
        });
        let normal = Image3::from_fn(w, h, |x, y| {
            let n = t.normal.get(x, y);
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 1e-9 && t.acc.get(x, y)[0] >= 0.5 {
                [
                    (n[0] / len) as f32,
                    (n[1] / len) as f32,
                    (n[2] / len) as f32,
                ]
            } else {
                [0.0, 0.0, 0.0]
            }
        });
        depths.push(depth);
        normals.push(normal);
        accs.push(t.acc);
    }

    // Pointmap pairs along the view ring; both maps live in view n's
    // camera frame at the edge's own scale.
    let mut pairs = Vec::new();
    let ring_edges: Vec<(usize, usize)> = if spec.views == 1 {
        Vec::new()
    } else if spec.views == 2 {
        vec![(0, 1), (1, 0)]
    } else {
        (0..spec.views).map(|v| (v, (v + 1) % spec.views)).collect()
    };
    for &(n, m) in &ring_edges {
        let sigma = if spec.edge_scale_jitter > 0.0 {
            let j = spec.edge_scale_jitter;
            let lo = 1.0 / (1.0 + j);
            lo + rng.gen::<f64>() * ((1.0 + j) - lo)
        } else {
            1.0
        };
        let mut make_points = |view: usize, frame_pose: &Pose<f64>| {
            let mut pts = Image3::<f32>::zeros(w, h);
            let mut conf = Image1::<f32>::zeros(w, h);
            for y in 0..h {
                for x in 0..w {
                    let i = (y * w + x) * 3;
                    let d = depths[view].get(x, y)[0] as f64;
                    if d <= 0.0 {
                        // Unconfident pixels carry zero points.
                        continue;
                    }
                    let d = d + if spec.depth_noise > 0.0 {
                        gauss(&mut rng) * spec.depth_noise
                    } else {
                        0.0
                    };
                    if d <= 0.0 {
                        continue;
                    }
                    let u = (x as f64 + 0.5) / w as f64;
                    let v = (y as f64 + 0.5) / h as f64;
                    let world = backproject_unchecked((u, v), d, &true_poses[view], &k);
                    let local = frame_pose.transform(&world) * sigma;
                    pts.data[i] = local.x as f32;
                    pts.data[i + 1] = local.y as f32;
                    pts.data[i + 2] = local.z as f32;
                    conf.data[y * w + x] = 1.0;
                }
            }
            (pts, conf)
        };
        let frame = true_poses[n];
        let (points_n, conf_n) = make_points(n, &frame);
        let (points_m, conf_m) = make_points(m, &frame);
        pairs.push(PointMapPair {
            view_n: n,
            view_m: m,
            points_n,
            points_m,
            conf_n,
            conf_m,
        });
    }

    // Exact correspondences with deterministic outlier injection.
    let mut corrs = Vec::new();
    if spec.views >= 2 {
        let mut attempts = 0;
        while corrs.len() < spec.corr_count && attempts < spec.corr_count * 50 {
            attempts += 1;
            let e = ring_edges[rng.gen_range(0..ring_edges.len())];
            let x = rng.gen_range(0..w);
            let y = rng.gen_range(0..h);
            let d = depths[e.0].get(x, y)[0] as f64;
            if d <= 0.0 {
                continue;
            }
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let world = backproject_unchecked((u, v), d, &true_poses[e.0], &k);
            let (uvm, ok) = project(&world, &true_poses[e.1], &k);
            if !ok || !(0.0..1.0).contains(&uvm.x) || !(0.0..1.0).contains(&uvm.y) {
                continue;
            }
            let px = (uvm.x * w as f64) as usize;
            let py = (uvm.y * h as f64) as usize;
            if accs[e.1].get(px.min(w - 1), py.min(h - 1))[0] < 0.5 {
                continue;
            }
            corrs.push(Correspondence {
                view_n: e.0,
                view_m: e.1,
                p_n: (u as f32, v as f32),
                p_m: (uvm.x as f32, uvm.y as f32),
                weight: 1.0,
            });
        }
        // Exactly ⌊rate·count⌋ outliers at deterministic positions.
        let n_outliers = (spec.corr_outlier_rate * corrs.len() as f64).floor() as usize;
        let mut indices: Vec<usize> = (0..corrs.len()).collect();
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        for &i in indices.iter().take(n_outliers) {
            corrs[i].p_m = (rng.gen::<f32>(), rng.gen::<f32>());
        }
    }

    // Initial cameras: exact-magnitude perturbations of the truth.
    let mut perturbations = Vec::new();
    let init_records: Vec<CameraRecord> = true_poses
        .iter()
        .map(|pose| {
            let mut delta = [0.0f64; 6];
            if spec.pose_noise_deg > 0.0 {
                let axis = Vector3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                )
                .normalize();
                let omega = axis * spec.pose_noise_deg.to_radians();
                delta[0] = omega.x;
                delta[1] = omega.y;
                delta[2] = omega.z;
            }
            if spec.trans_noise_frac > 0.0 {
                let dir = Vector3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                )
                .normalize();
                let t = dir * spec.trans_noise_frac * spec.ring_radius;
                delta[3] = t.x;
                delta[4] = t.y;
                delta[5] = t.z;
            }
            perturbations.push(delta);
            let noisy = crate::geometry::pose_retract(pose, &delta);
            CameraRecord::from_parts(&noisy.cast::<f32>(), &k.cast::<f32>())
        })
        .collect();

    let gt_records: Vec<CameraRecord> = true_poses
        .iter()
        .map(|p| CameraRecord::from_parts(&p.cast::<f32>(), &k.cast::<f32>()))
        .collect();

    // Permissive masks where the ground truth is covered.
    let masks: Vec<Image1<f32>> = accs
        .iter()
        .map(|acc| {
            Image1::from_fn(w, h, |x, y| {
                [if acc.get(x, y)[0] >= 0.5 { 1.0f32 } else { 0.0 }]
            })
        })
        .collect();

    let bundle = SceneBundle {
        meta: Meta {
            schema_version: SCHEMA_VERSION,
            width: w,
            height: h,
            num_views: spec.views,
            provenance: "synthetic".into(),
        },
        images,
        pairs,
        corrs,
        cameras: Some(init_records),
        masks: Some(masks),
        gt: Some(GroundTruth {
            cameras: gt_records,
            depths,
            normals,
            mesh: None,
            perturbations: Some(perturbations),
        }),
    };
    Ok(SyntheticScene {
        bundle,
        gt_cloud,
        true_poses,
        intrinsics: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{rel_error, DepthEval};

    #[test]
    fn zero_noise_pointmaps_match_gt_depth() {
        let spec = SyntheticSpec {
            views: 2,
            ..Default::default()
        };
        let scene = generate_synthetic(&spec).unwrap();
        // The reference-view pointmap of edge (0,1) lives in view 0's
        // camera frame; its z equals the gt depth wherever confident.
        let pair = &scene.bundle.pairs[0];
        let gt = &scene.bundle.gt.as_ref().unwrap().depths[pair.view_n];
        let w = gt.width;
        let pm_depth = Image1::from_fn(w, gt.height, |x, y| {
            [pair.points_n.data[(y * w + x) * 3 + 2]]
        });
        let eval = DepthEval {
            pred: &pm_depth,
            gt,
            mask: Some(&pair.conf_n),
        };
        let rel = rel_error(&eval, false).unwrap();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn outlier_count_is_exact() {
        let spec = SyntheticSpec {
            views: 3,
            corr_count: 1000,
            corr_outlier_rate: 0.1,
            seed: 42,
            ..Default::default()
        };
        let scene = generate_synthetic(&spec).unwrap();
        let corrs = &scene.bundle.corrs;
        assert_eq!(corrs.len(), 1000);
        // Outliers are exact matches replaced by random pixels: count how
        // many disagree with the true reprojection.
        let k = scene.intrinsics;
        let mut outliers = 0;
        for c in corrs {
            let d = scene.bundle.gt.as_ref().unwrap().depths[c.view_n]
                .sample_bilinear(c.p_n.0, c.p_n.1)[0] as f64;
            let world = backproject_unchecked(
                (c.p_n.0 as f64, c.p_n.1 as f64),
                d,
                &scene.true_poses[c.view_n],
                &k,
            );
            let (uvm, _) = project(&world, &scene.true_poses[c.view_m], &k);
            let err = ((uvm.x - c.p_m.0 as f64).powi(2) + (uvm.y - c.p_m.1 as f64).powi(2)).sqrt();
            if err > 1e-3 {
                outliers += 1;
            }
        }
        assert_eq!(outliers, 100);
    }

    #[test]
    fn pose_jitter_bookkeeping() {
        let spec = SyntheticSpec {
            views: 3,
            pose_noise_deg: 2.0,
            trans_noise_frac: 0.02,
            seed: 11,
            ..Default::default()
        };
        let scene = generate_synthetic(&spec).unwrap();
        let gt = scene.bundle.gt.as_ref().unwrap();
        let perts = gt.perturbations.as_ref().unwrap();
        let init = scene.bundle.cameras.as_ref().unwrap();
        for ((record, pert), truth) in init.iter().zip(perts).zip(&scene.true_poses) {
            let expect = crate::geometry::pose_retract(truth, pert);
            let got = record.pose();
            assert!(
                (got.translation.map(|v| v as f64) - expect.translation).norm() < 1e-6,
                "translation bookkeeping"
            );
            let got_q = got.rotation.as_array().map(|v| v as f64);
            let want_q = expect.rotation.as_array();
            let dot: f64 = (0..4).map(|i| got_q[i] * want_q[i]).sum();
            assert!(dot.abs() > 1.0 - 1e-9, "rotation bookkeeping: dot {dot}");
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticSpec {
            views: 3,
            pose_noise_deg: 1.0,
            depth_noise: 0.01,
            corr_outlier_rate: 0.05,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.bundle.images[0].data, b.bundle.images[0].data);
        assert_eq!(a.bundle.pairs[0].points_m.data, b.bundle.pairs[0].points_m.data);
        assert_eq!(a.bundle.corrs.len(), b.bundle.corrs.len());
        for (x, y) in a.bundle.corrs.iter().zip(&b.bundle.corrs) {
            assert_eq!(x.p_m, y.p_m);
        }
    }
}
