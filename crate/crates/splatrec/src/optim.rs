//! Adam over surfel parameters and pose tangents, the joint reconstruction
//! loop, and test-time camera optimization with frozen splats.

use crate::error::{Error, Result};
use crate::geometry::{pose_retract, Intrinsics, Pose, Quaternion};
use crate::image::Image3;
use crate::losses::{
    correspondence_loss, photometric, reg_geometric, total_loss, variance_loss, AdjointBuilder,
    Correspondence, LossReport, LossWeights, TotalInputs,
};
use crate::real::{c, Real};
use crate::render::{render, render_backward, GradientBundle, RenderConfig};
use crate::surfel::SurfelCloud;
use serde::{Deserialize, Serialize};

/// First/second moment accumulators for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            beta1: c(0.9),
            beta2: c(0.999),
            eps: c(1e-15),
        }
    }

    /// Bias-corrected update step to subtract from the parameters. Zero
    /// gradients yield an exactly zero update.
    pub fn update(&mut self, grads: &[T], lr: T) -> Result<Vec<T>> {
        assert_eq!(grads.len(), self.m.len(), "adam: shape mismatch");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged("adam: non-finite gradient".into()));
        }
        self.step += 1;
        let t = T::from_u64(self.step).unwrap();
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        let mut out = vec![T::zero(); grads.len()];
        for i in 0..grads.len() {
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            if mh != T::zero() || vh != T::zero() {
                out[i] = lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(out)
    }
}

/// In-place Adam step on a flat parameter slice.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    let upd = state.update(grads, lr)?;
    for (p, u) in params.iter_mut().zip(upd) {
        *p -= u;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    /// Scaled by the scene extent before use.
    pub lr_center: f64,
    pub lr_quat: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub lr_pose: f64,
    /// Final/initial lr ratio for the decayed groups (center and pose).
    pub lr_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub optimize_poses: bool,
    /// Prune surfels with opacity below this after training; off by default.
    pub prune_opacity: Option<f64>,
    pub checkpoint_every: usize,
    /// Starting step (for resuming); shifts the schedules.
    pub start_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            lr_center: 1.6e-4,
            lr_quat: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_sh: 2.5e-3,
            lr_pose: 1e-3,
            lr_decay: 0.01,
            seed: 0,
            weights: LossWeights::default(),
            optimize_poses: true,
            prune_opacity: None,
            checkpoint_every: 0,
            start_step: 0,
        }
    }
}

/// Everything the optimizer needs in memory for one scene.
#[derive(Debug, Clone)]
pub struct TrainScene<T> {
    pub images: Vec<Image3<T>>,
    pub cloud: SurfelCloud<T>,
    pub poses: Vec<Pose<T>>,
    pub intrinsics: Intrinsics<T>,
    pub corrs: Vec<Correspondence<T>>,
}

pub struct TrainOutput<T> {
    pub cloud: SurfelCloud<T>,
    pub poses: Vec<Pose<T>>,
    pub log: Vec<LossReport>,
}

struct CloudAdam<T> {
    center: AdamState<T>,
    quat: AdamState<T>,
    scale: AdamState<T>,
    opacity: AdamState<T>,
    sh: AdamState<T>,
}

impl<T: Real> CloudAdam<T> {
    fn new(n: usize, sh_total: usize) -> Self {
        Self {
            center: AdamState::new(3 * n),
            quat: AdamState::new(4 * n),
            scale: AdamState::new(2 * n),
            opacity: AdamState::new(n),
            sh: AdamState::new(n * sh_total),
        }
    }
}

fn scene_extent<T: Real>(scene: &TrainScene<T>) -> T {
    let centers: Vec<_> = scene.poses.iter().map(|p| p.camera_center()).collect();
    let mut extent = T::zero();
    if centers.len() > 1 {
        let n = T::from_usize(centers.len()).unwrap();
        let mean = centers.iter().fold(nalgebra::Vector3::zeros(), |a, ct| a + ct) / n;
        for ct in &centers {
            extent = extent.max((ct - mean).norm());
        }
        extent *= c(1.1);
    }
    if extent <= T::zero() {
        let mut lo = nalgebra::Vector3::repeat(T::max_value().unwrap());
        let mut hi = nalgebra::Vector3::repeat(T::min_value().unwrap());
        for s in &scene.cloud.surfels {
            for a in 0..3 {
                lo[a] = lo[a].min(s.center[a]);
                hi[a] = hi[a].max(s.center[a]);
            }
        }
        extent = (hi - lo).norm();
    }
    extent.max(c(1e-6))
}

/// Exponentially decayed learning rate: lr·ratio^(t/T).
fn decayed<T: Real>(lr: T, ratio: f64, step: usize, total: usize) -> T {
    let frac = if total == 0 {
        0.0
    } else {
        (step as f64 / total as f64).min(1.0)
    };
    lr * c(ratio.powf(frac))
}

#[allow(clippy::too_many_arguments)]
fn apply_updates<T: Real>(
    cloud: &mut SurfelCloud<T>,
    poses: &mut [Pose<T>],
    splat_grads: &GradientBundle<T>,
    pose_grads: &[[T; 6]],
    adam: &mut CloudAdam<T>,
    pose_adam: &mut [AdamState<T>],
    cfg: &TrainConfig,
    extent: T,
    step: usize,
) -> Result<()> {
    let n = cloud.len();
    let sh_total = crate::sh::SH_TOTAL;

    let mut center_params: Vec<T> = Vec::with_capacity(3 * n);
    let mut quat_params: Vec<T> = Vec::with_capacity(4 * n);
    let mut scale_params: Vec<T> = Vec::with_capacity(2 * n);
    let mut opacity_params: Vec<T> = Vec::with_capacity(n);
    let mut sh_params: Vec<T> = Vec::with_capacity(n * sh_total);
    let mut center_grads: Vec<T> = Vec::with_capacity(3 * n);
    let mut quat_grads: Vec<T> = Vec::with_capacity(4 * n);
    let mut scale_grads: Vec<T> = Vec::with_capacity(2 * n);
    for (i, s) in cloud.surfels.iter().enumerate() {
        center_params.extend_from_slice(&[s.center.x, s.center.y, s.center.z]);
        quat_params.extend_from_slice(&s.rotation.as_array());
        scale_params.extend_from_slice(&s.log_scale);
        opacity_params.push(s.opacity_raw);
        sh_params.extend_from_slice(&s.sh);
        let g = &splat_grads.d_center[i];
        center_grads.extend_from_slice(&[g.x, g.y, g.z]);
        quat_grads.extend_from_slice(&splat_grads.d_quat[i]);
        scale_grads.extend_from_slice(&splat_grads.d_log_scale[i]);
    }

    let lr_center = decayed(c::<T>(cfg.lr_center), cfg.lr_decay, step, cfg.iters) * extent;
    adam_step(&mut center_params, &center_grads, &mut adam.center, lr_center)?;
    adam_step(&mut quat_params, &quat_grads, &mut adam.quat, c(cfg.lr_quat))?;
    adam_step(&mut scale_params, &scale_grads, &mut adam.scale, c(cfg.lr_scale))?;
    adam_step(
        &mut opacity_params,
        &splat_grads.d_opacity,
        &mut adam.opacity,
        c(cfg.lr_opacity),
    )?;
    adam_step(&mut sh_params, &splat_grads.d_sh, &mut adam.sh, c(cfg.lr_sh))?;

    for (i, s) in cloud.surfels.iter_mut().enumerate() {
        s.center = nalgebra::Vector3::new(
            center_params[3 * i],
            center_params[3 * i + 1],
            center_params[3 * i + 2],
        );
        s.rotation = Quaternion::from_array([
            quat_params[4 * i],
            quat_params[4 * i + 1],
            quat_params[4 * i + 2],
            quat_params[4 * i + 3],
        ]);
        s.log_scale = [scale_params[2 * i], scale_params[2 * i + 1]];
        s.opacity_raw = opacity_params[i];
        s.sh.copy_from_slice(&sh_params[i * sh_total..(i + 1) * sh_total]);
    }

    if cfg.optimize_poses {
        let lr_pose = decayed(c::<T>(cfg.lr_pose), cfg.lr_decay, step, cfg.iters);
        for (v, pose) in poses.iter_mut().enumerate() {
            let upd = pose_adam[v].update(&pose_grads[v], lr_pose)?;
            let delta: [T; 6] = std::array::from_fn(|i| -upd[i]);
            *pose = pose_retract(pose, &delta);
        }
    }
    Ok(())
}

/// Joint optimization of surfels and poses: every step renders all training
/// views, evaluates the scheduled total objective, backpropagates and
/// applies Adam to splats and pose tangents together. Divergence (a
/// non-finite total) aborts with the last good state.
pub fn reconstruct<T: Real>(
    scene: &TrainScene<T>,
    cfg: &TrainConfig,
    render_cfg: &RenderConfig<T>,
    mut on_checkpoint: Option<&mut dyn FnMut(usize, &SurfelCloud<T>, &[Pose<T>])>,
) -> Result<TrainOutput<T>> {
    if scene.images.len() != scene.poses.len() {
        return Err(Error::InvalidInput(
            "reconstruct: one pose per training image required".into(),
        ));
    }
    if scene.cloud.is_empty() {
        return Err(Error::InvalidInput("reconstruct: empty cloud".into()));
    }
    let n_views = scene.images.len();
    let k = &scene.intrinsics;
    let huber_delta: T = T::one() / T::from_usize(k.width.max(k.height)).unwrap();

    let mut cloud = scene.cloud.clone();
    let mut poses = scene.poses.clone();
    let extent = scene_extent(scene);
    let mut adam = CloudAdam::new(cloud.len(), crate::sh::SH_TOTAL);
    let mut pose_adam: Vec<AdamState<T>> = (0..n_views).map(|_| AdamState::new(6)).collect();
    let mut log = Vec::with_capacity(cfg.iters.saturating_sub(cfg.start_step));
    let mut last_good: Option<(SurfelCloud<T>, Vec<Pose<T>>)> = None;

    for step in cfg.start_step..cfg.iters {
        let step_result = train_step(
            &cloud,
            &poses,
            scene,
            cfg,
            render_cfg,
            k,
            huber_delta,
            step,
            n_views,
        );
        let (report, splat_grads, pose_grads) = match step_result {
            Ok(v) => v,
            Err(Error::Diverged(msg)) => {
                if let Some((good_cloud, good_poses)) = last_good {
                    log::warn!("reconstruct aborted at step {step}: {msg}; keeping last good state");
                    return Ok(TrainOutput {
                        cloud: good_cloud,
                        poses: good_poses,
                        log,
                    });
                }
                return Err(Error::Diverged(msg));
            }
            Err(e) => return Err(e),
        };
        log.push(report);
        last_good = Some((cloud.clone(), poses.clone()));

        apply_updates(
            &mut cloud,
            &mut poses,
            &splat_grads,
            &pose_grads,
            &mut adam,
            &mut pose_adam,
            cfg,
            extent,
            step,
        )?;

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(cb) = on_checkpoint.as_mut() {
                cb(step + 1, &cloud, &poses);
            }
        }
    }

    if let Some(min_op) = cfg.prune_opacity {
        let keep: Vec<bool> = cloud
            .surfels
            .iter()
            .map(|s| s.opacity().to_f64c() >= min_op)
            .collect();
        let mut pruned = SurfelCloud::default();
        for (i, s) in cloud.surfels.into_iter().enumerate() {
            if keep[i] {
                pruned.surfels.push(s);
                pruned.source_view.push(cloud.source_view[i]);
            }
        }
        cloud = pruned;
    }

    Ok(TrainOutput { cloud, poses, log })
}

type StepOut<T> = (LossReport, GradientBundle<T>, Vec<[T; 6]>);

#[allow(clippy::too_many_arguments)]
fn train_step<T: Real>(
    cloud: &SurfelCloud<T>,
    poses: &[Pose<T>],
    scene: &TrainScene<T>,
    cfg: &TrainConfig,
    render_cfg: &RenderConfig<T>,
    k: &Intrinsics<T>,
    huber_delta: T,
    step: usize,
    n_views: usize,
) -> Result<StepOut<T>> {
    let nv = T::from_usize(n_views).unwrap();
    let lambda_var = if cfg.weights.var_enabled {
        crate::losses::lambda_var_schedule(step, cfg.iters)
    } else {
        0.0
    };
    let lambda_photo: T = c(cfg.weights.lambda_photo);
    let lambda_corr: T = if cfg.weights.corr_enabled {
        c(cfg.weights.lambda_corr)
    } else {
        T::zero()
    };

    let targets: Vec<_> = poses.iter().map(|p| render(cloud, p, k, render_cfg)).collect();

    let mut sums = TotalInputs {
        l1: 0.0,
        ssim_loss: 0.0,
        reg_distortion: 0.0,
        reg_normal: 0.0,
        corr: 0.0,
        var: 0.0,
    };
    let mut photo_outs = Vec::with_capacity(n_views);
    let mut reg_outs = Vec::with_capacity(n_views);
    let mut var_outs = Vec::with_capacity(n_views);
    for (v, target) in targets.iter().enumerate() {
        let ph = photometric(&target.color, &scene.images[v], c(cfg.weights.ssim_mix))?;
        sums.l1 += ph.l1.to_f64c() / n_views as f64;
        sums.ssim_loss += ph.ssim_loss.to_f64c() / n_views as f64;
        let reg = reg_geometric(
            target,
            k,
            c(cfg.weights.lambda_dist),
            c(cfg.weights.lambda_normal),
        );
        sums.reg_distortion += reg.distortion.to_f64c() / n_views as f64;
        sums.reg_normal += reg.normal.to_f64c() / n_views as f64;
        let var = variance_loss(target);
        sums.var += var.loss.to_f64c() / n_views as f64;
        photo_outs.push(ph);
        reg_outs.push(reg);
        var_outs.push(var);
    }

    let target_refs: Vec<&_> = targets.iter().collect();
    let corr = if cfg.weights.corr_enabled && !scene.corrs.is_empty() {
        Some(correspondence_loss(
            &scene.corrs,
            &target_refs,
            poses,
            k,
            huber_delta,
        )?)
    } else {
        None
    };
    if let Some(co) = &corr {
        sums.corr = co.loss.to_f64c();
    }

    let report = total_loss(&sums, &cfg.weights, step, cfg.iters)?;

    let mut splat_grads = GradientBundle::zeros(cloud.len());
    let mut pose_grads = vec![[T::zero(); 6]; n_views];
    let inv_views = T::one() / nv;
    for v in 0..n_views {
        let mut builder = AdjointBuilder::new(k.width, k.height);
        builder.add_color(&photo_outs[v].d_pred, lambda_photo * inv_views);
        builder.add_depth(&reg_outs[v].d_depth, lambda_photo * inv_views);
        builder.add_normal(&reg_outs[v].d_normal, lambda_photo * inv_views);
        builder.add_distortion(&reg_outs[v].d_distortion, lambda_photo * inv_views);
        if lambda_var > 0.0 {
            let lv: T = c(lambda_var);
            builder.add_color(&var_outs[v].d_color, lv * inv_views);
            builder.add_color2(&var_outs[v].d_color2, lv * inv_views);
        }
        if let Some(co) = &corr {
            builder.add_depth(&co.d_depth[v], lambda_corr);
        }
        let bundle = render_backward(cloud, &poses[v], k, render_cfg, &builder.build())?;
        if !bundle.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite gradients at step {step}, view {v}"
            )));
        }
        splat_grads.add_splat_grads(&bundle);
        for a in 0..6 {
            pose_grads[v][a] += bundle.d_pose[a];
        }
    }
    if let Some(co) = &corr {
        for (v, gp) in co.d_pose.iter().enumerate() {
            for a in 0..6 {
                pose_grads[v][a] += lambda_corr * gp[a];
            }
        }
    }
    Ok((report, splat_grads, pose_grads))
}

/// Optimizes only the pose tangents of test views under an L1 photometric
/// loss, keeping the surfels bit-identical. All test cameras step every
/// iteration, mirroring the training-time pose update.
pub fn test_time_camera_opt<T: Real>(
    cloud: &SurfelCloud<T>,
    test_images: &[Image3<T>],
    init_poses: &[Pose<T>],
    k: &Intrinsics<T>,
    iters: usize,
    lr_pose: f64,
    render_cfg: &RenderConfig<T>,
) -> Result<Vec<Pose<T>>> {
    if test_images.len() != init_poses.len() {
        return Err(Error::InvalidInput(
            "test_time_camera_opt: one pose per image required".into(),
        ));
    }
    if test_images.is_empty() {
        return Err(Error::InvalidInput("test_time_camera_opt: no test views".into()));
    }
    let mut poses = init_poses.to_vec();
    let mut adam: Vec<AdamState<T>> = (0..poses.len()).map(|_| AdamState::new(6)).collect();
    let n = T::from_usize(k.width * k.height * 3).unwrap();

    for step in 0..iters {
        for (v, pose) in poses.iter_mut().enumerate() {
            let target = render(cloud, pose, k, render_cfg);
            let mut d_color = Image3::zeros(k.width, k.height);
            for i in 0..d_color.data.len() {
                let diff = target.color.data[i] - test_images[v].data[i];
                d_color.data[i] = if diff > T::zero() {
                    T::one() / n
                } else if diff < T::zero() {
                    -T::one() / n
                } else {
                    T::zero()
                };
            }
            let mut builder = AdjointBuilder::new(k.width, k.height);
            builder.add_color(&d_color, T::one());
            let bundle = render_backward(cloud, pose, k, render_cfg, &builder.build())?;
            let lr = decayed(c::<T>(lr_pose), 0.01, step, iters);
            let upd = adam[v].update(&bundle.d_pose, lr)?;
            let delta: [T; 6] = std::array::from_fn(|i| -upd[i]);
            *pose = pose_retract(pose, &delta);
        }
    }
    Ok(poses)
}
