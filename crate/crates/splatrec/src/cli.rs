//! Command-line surface: synth, init, reconstruct, render, mesh, eval and
//! ttopt subcommands. Exit codes: 0 success, 2 validation, 3 numerical
//! divergence, 4 I/O. All artifacts land under --out.

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::image::{Image1, Image3};
use crate::io::{self, synthetic::SyntheticSpec, CameraRecord};
use crate::losses::LossReport;
use crate::meshing::{clean_with_masks, extract_mesh, integrate, rasterize_mesh, TsdfVolume};
use crate::metrics::{ate, normal_consistency, psnr_ssim, rel_error, DepthEval, TrajectoryEval};
use crate::optim::{reconstruct, test_time_camera_opt, TrainConfig};
use crate::pipeline;
use crate::render::{render, RenderConfig};
use crate::surfel::InitConfig;
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::Serialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "splatrec",
    about = "Differentiable surfel splatting and sparse-view reconstruction",
    version
)]
pub struct Cli {
    /// Cap the internal thread pool (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Override the RNG seed used by the subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene bundle with a ground-truth sidecar.
    Synth(SynthArgs),
    /// Align pointmaps, recover cameras and instantiate surfels.
    Init(InitArgs),
    /// Jointly optimize surfels and camera poses.
    Reconstruct(ReconstructArgs),
    /// Render buffers from a checkpoint.
    Render(RenderArgs),
    /// Fuse rendered depth into a TSDF and extract a triangle mesh.
    Mesh(MeshArgs),
    /// Metric report against a ground-truth bundle.
    Eval(EvalArgs),
    /// Test-time camera optimization with frozen splats.
    Ttopt(TtoptArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene spec JSON; missing fields take defaults (units: world units
    /// for radii, degrees for angles, pixels for focal).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Trust bundle cameras and skip the global alignment solve.
    #[arg(long, default_value_t = false)]
    pub skip_align: bool,
    /// Confidence threshold for surfel instantiation (default: per-scene
    /// median confidence).
    #[arg(long)]
    pub min_conf: Option<f32>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Training config JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from an existing checkpoint directory instead of running
    /// initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Optimization steps; overrides the config file.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Force the posed (skip-align) initialization path.
    #[arg(long, default_value_t = false)]
    pub skip_align: bool,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// View index into the checkpoint cameras.
    #[arg(long)]
    pub view: Option<usize>,
    /// cameras.json-style file with poses to render instead of --view.
    #[arg(long)]
    pub pose_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated buffers: color,depth,normal,var,acc.
    #[arg(long, default_value = "color")]
    pub buffers: String,
}

#[derive(Args, Debug)]
pub struct MeshArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Voxel size in world units (default: scene extent / 256).
    #[arg(long)]
    pub voxel: Option<f32>,
    /// Truncation distance (default: 4 × voxel).
    #[arg(long)]
    pub trunc: Option<f32>,
    /// Directory of per-view binary mask PNGs for cleaning.
    #[arg(long)]
    pub masks: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Reconstruction output directory (contains checkpoint/ and
    /// optionally mesh.ply).
    #[arg(long)]
    pub pred: PathBuf,
    /// Bundle directory with a gt/ sidecar.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Median-scale alignment for the depth metric: on|off.
    #[arg(long, default_value = "on")]
    pub align_scale: String,
}

#[derive(Args, Debug)]
pub struct TtoptArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory with view_XXX.png test images and cameras.json initial
    /// poses.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Entry point used by the binary; maps error classes to exit codes.
pub fn run(cli: Cli) -> i32 {
    if cli.threads > 0 {
        // Ignore failures from double initialization in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let result = match cli.command {
        Command::Synth(args) => run_synth(args, cli.seed),
        Command::Init(args) => run_init(args),
        Command::Reconstruct(args) => run_reconstruct(args, cli.seed),
        Command::Render(args) => run_render(args),
        Command::Mesh(args) => run_mesh(args),
        Command::Eval(args) => run_eval(args),
        Command::Ttopt(args) => run_ttopt(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidInput(_) | Error::Schema { .. } | Error::Degenerate(_)
                | Error::Disconnected(_) => 2,
                Error::Diverged(_) => 3,
                Error::Io { .. } | Error::Corrupt { .. } | Error::Json { .. } => 4,
            }
        }
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn echo_config<S: Serialize>(out: &Path, cfg: &S) -> Result<()> {
    io::write_json_pretty(&out.join("config.json"), cfg)
}

pub fn run_synth(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.clone(),
                source: e,
            })?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    ensure_out(&args.out)?;
    let scene = io::synthetic::generate_synthetic(&spec)?;
    io::write_bundle(&args.out, &scene.bundle)?;
    echo_config(&args.out, &spec)?;
    println!(
        "synth: wrote {} views, {} pairs, {} correspondences to {}",
        scene.bundle.meta.num_views,
        scene.bundle.pairs.len(),
        scene.bundle.corrs.len(),
        args.out.display()
    );
    Ok(())
}

fn write_aligned(out: &Path, init: &pipeline::InitOutput) -> Result<()> {
    let aligned_dir = out.join("aligned");
    ensure_out(&aligned_dir)?;
    for (v, (chi, conf)) in init.aligned.chi.iter().zip(&init.aligned.conf).enumerate() {
        io::pfm::write_pfm3(&aligned_dir.join(format!("chi_{v:03}.pfm")), chi)?;
        io::pfm::write_pfm1(&aligned_dir.join(format!("conf_{v:03}.pfm")), conf)?;
    }
    let records: Vec<CameraRecord> = init
        .aligned
        .poses
        .iter()
        .map(|p| CameraRecord::from_parts(p, &init.intrinsics))
        .collect();
    io::write_cameras(&aligned_dir.join("cameras.json"), &records)
}

pub fn run_init(args: InitArgs) -> Result<()> {
    ensure_out(&args.out)?;
    let bundle = io::read_bundle(&args.bundle)?;
    let init_cfg = InitConfig {
        min_conf: args.min_conf,
        ..Default::default()
    };
    let init = if args.skip_align {
        pipeline::init_scene_posed(&bundle, &init_cfg)?
    } else {
        pipeline::init_scene(&bundle, &init_cfg)?
    };
    write_aligned(&args.out, &init)?;
    io::write_checkpoint(
        &args.out.join("checkpoint_init"),
        &init.cloud,
        &init.aligned.poses,
        &init.intrinsics,
    )?;
    #[derive(Serialize)]
    struct Effective {
        skip_align: bool,
        min_conf: Option<f32>,
        focal: f32,
        surfels: usize,
    }
    echo_config(
        &args.out,
        &Effective {
            skip_align: args.skip_align,
            min_conf: args.min_conf,
            focal: init.intrinsics.fx,
            surfels: init.cloud.len(),
        },
    )?;
    println!(
        "init: {} surfels, focal {:.2}px, checkpoint at {}",
        init.cloud.len(),
        init.intrinsics.fx,
        args.out.join("checkpoint_init").display()
    );
    Ok(())
}

pub fn run_reconstruct(args: ReconstructArgs, seed: Option<u64>) -> Result<()> {
    ensure_out(&args.out)?;
    let bundle = io::read_bundle(&args.bundle)?;
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.clone(),
                source: e,
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(iters) = args.iters {
        cfg.iters = iters;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }

    let (cloud, poses, intrinsics) = match &args.init {
        Some(ckpt) => io::read_checkpoint(ckpt)?,
        None => {
            let init_cfg = InitConfig::default();
            let init = if args.skip_align || bundle.pairs.is_empty() {
                pipeline::init_scene_posed(&bundle, &init_cfg)?
            } else if bundle.cameras.is_some() {
                // Bundled cameras take precedence as the initial state the
                // optimizer refines; alignment is for the unposed case.
                pipeline::init_scene_posed(&bundle, &init_cfg)?
            } else {
                pipeline::init_scene(&bundle, &init_cfg)?
            };
            (init.cloud, init.aligned.poses.clone(), init.intrinsics)
        }
    };

    let scene = pipeline::train_scene(&bundle, cloud, poses, intrinsics);
    let render_cfg = RenderConfig::<f32>::default();
    let ckpt_dir = args.out.clone();
    let mut on_ckpt = |step: usize, cloud: &crate::surfel::SurfelCloud<f32>, poses: &[Pose<f32>]| {
        let dir = ckpt_dir.join(format!("checkpoint_{step:06}"));
        if let Err(e) = io::write_checkpoint(&dir, cloud, poses, &intrinsics) {
            log::warn!("checkpoint at step {step} failed: {e}");
        }
    };
    let out = reconstruct(
        &scene,
        &cfg,
        &render_cfg,
        if cfg.checkpoint_every > 0 {
            Some(&mut on_ckpt)
        } else {
            None
        },
    )?;

    io::write_checkpoint(&args.out.join("checkpoint"), &out.cloud, &out.poses, &intrinsics)?;
    let log_path = args.out.join("train_log.csv");
    let mut f = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(f, "{}", LossReport::csv_header()).map_err(|e| Error::io(&log_path, e))?;
    for row in &out.log {
        writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(&log_path, e))?;
    }
    echo_config(&args.out, &cfg)?;
    let final_total = out.log.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "reconstruct: {} steps, final total {:.6e}, checkpoint at {}",
        out.log.len(),
        final_total,
        args.out.join("checkpoint").display()
    );
    Ok(())
}

fn parse_buffers(spec: &str) -> Result<Vec<String>> {
    let known = ["color", "depth", "normal", "var", "acc"];
    let mut out = Vec::new();
    for tok in spec.split(',') {
        let tok = tok.trim().to_string();
        if tok.is_empty() {
            continue;
        }
        if !known.contains(&tok.as_str()) {
            return Err(Error::InvalidInput(format!(
                "unknown buffer {tok:?}; expected one of {known:?}"
            )));
        }
        out.push(tok);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("no buffers requested".into()));
    }
    Ok(out)
}

pub fn run_render(args: RenderArgs) -> Result<()> {
    ensure_out(&args.out)?;
    let buffers = parse_buffers(&args.buffers)?;
    let (cloud, poses, k) = io::read_checkpoint(&args.checkpoint)?;
    let to_render: Vec<(usize, Pose<f32>)> = match (&args.view, &args.pose_file) {
        (Some(v), None) => {
            if *v >= poses.len() {
                return Err(Error::InvalidInput(format!(
                    "view {v} out of range (checkpoint has {})",
                    poses.len()
                )));
            }
            vec![(*v, poses[*v])]
        }
        (None, Some(path)) => io::read_cameras(path)?
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.pose()))
            .collect(),
        (None, None) => poses.iter().copied().enumerate().collect(),
        (Some(_), Some(_)) => {
            return Err(Error::InvalidInput(
                "--view and --pose-file are mutually exclusive".into(),
            ))
        }
    };
    let cfg = RenderConfig::<f32>::default();
    for (v, pose) in to_render {
        let t = render(&cloud, &pose, &k, &cfg);
        for buf in &buffers {
            match buf.as_str() {
                "color" => io::write_png(&args.out.join(format!("color_{v:03}.png")), &t.color)?,
                "depth" => io::pfm::write_pfm1(&args.out.join(format!("depth_{v:03}.pfm")), &t.depth)?,
                "normal" => {
                    io::pfm::write_pfm3(&args.out.join(format!("normal_{v:03}.pfm")), &t.normal)?
                }
                "acc" => io::pfm::write_pfm1(&args.out.join(format!("acc_{v:03}.pfm")), &t.acc)?,
                "var" => {
                    let var = Image3::from_fn(t.width(), t.height(), |x, y| t.variance(x, y));
                    io::pfm::write_pfm3(&args.out.join(format!("var_{v:03}.pfm")), &var)?
                }
                _ => unreachable!(),
            }
        }
    }
    println!("render: wrote {:?} to {}", buffers, args.out.display());
    Ok(())
}

pub fn run_mesh(args: MeshArgs) -> Result<()> {
    let (cloud, poses, k) = io::read_checkpoint(&args.checkpoint)?;
    if cloud.is_empty() {
        return Err(Error::InvalidInput("mesh: empty checkpoint".into()));
    }
    // Volume bounds from the surfel cloud with a margin.
    let mut lo = Vector3::repeat(f32::MAX);
    let mut hi = Vector3::repeat(f32::MIN);
    for s in &cloud.surfels {
        for a in 0..3 {
            lo[a] = lo[a].min(s.center[a]);
            hi[a] = hi[a].max(s.center[a]);
        }
    }
    let extent = (hi - lo).norm().max(1e-3) * 1.2;
    let center = (lo + hi) / 2.0;
    let voxel = args.voxel.unwrap_or(extent / 256.0);
    let trunc = args.trunc.unwrap_or(voxel * 4.0);
    let dims = ((extent / voxel).ceil() as usize).clamp(8, 512);
    let half = extent / 2.0;
    let mut volume = TsdfVolume::new(
        center - Vector3::new(half, half, half),
        voxel,
        [dims; 3],
        trunc.max(voxel),
    )?;

    let cfg = RenderConfig::<f32>::default();
    for pose in &poses {
        let t = render(&cloud, pose, &k, &cfg);
        integrate(&mut volume, &t.depth, &t.acc, pose, &k);
    }
    let mut mesh = extract_mesh(&volume);
    if let Some(mask_dir) = &args.masks {
        let mut masks = Vec::new();
        for v in 0..poses.len() {
            masks.push(io::read_mask_png(&mask_dir.join(format!("view_{v:03}.png")))?);
        }
        mesh = clean_with_masks(&mesh, &masks, &poses, &k)?;
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_out(parent)?;
        }
    }
    io::ply::write_mesh_ply(&args.out, &mesh)?;
    println!(
        "mesh: {} vertices, {} triangles, voxel {:.5} → {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        voxel,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub rel: f64,
    pub nc: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub rel: f64,
    pub nc: f64,
    pub ate: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub align_scale: bool,
    /// Which validity gate produced the depth metrics.
    pub valid_mask: String,
    /// Source of the depth/normal buffers: "mesh" or "render".
    pub geometry_source: String,
    pub per_view: Vec<ViewMetrics>,
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let align = match args.align_scale.as_str() {
        "on" => true,
        "off" => false,
        other => {
            return Err(Error::InvalidInput(format!(
                "--align-scale must be on|off, got {other:?}"
            )))
        }
    };
    let ckpt_dir = if args.pred.join("checkpoint").exists() {
        args.pred.join("checkpoint")
    } else {
        args.pred.clone()
    };
    let (cloud, poses, k) = io::read_checkpoint(&ckpt_dir)?;
    let bundle = io::read_bundle(&args.gt)?;
    let gt = bundle
        .gt
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("eval: bundle has no gt/ sidecar".into()))?;
    if gt.depths.len() != poses.len() {
        return Err(Error::InvalidInput(format!(
            "eval: {} gt views vs {} checkpoint poses",
            gt.depths.len(),
            poses.len()
        )));
    }

    let mesh_path = args.pred.join("mesh.ply");
    let mesh = if mesh_path.exists() {
        Some(io::ply::read_mesh_ply(&mesh_path)?)
    } else {
        None
    };
    let geometry_source = if mesh.is_some() { "mesh" } else { "render" };

    let cfg = RenderConfig::<f32>::default();
    let mut per_view = Vec::new();
    let mut rel_sum = 0.0;
    let mut nc_sum = 0.0;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (v, pose) in poses.iter().enumerate() {
        let t = render(&cloud, pose, &k, &cfg);
        let (pred_depth, pred_normal) = match &mesh {
            Some(mesh) => rasterize_mesh(mesh, pose, &k),
            None => {
                let depth = Image1::from_fn(k.width, k.height, |x, y| {
                    if t.acc.get(x, y)[0] >= 0.5 {
                        [t.depth.get(x, y)[0]]
                    } else {
                        [0.0]
                    }
                });
                (depth, t.normal.clone())
            }
        };
        let mask = bundle.masks.as_ref().map(|m| &m[v]);
        let eval = DepthEval {
            pred: &pred_depth,
            gt: &gt.depths[v],
            mask,
        };
        let rel = rel_error(&eval, align)?.to_f64();
        let nc = normal_consistency(&pred_normal, &gt.depths[v], &k)?.to_f64();
        let (psnr, ssim) = psnr_ssim(&t.color, &bundle.images[v])?;
        per_view.push(ViewMetrics {
            view: v,
            rel,
            nc,
            psnr: psnr as f64,
            ssim: ssim as f64,
        });
        rel_sum += rel;
        nc_sum += nc;
        psnr_sum += psnr as f64;
        ssim_sum += ssim as f64;
    }
    let n = poses.len() as f64;
    let traj = TrajectoryEval::from_poses(
        &poses,
        &gt.cameras.iter().map(|r| r.pose()).collect::<Vec<_>>(),
    );
    let ate_val = ate(&traj)? as f64;

    let report = EvalReport {
        rel: rel_sum / n,
        nc: nc_sum / n,
        ate: ate_val,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        align_scale: align,
        valid_mask: if bundle.masks.is_some() {
            "gt_depth+mask".into()
        } else {
            "gt_depth".into()
        },
        geometry_source: geometry_source.into(),
        per_view,
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_out(parent)?;
        }
    }
    io::write_json_pretty(&args.out, &report)?;
    // Aggregate CSV next to the JSON report.
    let csv_path = args.out.with_extension("csv");
    let mut f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(f, "view,rel,nc,psnr,ssim").map_err(|e| Error::io(&csv_path, e))?;
    for row in &report.per_view {
        writeln!(f, "{},{},{},{},{}", row.view, row.rel, row.nc, row.psnr, row.ssim)
            .map_err(|e| Error::io(&csv_path, e))?;
    }
    writeln!(
        f,
        "mean,{},{},{},{}",
        report.rel, report.nc, report.psnr, report.ssim
    )
    .map_err(|e| Error::io(&csv_path, e))?;
    println!(
        "eval: rel {:.4} nc {:.4} ate {:.6} psnr {:.2} ssim {:.4} → {}",
        report.rel,
        report.nc,
        report.ate,
        report.psnr,
        report.ssim,
        args.out.display()
    );
    Ok(())
}

trait ToF64 {
    fn to_f64(self) -> f64;
}
impl ToF64 for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

pub fn run_ttopt(args: TtoptArgs) -> Result<()> {
    ensure_out(&args.out)?;
    let (cloud, _, k) = io::read_checkpoint(&args.checkpoint)?;
    let records = io::read_cameras(&args.images.join("cameras.json"))?;
    let mut images = Vec::new();
    for v in 0..records.len() {
        images.push(io::read_png(&args.images.join(format!("view_{v:03}.png")))?);
    }
    let init_poses: Vec<Pose<f32>> = records.iter().map(|r| r.pose()).collect();
    let refined = test_time_camera_opt(
        &cloud,
        &images,
        &init_poses,
        &k,
        args.iters,
        1e-3,
        &RenderConfig::default(),
    )?;
    let out_records: Vec<CameraRecord> = refined
        .iter()
        .map(|p| CameraRecord::from_parts(p, &k))
        .collect();
    io::write_cameras(&args.out.join("cameras.json"), &out_records)?;
    #[derive(Serialize)]
    struct Effective {
        iters: usize,
        views: usize,
    }
    echo_config(
        &args.out,
        &Effective {
            iters: args.iters,
            views: refined.len(),
        },
    )?;
    println!(
        "ttopt: refined {} cameras over {} iterations → {}",
        refined.len(),
        args.iters,
        args.out.display()
    );
    Ok(())
}

/// Intrinsics helper shared by subcommands that synthesize cameras.
pub fn centered_intrinsics(focal: f32, width: usize, height: usize) -> Intrinsics<f32> {
    Intrinsics::centered(focal, width, height)
}
