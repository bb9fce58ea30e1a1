//! Scene bundle format, checkpoint serialization and the synthetic scene
//! generator. Every on-disk format is endianness-pinned and documented in
//! docs/formats.md.

pub mod pfm;
pub mod ply;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Quaternion};
use crate::image::{Image1, Image3};
use crate::losses::Correspondence;
use crate::meshing::TriangleMesh;
use crate::pointmap::PointMapPair;
use crate::surfel::SurfelCloud;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// sRGB PNG images, linearized to [0,1] on load

pub fn srgb_to_linear(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn write_png(path: &Path, img: &Image3<f32>) -> Result<()> {
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = img.get(x, y);
            let to8 = |v: f32| (linear_to_srgb(v) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
            out.put_pixel(x as u32, y as u32, image::Rgb([to8(px[0]), to8(px[1]), to8(px[2])]));
        }
    }
    out.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn read_png(path: &Path) -> Result<Image3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_rgb8();
    Ok(Image3::from_fn(
        img.width() as usize,
        img.height() as usize,
        |x, y| {
            let p = img.get_pixel(x as u32, y as u32);
            std::array::from_fn(|k| srgb_to_linear(p[k] as f32 / 255.0))
        },
    ))
}

/// Binary (0/1) mask from an 8-bit PNG: any channel above 127 is inside.
pub fn read_mask_png(path: &Path) -> Result<Image1<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_luma8();
    Ok(Image1::from_fn(
        img.width() as usize,
        img.height() as usize,
        |x, y| [if img.get_pixel(x as u32, y as u32)[0] > 127 { 1.0 } else { 0.0 }],
    ))
}

pub fn write_mask_png(path: &Path, mask: &Image1<f32>) -> Result<()> {
    let mut out = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let v = if mask.get(x, y)[0] > 0.5 { 255u8 } else { 0u8 };
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    out.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

// ---------------------------------------------------------------------------
// cameras.json

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    /// Scalar-first unit quaternion of the world-to-camera rotation.
    pub quaternion: [f32; 4],
    pub translation: [f32; 3],
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: usize,
    pub height: usize,
}

impl CameraRecord {
    pub fn from_parts(pose: &Pose<f32>, k: &Intrinsics<f32>) -> Self {
        Self {
            quaternion: pose.rotation.as_array(),
            translation: [pose.translation.x, pose.translation.y, pose.translation.z],
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }

    pub fn pose(&self) -> Pose<f32> {
        Pose::new(
            Quaternion::from_array(self.quaternion),
            Vector3::new(self.translation[0], self.translation[1], self.translation[2]),
        )
    }

    pub fn intrinsics(&self) -> Result<Intrinsics<f32>> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

pub fn write_cameras(path: &Path, records: &[CameraRecord]) -> Result<()> {
    let json = serde_json::to_string_pretty(records).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

// ---------------------------------------------------------------------------
// Correspondence files: pairs/<n>_<m>.json, or binary "SPRC" for large sets

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorrRecord {
    xa: f32,
    ya: f32,
    xb: f32,
    yb: f32,
    w: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorrFile {
    count: usize,
    records: Vec<CorrRecord>,
}

pub fn write_corrs_json(path: &Path, corrs: &[Correspondence<f32>]) -> Result<()> {
    let file = CorrFile {
        count: corrs.len(),
        records: corrs
            .iter()
            .map(|c| CorrRecord {
                xa: c.p_n.0,
                ya: c.p_n.1,
                xb: c.p_m.0,
                yb: c.p_m.1,
                w: c.weight,
            })
            .collect(),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn write_corrs_binary(path: &Path, corrs: &[Correspondence<f32>]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + corrs.len() * 20);
    buf.extend_from_slice(b"SPRC");
    buf.write_u32::<LittleEndian>(corrs.len() as u32)
        .map_err(|e| Error::io(path, e))?;
    for c in corrs {
        for v in [c.p_n.0, c.p_n.1, c.p_m.0, c.p_m.1, c.weight] {
            buf.write_f32::<LittleEndian>(v).map_err(|e| Error::io(path, e))?;
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_corrs_file(path: &Path, view_n: usize, view_m: usize) -> Result<Vec<Correspondence<f32>>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<CorrRecord> = if data.starts_with(b"SPRC") {
        let mut cur = &data[4..];
        let count = cur
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))? as usize;
        if data.len() < 8 + count * 20 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                offset: data.len() as u64,
                detail: format!("truncated SPRC: expected {count} records"),
            });
        }
        (0..count)
            .map(|_| {
                Ok(CorrRecord {
                    xa: cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?,
                    ya: cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?,
                    xb: cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?,
                    yb: cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?,
                    w: cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?,
                })
            })
            .collect::<Result<_>>()?
    } else {
        let text = String::from_utf8(data)
            .map_err(|_| Error::schema(path, "correspondence file is neither SPRC nor JSON"))?;
        let file: CorrFile = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if file.count != file.records.len() {
            return Err(Error::schema(
                path,
                format!("count {} does not match {} records", file.count, file.records.len()),
            ));
        }
        file.records
    };
    for (i, r) in records.iter().enumerate() {
        for (name, v) in [("xa", r.xa), ("ya", r.ya), ("xb", r.xb), ("yb", r.yb)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::schema(
                    path,
                    format!("record {i}: {name} = {v} outside [0,1]"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&r.w) {
            return Err(Error::schema(path, format!("record {i}: weight outside [0,1]")));
        }
    }
    Ok(records
        .into_iter()
        .map(|r| Correspondence {
            view_n,
            view_m,
            p_n: (r.xa, r.ya),
            p_m: (r.xb, r.yb),
            weight: r.w,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// meta.json

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub schema_version: u32,
    pub width: usize,
    pub height: usize,
    pub num_views: usize,
    /// Source of the ingested pointmaps, e.g. "mast3r-512" or "synthetic".
    pub provenance: String,
}

// ---------------------------------------------------------------------------
// Scene bundle

#[derive(Debug, Clone)]
pub struct EdgeFiles {
    pub view_n: usize,
    pub view_m: usize,
}

#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub meta: Meta,
    pub images: Vec<Image3<f32>>,
    pub pairs: Vec<PointMapPair<f32>>,
    pub corrs: Vec<Correspondence<f32>>,
    pub cameras: Option<Vec<CameraRecord>>,
    pub masks: Option<Vec<Image1<f32>>>,
    pub gt: Option<GroundTruth>,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub cameras: Vec<CameraRecord>,
    pub depths: Vec<Image1<f32>>,
    pub normals: Vec<Image3<f32>>,
    pub mesh: Option<TriangleMesh<f32>>,
    /// Injected pose perturbations (ω then δt per view), for bookkeeping
    /// oracles.
    pub perturbations: Option<Vec<[f64; 6]>>,
}

fn view_name(prefix: &str, v: usize, ext: &str) -> String {
    format!("{prefix}_{v:03}.{ext}")
}

fn edge_name(n: usize, m: usize) -> String {
    format!("{n:03}_{m:03}")
}

pub fn write_bundle(dir: &Path, bundle: &SceneBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&bundle.meta).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;

    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for (v, img) in bundle.images.iter().enumerate() {
        write_png(&images_dir.join(view_name("view", v, "png")), img)?;
    }

    let pm_dir = dir.join("pointmaps");
    let conf_dir = dir.join("conf");
    std::fs::create_dir_all(&pm_dir).map_err(|e| Error::io(&pm_dir, e))?;
    std::fs::create_dir_all(&conf_dir).map_err(|e| Error::io(&conf_dir, e))?;
    for pair in &bundle.pairs {
        let base = edge_name(pair.view_n, pair.view_m);
        pfm::write_pfm3(&pm_dir.join(format!("{base}_a.pfm")), &pair.points_n)?;
        pfm::write_pfm3(&pm_dir.join(format!("{base}_b.pfm")), &pair.points_m)?;
        pfm::write_pfm1(&conf_dir.join(format!("{base}_a.pfm")), &pair.conf_n)?;
        pfm::write_pfm1(&conf_dir.join(format!("{base}_b.pfm")), &pair.conf_m)?;
    }

    if !bundle.corrs.is_empty() {
        let pairs_dir = dir.join("pairs");
        std::fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;
        // Group by (n, m).
        let mut groups: std::collections::BTreeMap<(usize, usize), Vec<Correspondence<f32>>> =
            Default::default();
        for corr in &bundle.corrs {
            groups.entry((corr.view_n, corr.view_m)).or_default().push(*corr);
        }
        for ((n, m), corrs) in groups {
            let path = pairs_dir.join(format!("{}.json", edge_name(n, m)));
            write_corrs_json(&path, &corrs)?;
        }
    }

    if let Some(cams) = &bundle.cameras {
        write_cameras(&dir.join("cameras.json"), cams)?;
    }
    if let Some(masks) = &bundle.masks {
        let masks_dir = dir.join("masks");
        std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
        for (v, m) in masks.iter().enumerate() {
            write_mask_png(&masks_dir.join(view_name("view", v, "png")), m)?;
        }
    }
    if let Some(gt) = &bundle.gt {
        let gt_dir = dir.join("gt");
        std::fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
        write_cameras(&gt_dir.join("cameras.json"), &gt.cameras)?;
        for (v, d) in gt.depths.iter().enumerate() {
            pfm::write_pfm1(&gt_dir.join(view_name("depth", v, "pfm")), d)?;
        }
        for (v, n) in gt.normals.iter().enumerate() {
            pfm::write_pfm3(&gt_dir.join(view_name("normal", v, "pfm")), n)?;
        }
        if let Some(mesh) = &gt.mesh {
            ply::write_mesh_ply(&gt_dir.join("mesh.ply"), mesh)?;
        }
        if let Some(perturbations) = &gt.perturbations {
            let path = gt_dir.join("perturbations.json");
            let json = serde_json::to_string(perturbations).map_err(|e| Error::Json {
                path: path.clone(),
                source: e,
            })?;
            std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<SceneBundle> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::schema(&meta_path, "missing meta.json"));
    }
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::schema(
            &meta_path,
            format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", meta.schema_version),
        ));
    }

    let mut images = Vec::with_capacity(meta.num_views);
    for v in 0..meta.num_views {
        let path = dir.join("images").join(view_name("view", v, "png"));
        let img = read_png(&path)?;
        if img.width != meta.width || img.height != meta.height {
            return Err(Error::schema(
                &path,
                format!(
                    "image size {}×{} does not match meta {}×{}",
                    img.width, img.height, meta.width, meta.height
                ),
            ));
        }
        images.push(img);
    }

    // Pointmap pairs: discover by filename pattern NNN_MMM_a.pfm.
    let pm_dir = dir.join("pointmaps");
    let mut pairs = Vec::new();
    if pm_dir.exists() {
        let mut edges = Vec::new();
        for entry in std::fs::read_dir(&pm_dir).map_err(|e| Error::io(&pm_dir, e))? {
            let entry = entry.map_err(|e| Error::io(&pm_dir, e))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(base) = name.strip_suffix("_a.pfm") {
                let parts: Vec<&str> = base.split('_').collect();
                if parts.len() == 2 {
                    let n: usize = parts[0]
                        .parse()
                        .map_err(|_| Error::schema(entry.path(), "bad edge file name"))?;
                    let m: usize = parts[1]
                        .parse()
                        .map_err(|_| Error::schema(entry.path(), "bad edge file name"))?;
                    edges.push((n, m));
                }
            }
        }
        edges.sort();
        for (n, m) in edges {
            if n >= meta.num_views || m >= meta.num_views {
                return Err(Error::schema(
                    &pm_dir,
                    format!("edge ({n}, {m}) references a view outside 0..{}", meta.num_views),
                ));
            }
            let base = edge_name(n, m);
            let pair = PointMapPair {
                view_n: n,
                view_m: m,
                points_n: pfm::read_pfm3(&pm_dir.join(format!("{base}_a.pfm")))?,
                points_m: pfm::read_pfm3(&pm_dir.join(format!("{base}_b.pfm")))?,
                conf_n: pfm::read_pfm1(&dir.join("conf").join(format!("{base}_a.pfm")))?,
                conf_m: pfm::read_pfm1(&dir.join("conf").join(format!("{base}_b.pfm")))?,
            };
            pair.validate()?;
            pairs.push(pair);
        }
    }

    let cameras = {
        let path = dir.join("cameras.json");
        if path.exists() {
            let cams = read_cameras(&path)?;
            if cams.len() != meta.num_views {
                return Err(Error::schema(
                    &path,
                    format!("{} cameras for {} views", cams.len(), meta.num_views),
                ));
            }
            Some(cams)
        } else {
            None
        }
    };

    let pairs_dir = dir.join("pairs");
    let mut corrs = Vec::new();
    if pairs_dir.exists() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&pairs_dir)
            .map_err(|e| Error::io(&pairs_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        for path in files {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            let parts: Vec<&str> = stem.split('_').collect();
            if parts.len() != 2 {
                continue;
            }
            let n: usize = parts[0]
                .parse()
                .map_err(|_| Error::schema(&path, "bad pair file name"))?;
            let m: usize = parts[1]
                .parse()
                .map_err(|_| Error::schema(&path, "bad pair file name"))?;
            if n >= meta.num_views || m >= meta.num_views {
                return Err(Error::schema(&path, "pair references a view out of range"));
            }
            corrs.extend(read_corrs_file(&path, n, m)?);
        }
    } else if cameras.is_some() {
        log::warn!(
            "bundle {dir:?}: no pairs/ directory; loading in posed mode, correspondence loss disabled"
        );
    }

    let masks_dir = dir.join("masks");
    let masks = if masks_dir.exists() {
        let mut out = Vec::with_capacity(meta.num_views);
        for v in 0..meta.num_views {
            out.push(read_mask_png(&masks_dir.join(view_name("view", v, "png")))?);
        }
        Some(out)
    } else {
        None
    };

    let gt_dir = dir.join("gt");
    let gt = if gt_dir.exists() {
        let cameras = read_cameras(&gt_dir.join("cameras.json"))?;
        let mut depths = Vec::new();
        let mut normals = Vec::new();
        for v in 0..meta.num_views {
            depths.push(pfm::read_pfm1(&gt_dir.join(view_name("depth", v, "pfm")))?);
            let npath = gt_dir.join(view_name("normal", v, "pfm"));
            if npath.exists() {
                normals.push(pfm::read_pfm3(&npath)?);
            }
        }
        let mesh_path = gt_dir.join("mesh.ply");
        let mesh = if mesh_path.exists() {
            Some(ply::read_mesh_ply(&mesh_path)?)
        } else {
            None
        };
        let pert_path = gt_dir.join("perturbations.json");
        let perturbations = if pert_path.exists() {
            let text = std::fs::read_to_string(&pert_path).map_err(|e| Error::io(&pert_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Json {
                path: pert_path.clone(),
                source: e,
            })?)
        } else {
            None
        };
        Some(GroundTruth {
            cameras,
            depths,
            normals,
            mesh,
            perturbations,
        })
    } else {
        None
    };

    Ok(SceneBundle {
        meta,
        images,
        pairs,
        corrs,
        cameras,
        masks,
        gt,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory holding splats.ply + cameras.json + meta.json

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    schema_version: u32,
    surfels: usize,
    views: usize,
}

pub fn write_checkpoint(
    dir: &Path,
    cloud: &SurfelCloud<f32>,
    poses: &[Pose<f32>],
    k: &Intrinsics<f32>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ply::write_splat_ply(&dir.join("splats.ply"), cloud)?;
    let records: Vec<CameraRecord> = poses
        .iter()
        .map(|p| CameraRecord::from_parts(p, k))
        .collect();
    write_cameras(&dir.join("cameras.json"), &records)?;
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        surfels: cloud.len(),
        views: poses.len(),
    };
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_checkpoint(dir: &Path) -> Result<(SurfelCloud<f32>, Vec<Pose<f32>>, Intrinsics<f32>)> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::schema(
            &meta_path,
            format!("checkpoint schema_version {} unsupported", meta.schema_version),
        ));
    }
    let cloud = ply::read_splat_ply(&dir.join("splats.ply"))?;
    if cloud.len() != meta.surfels {
        return Err(Error::schema(
            dir.join("splats.ply"),
            format!("expected {} surfels, found {}", meta.surfels, cloud.len()),
        ));
    }
    let records = read_cameras(&dir.join("cameras.json"))?;
    if records.is_empty() {
        return Err(Error::schema(dir.join("cameras.json"), "no cameras"));
    }
    let k = records[0].intrinsics()?;
    let poses = records.iter().map(|r| r.pose()).collect();
    Ok((cloud, poses, k))
}

/// Writes a JSON value with a trailing newline; used for reports and
/// effective configs so outputs are byte-stable.
pub fn write_json_pretty<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_bundle() -> SceneBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (8, 6);
        let img = |rng: &mut ChaCha8Rng| {
            Image3::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
        };
        let pm = |rng: &mut ChaCha8Rng| {
            Image3::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen::<f32>() + 1.0])
        };
        let conf = Image1::from_fn(w, h, |x, _| [if x % 3 == 0 { 0.0 } else { 1.0 }]);
        SceneBundle {
            meta: Meta {
                schema_version: SCHEMA_VERSION,
                width: w,
                height: h,
                num_views: 2,
                provenance: "synthetic".into(),
            },
            images: vec![img(&mut rng), img(&mut rng)],
            pairs: vec![PointMapPair {
                view_n: 0,
                view_m: 1,
                points_n: pm(&mut rng),
                points_m: pm(&mut rng),
                conf_n: conf.clone(),
                conf_m: conf,
            }],
            corrs: vec![
                Correspondence {
                    view_n: 0,
                    view_m: 1,
                    p_n: (0.25, 0.5),
                    p_m: (0.75, 0.5),
                    weight: 1.0,
                },
                Correspondence {
                    view_n: 0,
                    view_m: 1,
                    p_n: (0.5, 0.25),
                    p_m: (0.5, 0.75),
                    weight: 0.5,
                },
            ],
            cameras: Some(vec![
                CameraRecord {
                    quaternion: [1.0, 0.0, 0.0, 0.0],
                    translation: [0.0, 0.0, 0.0],
                    fx: 10.0,
                    fy: 10.0,
                    cx: 4.0,
                    cy: 3.0,
                    width: w,
                    height: h,
                },
                CameraRecord {
                    quaternion: [1.0, 0.0, 0.0, 0.0],
                    translation: [0.1, 0.0, 0.0],
                    fx: 10.0,
                    fy: 10.0,
                    cx: 4.0,
                    cy: 3.0,
                    width: w,
                    height: h,
                },
            ]),
            masks: None,
            gt: None,
        }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle();
        write_bundle(dir.path(), &bundle).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.meta.num_views, 2);
        assert_eq!(back.pairs.len(), 1);
        // Pointmaps and confidences round-trip bit-exactly through PFM.
        assert_eq!(back.pairs[0].points_n.data, bundle.pairs[0].points_n.data);
        assert_eq!(back.pairs[0].conf_m.data, bundle.pairs[0].conf_m.data);
        assert_eq!(back.corrs.len(), 2);
        assert_eq!(back.corrs[0].p_n, bundle.corrs[0].p_n);
        assert!(back.cameras.is_some());
    }

    #[test]
    fn missing_pairs_loads_posed_mode() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = tiny_bundle();
        bundle.corrs.clear();
        write_bundle(dir.path(), &bundle).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert!(back.corrs.is_empty());
        assert!(back.cameras.is_some());
    }

    #[test]
    fn truncated_pointmap_names_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &tiny_bundle()).unwrap();
        let victim = dir.path().join("pointmaps").join("000_001_a.pfm");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
        match read_bundle(dir.path()) {
            Err(Error::Corrupt { path, offset, .. }) => {
                assert_eq!(path, victim);
                assert_eq!(offset, (bytes.len() - 3) as u64);
            }
            other => panic!("expected Corrupt, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cloud = SurfelCloud::default();
        for _ in 0..50 {
            let mut sh = vec![0f32; crate::sh::SH_TOTAL];
            for v in sh.iter_mut() {
                *v = rng.gen::<f32>() - 0.5;
            }
            cloud.surfels.push(crate::surfel::Surfel {
                center: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                rotation: Quaternion::new(
                    rng.gen::<f32>() + 0.2,
                    rng.gen(),
                    rng.gen(),
                    rng.gen(),
                ),
                log_scale: [rng.gen(), rng.gen()],
                opacity_raw: rng.gen(),
                sh,
            });
            cloud.source_view.push(0);
        }
        let poses = vec![
            Pose::identity(),
            Pose::new(
                Quaternion::from_axis_angle(&Vector3::new(0.1f32, 0.2, -0.1)),
                Vector3::new(0.4, -0.2, 0.6),
            ),
        ];
        let k = Intrinsics::centered(20.0f32, 16, 12);
        let ckpt = dir.path().join("ckpt");
        write_checkpoint(&ckpt, &cloud, &poses, &k).unwrap();
        let (cloud2, poses2, k2) = read_checkpoint(&ckpt).unwrap();
        assert_eq!(cloud.surfels, cloud2.surfels);
        for (a, b) in poses.iter().zip(&poses2) {
            assert_eq!(a.translation, b.translation);
            assert_eq!(a.rotation.as_array(), b.rotation.as_array());
        }
        assert_eq!(k.fx, k2.fx);
        assert_eq!(k.width, k2.width);
    }

    #[test]
    fn sprc_binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corrs: Vec<Correspondence<f32>> = (0..10)
            .map(|i| Correspondence {
                view_n: 0,
                view_m: 1,
                p_n: (i as f32 / 10.0, 0.5),
                p_m: (0.5, i as f32 / 10.0),
                weight: 1.0 - i as f32 / 20.0,
            })
            .collect();
        let path = dir.path().join("000_001.sprc");
        write_corrs_binary(&path, &corrs).unwrap();
        let back = read_corrs_file(&path, 0, 1).unwrap();
        assert_eq!(back.len(), corrs.len());
        for (a, b) in corrs.iter().zip(&back) {
            assert_eq!(a.p_n, b.p_n);
            assert_eq!(a.p_m, b.p_m);
            assert_eq!(a.weight, b.weight);
        }
    }

    #[test]
    fn srgb_round_trip_within_quantization() {
        for v in [0.0f32, 0.001, 0.1, 0.5, 0.9, 1.0] {
            let back = srgb_to_linear(linear_to_srgb(v));
            assert!((back - v).abs() < 1e-6);
        }
    }
}
