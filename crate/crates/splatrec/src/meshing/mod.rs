//! TSDF fusion of rendered depth maps, marching-cubes extraction,
//! training-view mask cleaning and mesh rasterization for screen-space
//! evaluation.

mod mc_tables;
#[cfg(test)]
mod tests;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::image::{Image1, Image3};
use crate::real::{c, Real};
use nalgebra::Vector3;
use rayon::prelude::*;
use std::collections::HashMap;

/// Voxel grid of truncated signed distances with per-voxel fusion weights.
/// Sign convention: positive on the camera side (outside), negative inside.
#[derive(Debug, Clone)]
pub struct TsdfVolume<T> {
    pub origin: Vector3<T>,
    pub voxel_size: T,
    pub dims: [usize; 3],
    pub tsdf: Vec<T>,
    pub weight: Vec<T>,
    pub truncation: T,
}

impl<T: Real> TsdfVolume<T> {
    pub fn new(origin: Vector3<T>, voxel_size: T, dims: [usize; 3], truncation: T) -> Result<Self> {
        if voxel_size <= T::zero() {
            return Err(Error::InvalidInput("tsdf: voxel_size must be > 0".into()));
        }
        if truncation < voxel_size {
            return Err(Error::InvalidInput(
                "tsdf: truncation must be ≥ voxel_size".into(),
            ));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidInput("tsdf: dims must be ≥ 2".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            origin,
            voxel_size,
            dims,
            tsdf: vec![T::one(); n],
            weight: vec![T::zero(); n],
            truncation,
        })
    }

    /// Cube of `resolution`³ voxels centered on `center` with the given
    /// world extent; truncation pinned to 4 voxels.
    pub fn centered_cube(center: Vector3<T>, extent: T, resolution: usize) -> Result<Self> {
        let voxel = extent / T::from_usize(resolution).unwrap();
        let half = extent / c(2.0);
        Self::new(
            center - Vector3::new(half, half, half),
            voxel,
            [resolution; 3],
            voxel * c(4.0),
        )
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<T> {
        let half = c::<T>(0.5);
        self.origin
            + Vector3::new(
                (T::from_usize(x).unwrap() + half) * self.voxel_size,
                (T::from_usize(y).unwrap() + half) * self.voxel_size,
                (T::from_usize(z).unwrap() + half) * self.voxel_size,
            )
    }
}

/// Weighted TSDF update from one rendered depth map; pixels with
/// accumulation below 0.5 are treated as unobserved.
pub fn integrate<T: Real>(
    volume: &mut TsdfVolume<T>,
    depth: &Image1<T>,
    acc: &Image1<T>,
    pose: &Pose<T>,
    k: &Intrinsics<T>,
) {
    let rot = pose.rotation_matrix();
    let trans = pose.translation;
    let (dx, dy, dz) = (volume.dims[0], volume.dims[1], volume.dims[2]);
    let voxel = volume.voxel_size;
    let origin = volume.origin;
    let trunc = volume.truncation;
    let half = c::<T>(0.5);

    let slabs: Vec<(usize, Vec<(usize, T)>)> = (0..dz)
        .into_par_iter()
        .map(|z| {
            let mut updates = Vec::new();
            for y in 0..dy {
                for x in 0..dx {
                    let center = origin
                        + Vector3::new(
                            (T::from_usize(x).unwrap() + half) * voxel,
                            (T::from_usize(y).unwrap() + half) * voxel,
                            (T::from_usize(z).unwrap() + half) * voxel,
                        );
                    let cam = rot * center + trans;
                    if cam.z <= T::EPS_BEHIND {
                        continue;
                    }
                    let px = k.fx * cam.x / cam.z + k.cx;
                    let py = k.fy * cam.y / cam.z + k.cy;
                    let xi = px.to_f64c().floor() as i64;
                    let yi = py.to_f64c().floor() as i64;
                    if xi < 0 || yi < 0 || xi >= k.width as i64 || yi >= k.height as i64 {
                        continue;
                    }
                    let (xi, yi) = (xi as usize, yi as usize);
                    if acc.get(xi, yi)[0] < c(0.5) {
                        continue;
                    }
                    let d = depth.get(xi, yi)[0];
                    if d <= T::zero() {
                        continue;
                    }
                    let sdf = d - cam.z;
                    if sdf < -trunc {
                        continue;
                    }
                    let t = (sdf / trunc).clamp(-T::one(), T::one());
                    updates.push(((y * dx + x), t));
                }
            }
            (z, updates)
        })
        .collect();

    for (z, updates) in slabs {
        for (xy, t) in updates {
            let i = z * dy * dx + xy;
            let w = volume.weight[i];
            volume.tsdf[i] = (volume.tsdf[i] * w + t) / (w + T::one());
            volume.weight[i] = w + T::one();
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh<T> {
    pub vertices: Vec<Vector3<T>>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vector3<T>>>,
}

impl<T: Real> TriangleMesh<T> {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Area-weighted vertex normals from face normals.
    pub fn compute_vertex_normals(&mut self) {
        let mut normals = vec![Vector3::<T>::zeros(); self.vertices.len()];
        for tri in &self.triangles {
            let [a, b, cc] = tri.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(cc - a));
            for &i in tri {
                normals[i as usize] += n;
            }
        }
        for n in normals.iter_mut() {
            let len = n.norm();
            if len > c(1e-20) {
                *n /= len;
            }
        }
        self.normals = Some(normals);
    }
}

/// Canonical global edge key: axis plus the lattice coordinates of the
/// edge's lower corner. Keeps shared vertices shared across cells.
fn edge_key(x: usize, y: usize, z: usize, edge: usize) -> (u8, usize, usize, usize) {
    match edge {
        0 => (0, x, y, z),
        1 => (1, x + 1, y, z),
        2 => (0, x, y + 1, z),
        3 => (1, x, y, z),
        4 => (0, x, y, z + 1),
        5 => (1, x + 1, y, z + 1),
        6 => (0, x, y + 1, z + 1),
        7 => (1, x, y, z + 1),
        8 => (2, x, y, z),
        9 => (2, x + 1, y, z),
        10 => (2, x + 1, y + 1, z),
        11 => (2, x, y + 1, z),
        _ => unreachable!(),
    }
}

const CORNER_OFFSETS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
];

const EDGE_CORNERS: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Marching cubes over the zero crossing of the fused TSDF. Cells touching
/// unobserved voxels (weight 0) are skipped; vertex positions are linearly
/// interpolated along the crossing edges. An empty result is returned with
/// a warning when no sign change is present.
pub fn extract_mesh<T: Real>(volume: &TsdfVolume<T>) -> TriangleMesh<T> {
    let [dx, dy, dz] = volume.dims;
    let mut mesh = TriangleMesh::default();
    let mut edge_vertices: HashMap<(u8, usize, usize, usize), u32> = HashMap::new();

    for z in 0..dz - 1 {
        for y in 0..dy - 1 {
            for x in 0..dx - 1 {
                let mut values = [T::zero(); 8];
                let mut observed = true;
                for (ci, &(ox, oy, oz)) in CORNER_OFFSETS.iter().enumerate() {
                    let i = volume.idx(x + ox, y + oy, z + oz);
                    if volume.weight[i] <= T::zero() {
                        observed = false;
                        break;
                    }
                    values[ci] = volume.tsdf[i];
                }
                if !observed {
                    continue;
                }
                let mut cube_index = 0usize;
                for (ci, v) in values.iter().enumerate() {
                    if *v < T::zero() {
                        cube_index |= 1 << ci;
                    }
                }
                if cube_index == 0 || cube_index == 255 {
                    continue;
                }
                let edges = mc_tables::EDGE_TABLE[cube_index];
                let mut local = [u32::MAX; 12];
                for e in 0..12 {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let key = edge_key(x, y, z, e);
                    let idx = *edge_vertices.entry(key).or_insert_with(|| {
                        let (c0, c1) = EDGE_CORNERS[e];
                        let v0 = values[c0];
                        let v1 = values[c1];
                        let t = if (v1 - v0).abs() < c(1e-20) {
                            c(0.5)
                        } else {
                            (T::zero() - v0) / (v1 - v0)
                        };
                        let (o0x, o0y, o0z) = CORNER_OFFSETS[c0];
                        let (o1x, o1y, o1z) = CORNER_OFFSETS[c1];
                        let p0 = volume.voxel_center(x + o0x, y + o0y, z + o0z);
                        let p1 = volume.voxel_center(x + o1x, y + o1y, z + o1z);
                        mesh.vertices.push(p0 + (p1 - p0) * t);
                        (mesh.vertices.len() - 1) as u32
                    });
                    local[e] = idx;
                }
                let tris = &mc_tables::TRI_TABLE[cube_index];
                let mut i = 0;
                while i < 16 && tris[i] >= 0 {
                    let a = local[tris[i] as usize];
                    let b = local[tris[i + 1] as usize];
                    let cc = local[tris[i + 2] as usize];
                    if a != b && b != cc && a != cc {
                        let (pa, pb, pc) = (
                            mesh.vertices[a as usize],
                            mesh.vertices[b as usize],
                            mesh.vertices[cc as usize],
                        );
                        let area2 = (pb - pa).cross(&(pc - pa)).norm();
                        if area2 > c(1e-12) {
                            mesh.triangles.push([a, b, cc]);
                        }
                    }
                    i += 3;
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        log::warn!("extract_mesh: no zero crossing found, returning an empty mesh");
    }
    mesh.compute_vertex_normals();
    mesh
}

/// Removes vertices whose projection falls outside the mask in every view
/// where they are visible, then drops dangling triangles. Vertices visible
/// in no view are kept.
pub fn clean_with_masks<T: Real>(
    mesh: &TriangleMesh<T>,
    masks: &[Image1<T>],
    poses: &[Pose<T>],
    k: &Intrinsics<T>,
) -> Result<TriangleMesh<T>> {
    if masks.len() != poses.len() {
        return Err(Error::InvalidInput(
            "clean_with_masks: one mask per pose required".into(),
        ));
    }
    let mut keep = vec![true; mesh.vertices.len()];
    for (vi, vertex) in mesh.vertices.iter().enumerate() {
        let mut visible_any = false;
        let mut inside_any = false;
        for (mask, pose) in masks.iter().zip(poses) {
            let cam = pose.transform(vertex);
            if cam.z <= T::EPS_BEHIND {
                continue;
            }
            let px = (k.fx * cam.x / cam.z + k.cx).to_f64c().floor() as i64;
            let py = (k.fy * cam.y / cam.z + k.cy).to_f64c().floor() as i64;
            if px < 0 || py < 0 || px >= k.width as i64 || py >= k.height as i64 {
                continue;
            }
            visible_any = true;
            if mask.get(px as usize, py as usize)[0] > c(0.5) {
                inside_any = true;
                break;
            }
        }
        if visible_any && !inside_any {
            keep[vi] = false;
        }
    }

    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut out = TriangleMesh::default();
    for (vi, &k) in keep.iter().enumerate() {
        if k {
            remap[vi] = out.vertices.len() as u32;
            out.vertices.push(mesh.vertices[vi]);
        }
    }
    for tri in &mesh.triangles {
        if tri.iter().all(|&i| keep[i as usize]) {
            out.triangles.push(tri.map(|i| remap[i as usize]));
        }
    }
    out.compute_vertex_normals();
    Ok(out)
}

/// Z-buffer rasterization of the mesh into camera-space depth and normal
/// buffers (face normals flipped toward the camera). Uncovered pixels hold
/// zero depth.
pub fn rasterize_mesh<T: Real>(
    mesh: &TriangleMesh<T>,
    pose: &Pose<T>,
    k: &Intrinsics<T>,
) -> (Image1<T>, Image3<T>) {
    let mut depth = Image1::zeros(k.width, k.height);
    let mut normal = Image3::zeros(k.width, k.height);
    let rot = pose.rotation_matrix();
    let trans = pose.translation;

    for tri in &mesh.triangles {
        let pts = tri.map(|i| rot * mesh.vertices[i as usize] + trans);
        if pts.iter().any(|p| p.z <= T::EPS_BEHIND) {
            continue;
        }
        let face = (pts[1] - pts[0]).cross(&(pts[2] - pts[0]));
        let norm_len = face.norm();
        if norm_len < c(1e-20) {
            continue;
        }
        let mut fnormal = face / norm_len;
        if fnormal.dot(&pts[0]) > T::zero() {
            fnormal = -fnormal;
        }

        let mut lo_x = T::max_value().unwrap();
        let mut lo_y = T::max_value().unwrap();
        let mut hi_x = T::min_value().unwrap();
        let mut hi_y = T::min_value().unwrap();
        for p in &pts {
            let px = k.fx * p.x / p.z + k.cx;
            let py = k.fy * p.y / p.z + k.cy;
            lo_x = lo_x.min(px);
            lo_y = lo_y.min(py);
            hi_x = hi_x.max(px);
            hi_y = hi_y.max(py);
        }
        let x0 = (lo_x.to_f64c().floor() as i64).clamp(0, k.width as i64 - 1);
        let y0 = (lo_y.to_f64c().floor() as i64).clamp(0, k.height as i64 - 1);
        let x1 = (hi_x.to_f64c().ceil() as i64).clamp(0, k.width as i64 - 1);
        let y1 = (hi_y.to_f64c().ceil() as i64).clamp(0, k.height as i64 - 1);

        for y in y0..=y1 {
            for x in x0..=x1 {
                let px = T::from_i64(x).unwrap() + c(0.5);
                let py = T::from_i64(y).unwrap() + c(0.5);
                let dirh = Vector3::new((px - k.cx) / k.fx, (py - k.cy) / k.fy, T::one());
                // Möller–Trumbore against the camera-space triangle.
                let e1 = pts[1] - pts[0];
                let e2 = pts[2] - pts[0];
                let pvec = dirh.cross(&e2);
                let det = e1.dot(&pvec);
                if det.abs() < c(1e-20) {
                    continue;
                }
                let inv_det = T::one() / det;
                let tvec = -pts[0];
                let u = tvec.dot(&pvec) * inv_det;
                if u < T::zero() || u > T::one() {
                    continue;
                }
                let qvec = tvec.cross(&e1);
                let v = dirh.dot(&qvec) * inv_det;
                if v < T::zero() || u + v > T::one() {
                    continue;
                }
                let t = e2.dot(&qvec) * inv_det;
                if t <= T::EPS_BEHIND {
                    continue;
                }
                let cur = depth.get(x as usize, y as usize)[0];
                if cur == T::zero() || t < cur {
                    depth.set(x as usize, y as usize, [t]);
                    normal.set(x as usize, y as usize, [fnormal.x, fnormal.y, fnormal.z]);
                }
            }
        }
    }
    (depth, normal)
}
