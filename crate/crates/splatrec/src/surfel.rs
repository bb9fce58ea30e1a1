//! Surfel primitives and their instantiation from aligned pointmaps:
//! exact k-NN, PCA normals, tangent frames and density-based scales.

use crate::error::{Error, Result};
use crate::geometry::{quat_to_matrix, Quaternion};
use crate::image::Image3;
use crate::pointmap::AlignedScene;
use crate::real::{c, Real};
use crate::sh::{dc_from_color, SH_COEFFS, SH_TOTAL};
use nalgebra::{Matrix3, Vector3};

/// One planar Gaussian primitive. Scales are stored as logs, opacity as a
/// logit; the quaternion encodes the local frame [u, v, n] with n the
/// surfel normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Surfel<T> {
    pub center: Vector3<T>,
    pub rotation: Quaternion<T>,
    pub log_scale: [T; 2],
    pub opacity_raw: T,
    pub sh: Vec<T>,
}

impl<T: Real> Surfel<T> {
    pub fn opacity(&self) -> T {
        sigmoid(self.opacity_raw)
    }

    pub fn scale(&self) -> [T; 2] {
        [self.log_scale[0].exp(), self.log_scale[1].exp()]
    }

    pub fn frame(&self) -> Matrix3<T> {
        quat_to_matrix(&self.rotation)
    }

    pub fn normal(&self) -> Vector3<T> {
        self.frame().column(2).into()
    }

    pub fn is_finite(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
            && self.rotation.as_array().iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_raw.is_finite()
            && self.sh.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Surfel<U> {
        Surfel {
            center: self.center.map(|v| c(v.to_f64c())),
            rotation: self.rotation.cast(),
            log_scale: [c(self.log_scale[0].to_f64c()), c(self.log_scale[1].to_f64c())],
            opacity_raw: c(self.opacity_raw.to_f64c()),
            sh: self.sh.iter().map(|v| c(v.to_f64c())).collect(),
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

#[derive(Debug, Clone, Default)]
pub struct SurfelCloud<T> {
    pub surfels: Vec<Surfel<T>>,
    /// View that produced each surfel, for mask cleaning.
    pub source_view: Vec<u32>,
}

impl<T: Real> SurfelCloud<T> {
    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn cast<U: Real>(&self) -> SurfelCloud<U> {
        SurfelCloud {
            surfels: self.surfels.iter().map(|s| s.cast()).collect(),
            source_view: self.source_view.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// k-nearest neighbors (kd-tree; the brute-force pairing lives in tests)

struct KdNode {
    axis: usize,
    index: usize,
    left: Option<Box<KdNode>>,
    right: Option<Box<KdNode>>,
}

pub struct KdTree<'a, T> {
    points: &'a [Vector3<T>],
    root: Option<Box<KdNode>>,
}

impl<'a, T: Real> KdTree<'a, T> {
    pub fn build(points: &'a [Vector3<T>]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(points, &mut idx);
        Self { points, root }
    }

    fn build_node(points: &[Vector3<T>], idx: &mut [usize]) -> Option<Box<KdNode>> {
        if idx.is_empty() {
            return None;
        }
        // Split along the widest axis for balanced queries.
        let mut lo = [T::max_value().unwrap(); 3];
        let mut hi = [T::min_value().unwrap(); 3];
        for &i in idx.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| {
                (hi[a] - lo[a])
                    .partial_cmp(&(hi[b] - lo[b]))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let index = idx[mid];
        let (left_idx, rest) = idx.split_at_mut(mid);
        let right_idx = &mut rest[1..];
        Some(Box::new(KdNode {
            axis,
            index,
            left: Self::build_node(points, left_idx),
            right: Self::build_node(points, right_idx),
        }))
    }

    /// Exact k nearest neighbors of `query`, excluding `exclude`.
    /// Returned sorted by (distance², index).
    pub fn knn(&self, query: &Vector3<T>, k: usize, exclude: Option<usize>) -> Vec<(T, usize)> {
        let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
        self.search(self.root.as_deref(), query, k, exclude, &mut best);
        best
    }

    fn search(
        &self,
        node: Option<&KdNode>,
        query: &Vector3<T>,
        k: usize,
        exclude: Option<usize>,
        best: &mut Vec<(T, usize)>,
    ) {
        let Some(node) = node else { return };
        let p = &self.points[node.index];
        if Some(node.index) != exclude {
            let d2 = (p - query).norm_squared();
            let entry = (d2, node.index);
            let pos = best
                .binary_search_by(|probe| {
                    probe
                        .0
                        .partial_cmp(&entry.0)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(probe.1.cmp(&entry.1))
                })
                .unwrap_or_else(|e| e);
            if pos < k {
                best.insert(pos, entry);
                best.truncate(k);
            }
        }
        let diff = query[node.axis] - p[node.axis];
        let (near, far) = if diff < T::zero() {
            (node.left.as_deref(), node.right.as_deref())
        } else {
            (node.right.as_deref(), node.left.as_deref())
        };
        self.search(near, query, k, exclude, best);
        if best.len() < k || diff * diff <= best.last().unwrap().0 {
            self.search(far, query, k, exclude, best);
        }
    }
}

/// Exact k nearest Euclidean neighbors per point, self excluded.
pub fn knn<T: Real>(points: &[Vector3<T>], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::InvalidInput("knn: k must be ≥ 1".into()));
    }
    if points.len() < k + 1 {
        return Err(Error::InvalidInput(format!(
            "knn: need at least k+1 = {} points, got {}",
            k + 1,
            points.len()
        )));
    }
    let tree = KdTree::build(points);
    Ok((0..points.len())
        .map(|i| {
            tree.knn(&points[i], k, Some(i))
                .into_iter()
                .map(|(_, j)| j)
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// PCA normal and tangent frame

/// Covariance eigen-decomposition of a neighborhood: the unit normal is the
/// eigenvector of the smallest eigenvalue, with the sign flipped toward
/// `toward` when given. Eigenvalues are returned sorted λ1 ≥ λ2 ≥ λ3.
pub fn pca_normal<T: Real>(
    neighborhood: &[Vector3<T>],
    toward: Option<&Vector3<T>>,
) -> Result<(Vector3<T>, [T; 3])> {
    if neighborhood.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "pca_normal: need ≥ 3 points, got {}",
            neighborhood.len()
        )));
    }
    let n = T::from_usize(neighborhood.len()).unwrap();
    let mean = neighborhood.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::<T>::zeros();
    for p in neighborhood {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let lams = [
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    ];
    if lams[0] <= T::zero() || lams[1] <= lams[0] * c(1e-10) {
        return Err(Error::Degenerate(
            "pca_normal: rank-deficient neighborhood (collinear or coincident points)".into(),
        ));
    }

    let mut normal: Vector3<T> = eig.eigenvectors.column(order[2]).into();
    // λ2 ≈ λ3 tie: the normal direction in that plane is ambiguous; pick the
    // candidate most aligned with the viewing ray so results stay
    // deterministic.
    if let Some(dir) = toward {
        if (lams[1] - lams[2]).abs() <= c::<T>(1e-12) * lams[0] {
            let alt: Vector3<T> = eig.eigenvectors.column(order[1]).into();
            let ray = dir - mean;
            if alt.dot(&ray).abs() > normal.dot(&ray).abs() {
                normal = alt;
            }
        }
        if normal.dot(&(dir - mean)) < T::zero() {
            normal = -normal;
        }
    }
    Ok((normal.normalize(), lams))
}

/// Orthonormal right-handed frame [u, v, n] from a unit normal, via
/// a = (−n_y, n_x, 0), u = n×a/‖n×a‖, v = n×u; the degenerate n ≈ ±e_z
/// falls back to a = (1, 0, 0).
pub fn tangent_frame<T: Real>(n: &Vector3<T>) -> (Matrix3<T>, Quaternion<T>) {
    let n = n.normalize();
    let mut a = Vector3::new(-n.y, n.x, T::zero());
    if a.norm() < c(1e-6) {
        a = Vector3::new(T::one(), T::zero(), T::zero());
    }
    let u = n.cross(&a).normalize();
    let v = n.cross(&u);
    let frame = Matrix3::from_columns(&[u, v, n]);
    (frame, Quaternion::from_matrix(&frame))
}

// ---------------------------------------------------------------------------
// Cloud initialization

#[derive(Debug, Clone)]
pub struct InitConfig<T> {
    /// Confidence threshold for instantiating a surfel; `None` uses the
    /// per-scene median confidence.
    pub min_conf: Option<T>,
    pub scale_gain: T,
    pub knn_k: usize,
    pub opacity: T,
}

impl<T: Real> Default for InitConfig<T> {
    fn default() -> Self {
        Self {
            min_conf: None,
            scale_gain: T::one(),
            knn_k: 20,
            opacity: c(0.8),
        }
    }
}

/// One surfel per confident pointmap pixel: position from χ, orientation
/// from the PCA normal's tangent frame, scale from the mean 3-NN distance,
/// DC color from the source image, default opacity.
pub fn init_cloud<T: Real>(
    aligned: &AlignedScene<T>,
    images: &[Image3<T>],
    cfg: &InitConfig<T>,
) -> Result<SurfelCloud<T>> {
    if images.len() != aligned.chi.len() {
        return Err(Error::InvalidInput(format!(
            "init_cloud: {} images for {} aligned views",
            images.len(),
            aligned.chi.len()
        )));
    }
    for (img, chi) in images.iter().zip(&aligned.chi) {
        if !img.same_size(chi) {
            return Err(Error::InvalidInput(
                "init_cloud: image and pointmap sizes differ".into(),
            ));
        }
    }

    let min_conf = cfg.min_conf.unwrap_or_else(|| {
        let mut all: Vec<T> = aligned
            .conf
            .iter()
            .flat_map(|c| c.data.iter().copied())
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        if all.is_empty() {
            T::zero()
        } else {
            all[all.len() / 2]
        }
    });

    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut views = Vec::new();
    for (vi, (chi, conf)) in aligned.chi.iter().zip(&aligned.conf).enumerate() {
        for i in 0..chi.pixels() {
            if conf.data[i] < min_conf || conf.data[i] <= T::zero() {
                continue;
            }
            let p = Vector3::new(chi.data[3 * i], chi.data[3 * i + 1], chi.data[3 * i + 2]);
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                continue;
            }
            points.push(p);
            colors.push([
                images[vi].data[3 * i],
                images[vi].data[3 * i + 1],
                images[vi].data[3 * i + 2],
            ]);
            views.push(vi as u32);
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidInput(
            "init_cloud: no pixel met the confidence threshold".into(),
        ));
    }

    let k_normal = cfg.knn_k.min(points.len().saturating_sub(1)).max(3.min(points.len() - 1));
    let k_density = 3.min(points.len() - 1).max(1);
    let tree = KdTree::build(&points);
    let opacity_raw = logit(cfg.opacity);

    let mut cloud = SurfelCloud::default();
    for (i, p) in points.iter().enumerate() {
        let cam_center = aligned.poses[views[i] as usize].camera_center();

        let nn = tree.knn(p, k_normal, Some(i));
        let neighborhood: Vec<Vector3<T>> = nn.iter().map(|&(_, j)| points[j]).collect();
        let view_dir = (cam_center - p).normalize();
        let normal = match pca_normal(&neighborhood, Some(&cam_center)) {
            Ok((n, _)) => n,
            // Rank-deficient neighborhoods take the viewing ray as normal.
            Err(Error::Degenerate(_)) => view_dir,
            Err(e) => return Err(e),
        };
        let (_, quat) = tangent_frame(&normal);

        let near = tree.knn(p, k_density, Some(i));
        let mean_dist = near
            .iter()
            .map(|&(d2, _)| d2.sqrt())
            .sum::<T>()
            / T::from_usize(near.len()).unwrap();
        let s = (cfg.scale_gain * mean_dist).max(c(1e-12));

        let mut sh = vec![T::zero(); SH_TOTAL];
        for ch in 0..3 {
            sh[ch * SH_COEFFS] = dc_from_color(colors[i][ch]);
        }

        cloud.surfels.push(Surfel {
            center: *p,
            rotation: quat,
            log_scale: [s.ln(), s.ln()],
            opacity_raw,
            sh,
        });
        cloud.source_view.push(views[i]);
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::image::Image1;
    use crate::sh::evaluate_sh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_knn(points: &[Vector3<f64>], i: usize, k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, p)| ((p - points[i]).norm_squared(), j))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn knn_unit_square_corners() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let nn = knn(&pts, 1).unwrap();
        for (i, list) in nn.iter().enumerate() {
            let d: f64 = (pts[list[0]] - pts[i]).norm();
            assert!((d - 1.0).abs() < 1e-12, "corner {i} neighbor at {d}");
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let pts: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let nn = knn(&pts, 8).unwrap();
        for i in 0..pts.len() {
            assert_eq!(nn[i], brute_force_knn(&pts, i, 8), "point {i}");
        }
    }

    #[test]
    fn knn_rejects_k_geq_n() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        assert!(knn(&pts, 2).is_err());
    }

    #[test]
    fn pca_normal_planar() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<Vector3<f64>> = (0..50)
            .map(|_| Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, 0.0))
            .collect();
        let (n, lams) = pca_normal(&pts, None).unwrap();
        assert!(n.z.abs() > 1.0 - 1e-9);
        assert!(lams[2].abs() < 1e-12);
    }

    #[test]
    fn pca_normal_noisy_plane_within_2_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        // Oracle: closed-form covariance eigen-decomposition on the same
        // samples, done with explicit 3×3 arithmetic.
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|_| {
                Vector3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    (rng.gen::<f64>() - 0.5) * 0.02,
                )
            })
            .collect();
        let (n, _) = pca_normal(&pts, None).unwrap();
        let cos = n.z.abs();
        assert!(cos > 2.0_f64.to_radians().cos(), "normal off by acos({cos})");
    }

    #[test]
    fn pca_normal_collinear_is_degenerate() {
        let pts: Vec<Vector3<f64>> = (0..3).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            pca_normal(&pts, None),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn tangent_frame_x_axis() {
        let (frame, quat) = tangent_frame(&Vector3::new(1.0f64, 0.0, 0.0));
        // Direct arithmetic oracle: orthonormality, right-handedness, and
        // the normal in the third column.
        let u: Vector3<f64> = frame.column(0).into();
        let v: Vector3<f64> = frame.column(1).into();
        let n: Vector3<f64> = frame.column(2).into();
        assert!(u.dot(&v).abs() < 1e-12);
        assert!(u.dot(&n).abs() < 1e-12);
        assert!(v.dot(&n).abs() < 1e-12);
        assert!((frame.determinant() - 1.0).abs() < 1e-12);
        assert!((n - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((quat_to_matrix(&quat) - frame).norm() < 1e-9);
    }

    #[test]
    fn tangent_frame_degenerate_z() {
        let (frame, _) = tangent_frame(&Vector3::new(0.0f64, 0.0, 1.0));
        assert!((frame.determinant() - 1.0).abs() < 1e-12);
        let n: Vector3<f64> = frame.column(2).into();
        assert!((n - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn tangent_frame_random_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..1000 {
            let n = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let (frame, quat) = tangent_frame(&n);
            let err = (frame.transpose() * frame - Matrix3::identity()).norm();
            assert!(err < 1e-6);
            assert!((frame.determinant() - 1.0).abs() < 1e-6);
            assert!((quat_to_matrix(&quat) - frame).norm() < 1e-6);
        }
    }

    fn plane_scene(w: usize, h: usize, spacing: f64) -> (AlignedScene<f64>, Vec<Image3<f64>>) {
        let chi = Image3::from_fn(w, h, |x, y| {
            [x as f64 * spacing, y as f64 * spacing, 1.0]
        });
        let conf = Image1::from_fn(w, h, |_, _| [1.0]);
        let img = Image3::from_fn(w, h, |x, _| [if x % 2 == 0 { 1.0 } else { 0.0 }, 0.0, 0.0]);
        let scene = AlignedScene {
            chi: vec![chi],
            conf: vec![conf],
            per_edge: vec![crate::geometry::Sim3::identity()],
            ref_edge: vec![Some(0)],
            poses: vec![Pose::identity()],
            per_view_focal: vec![100.0],
            focal: 100.0,
        };
        (scene, vec![img])
    }

    #[test]
    fn init_cloud_opacity_default() {
        let (scene, images) = plane_scene(8, 8, 0.1);
        let cloud = init_cloud(&scene, &images, &InitConfig::default()).unwrap();
        for s in &cloud.surfels {
            assert!((s.opacity() - 0.8).abs() < 1e-6);
        }
    }

    #[test]
    fn init_cloud_grid_scale_matches_analytic_3nn() {
        let (w, h, spacing) = (8, 8, 0.25);
        let (scene, images) = plane_scene(w, h, spacing);
        let cfg = InitConfig {
            scale_gain: 1.0,
            min_conf: Some(0.5),
            ..Default::default()
        };
        let cloud = init_cloud(&scene, &images, &cfg).unwrap();
        // Analytic 3-NN mean distance on a uniform grid, per point.
        let analytic = |x: usize, y: usize| {
            let mut d = Vec::new();
            for yy in 0..h as i64 {
                for xx in 0..w as i64 {
                    if (xx, yy) == (x as i64, y as i64) {
                        continue;
                    }
                    let dx = (xx - x as i64) as f64 * spacing;
                    let dy = (yy - y as i64) as f64 * spacing;
                    d.push((dx * dx + dy * dy).sqrt());
                }
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (d[0] + d[1] + d[2]) / 3.0
        };
        for (i, s) in cloud.surfels.iter().enumerate() {
            let x = i % w;
            let y = i / w;
            let expected = analytic(x, y);
            let [s0, s1] = s.scale();
            assert!((s0 - expected).abs() < 1e-6, "({x},{y}): {s0} vs {expected}");
            assert!((s1 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn init_cloud_dc_only_color() {
        let (scene, images) = plane_scene(6, 6, 0.2);
        let cloud = init_cloud(&scene, &images, &InitConfig { min_conf: Some(0.5), ..Default::default() }).unwrap();
        for (i, s) in cloud.surfels.iter().enumerate() {
            let x = i % 6;
            let want = if x % 2 == 0 { 1.0 } else { 0.0 };
            let rgb = evaluate_sh(&s.sh, &Vector3::new(0.0, 0.0, 1.0));
            assert!((rgb[0] - want).abs() < 1e-9);
            assert!((rgb[1] - 0.0).abs() < 1e-9);
            for k in 1..SH_COEFFS {
                for ch in 0..3 {
                    assert_eq!(s.sh[ch * SH_COEFFS + k], 0.0);
                }
            }
        }
    }

    #[test]
    fn init_cloud_quaternion_reproduces_pca_normal() {
        let (scene, images) = plane_scene(10, 10, 0.1);
        let cloud = init_cloud(&scene, &images, &InitConfig { min_conf: Some(0.5), ..Default::default() }).unwrap();
        for s in &cloud.surfels {
            let n = s.normal();
            assert!(n.z.abs() > 1.0 - 1e-5, "frame normal {n:?}");
        }
    }

    #[test]
    fn init_cloud_normal_faces_camera() {
        let (scene, images) = plane_scene(10, 10, 0.1);
        let cloud = init_cloud(&scene, &images, &InitConfig { min_conf: Some(0.5), ..Default::default() }).unwrap();
        let cam = scene.poses[0].camera_center();
        for s in &cloud.surfels {
            assert!(s.normal().dot(&(cam - s.center)) >= 0.0);
        }
    }

    #[test]
    fn init_cloud_empty_when_all_below_threshold() {
        let (scene, images) = plane_scene(4, 4, 0.1);
        let cfg = InitConfig {
            min_conf: Some(2.0),
            ..Default::default()
        };
        assert!(init_cloud(&scene, &images, &cfg).is_err());
    }

    #[test]
    fn init_cloud_deterministic() {
        let (scene, images) = plane_scene(8, 8, 0.15);
        let a = init_cloud(&scene, &images, &InitConfig::default()).unwrap();
        let b = init_cloud(&scene, &images, &InitConfig::default()).unwrap();
        assert_eq!(a.surfels, b.surfels);
    }
}
