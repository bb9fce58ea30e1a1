//! View connectivity graph and confidence-weighted global alignment of
//! pairwise pointmaps, producing globally aligned per-view pointmaps,
//! per-view poses and an averaged focal length.

use crate::error::{Error, Result};
use crate::geometry::{umeyama_align, Intrinsics, Pose, Quaternion, Sim3};
use crate::image::{Image1, Image3};
use crate::real::{c, Real};
use nalgebra::{Matrix3, Vector3};

/// Pairwise pointmaps for one graph edge (n, m). Both maps live in the
/// camera frame of view n, at the pair's own arbitrary scale.
#[derive(Debug, Clone)]
pub struct PointMapPair<T> {
    pub view_n: usize,
    pub view_m: usize,
    /// Points of view n's pixels, frame of n.
    pub points_n: Image3<T>,
    /// Points of view m's pixels, frame of n.
    pub points_m: Image3<T>,
    pub conf_n: Image1<T>,
    pub conf_m: Image1<T>,
}

impl<T: Real> PointMapPair<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.points_n.same_size(&self.points_m)
            || !self.points_n.same_size(&self.conf_n)
            || !self.points_n.same_size(&self.conf_m)
        {
            return Err(Error::InvalidInput(
                "pointmap pair: mismatched buffer sizes".into(),
            ));
        }
        if self.view_n == self.view_m {
            return Err(Error::InvalidInput("pointmap pair: self edge".into()));
        }
        for img in [&self.conf_n, &self.conf_m] {
            if img.data.iter().any(|v| *v < T::zero()) {
                return Err(Error::InvalidInput("confidence must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ViewGraph<T> {
    pub num_views: usize,
    pub edges: Vec<PointMapPair<T>>,
}

/// Validates edge indices and connectivity.
pub fn build_graph<T: Real>(pairs: Vec<PointMapPair<T>>, num_views: usize) -> Result<ViewGraph<T>> {
    for p in &pairs {
        p.validate()?;
        if p.view_n >= num_views || p.view_m >= num_views {
            return Err(Error::InvalidInput(format!(
                "edge ({}, {}) references a view outside 0..{}",
                p.view_n, p.view_m, num_views
            )));
        }
    }
    // Union-find over views.
    let mut parent: Vec<usize> = (0..num_views).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for p in &pairs {
        let a = find(&mut parent, p.view_n);
        let b = find(&mut parent, p.view_m);
        parent[a] = b;
    }
    let mut components: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for v in 0..num_views {
        let r = find(&mut parent, v);
        components.entry(r).or_default().push(v);
    }
    if components.len() > 1 {
        return Err(Error::Disconnected(components.into_values().collect()));
    }
    Ok(ViewGraph {
        num_views,
        edges: pairs,
    })
}

/// Output of global alignment: per-view aligned pointmaps in one world
/// frame, per-view validity (max source confidence), per-edge similarity
/// transforms, and — once camera recovery has run — poses and focal.
#[derive(Debug, Clone)]
pub struct AlignedScene<T> {
    pub chi: Vec<Image3<T>>,
    pub conf: Vec<Image1<T>>,
    /// Per-edge transform from the edge's local frame into the world frame.
    pub per_edge: Vec<Sim3<T>>,
    /// For each view, the index of an edge in which it is the reference
    /// (first) view, when one exists. Camera recovery reads the view's
    /// camera frame there.
    pub ref_edge: Vec<Option<usize>>,
    pub poses: Vec<Pose<T>>,
    pub per_view_focal: Vec<T>,
    pub focal: T,
}

#[derive(Debug, Clone)]
pub struct AlignConfig<T> {
    pub iters: usize,
    pub lr: T,
    /// Charbonnier smoothing for |·| at zero.
    pub charbonnier_eps: T,
}

impl<T: Real> Default for AlignConfig<T> {
    fn default() -> Self {
        Self {
            iters: 300,
            lr: c(1e-2),
            charbonnier_eps: c(1e-6),
        }
    }
}

struct EdgeParams<T> {
    log_scale: T,
    rotation: Quaternion<T>,
    translation: Vector3<T>,
}

impl<T: Real> EdgeParams<T> {
    fn sim3(&self) -> Sim3<T> {
        Sim3 {
            scale: self.log_scale.exp(),
            rotation: self.rotation,
            translation: self.translation,
        }
    }
}

/// Minimizes Σ_e Σ_{v∈e} Σ_i O·ρ(χᵢᵛ − σ_e·P_e·P_{v,e}ⁱ) over the free
/// pointmaps χ and the per-edge similarities, by Adam with a spanning-tree
/// initialization. The scale gauge is fixed by mean-centering the per-edge
/// log-scales after every step; the frame gauge is fixed downstream by
/// pinning view 0's recovered pose to identity.
pub fn global_align<T: Real>(graph: &ViewGraph<T>, cfg: &AlignConfig<T>) -> Result<AlignedScene<T>> {
    if cfg.iters < 1 {
        return Err(Error::InvalidInput("global_align: iters must be ≥ 1".into()));
    }
    if graph.edges.is_empty() {
        return Err(Error::InvalidInput("global_align: no edges".into()));
    }
    let num_views = graph.num_views;

    let ref_edge = reference_edges(graph);

    // --- Initialization: spanning tree over views, Umeyama per edge. ---
    let mut edge_params: Vec<Option<EdgeParams<T>>> = (0..graph.edges.len()).map(|_| None).collect();
    let mut chi: Vec<Option<Image3<T>>> = vec![None; num_views];
    let mut conf: Vec<Option<Image1<T>>> = vec![None; num_views];

    // Seed with some edge referencing view 0 when available, else edge 0.
    let seed_edge = graph
        .edges
        .iter()
        .position(|e| e.view_n == 0)
        .unwrap_or(0);
    anchor_edge_identity(graph, seed_edge, &mut edge_params, &mut chi, &mut conf);

    // Breadth-first anchoring of the remaining edges.
    loop {
        let mut progressed = false;
        for (ei, e) in graph.edges.iter().enumerate() {
            if edge_params[ei].is_some() {
                continue;
            }
            // Fit this edge's transform against any already-anchored view.
            let mut src = Vec::new();
            let mut dst = Vec::new();
            for (points, cmap, view) in [
                (&e.points_n, &e.conf_n, e.view_n),
                (&e.points_m, &e.conf_m, e.view_m),
            ] {
                if let Some(anchor) = &chi[view] {
                    let aconf = conf[view].as_ref().unwrap();
                    for i in 0..points.pixels() {
                        if cmap.data[i] > T::zero() && aconf.data[i] > T::zero() {
                            src.push(Vector3::new(
                                points.data[3 * i],
                                points.data[3 * i + 1],
                                points.data[3 * i + 2],
                            ));
                            dst.push(Vector3::new(
                                anchor.data[3 * i],
                                anchor.data[3 * i + 1],
                                anchor.data[3 * i + 2],
                            ));
                        }
                    }
                }
            }
            if src.len() >= 3 {
                let sim = umeyama_align(&src, &dst, true).unwrap_or_else(|_| Sim3::identity());
                edge_params[ei] = Some(EdgeParams {
                    log_scale: sim.scale.ln(),
                    rotation: sim.rotation,
                    translation: sim.translation,
                });
                fill_chi_from_edge(graph, ei, &edge_params[ei], &mut chi, &mut conf);
                progressed = true;
            }
        }
        if edge_params.iter().all(|p| p.is_some()) {
            break;
        }
        if !progressed {
            // Connected graphs always progress through shared views; edges
            // with zero confident overlap fall back to identity.
            for (ei, p) in edge_params.iter_mut().enumerate() {
                if p.is_none() {
                    *p = Some(EdgeParams {
                        log_scale: T::zero(),
                        rotation: Quaternion::identity(),
                        translation: Vector3::zeros(),
                    });
                    fill_chi_from_edge(graph, ei, p, &mut chi, &mut conf);
                }
            }
            break;
        }
    }
    let mut edge_params: Vec<EdgeParams<T>> = edge_params.into_iter().map(|p| p.unwrap()).collect();
    let mut chi: Vec<Image3<T>> = chi
        .into_iter()
        .enumerate()
        .map(|(v, x)| x.ok_or_else(|| Error::InvalidInput(format!("view {v} has no edge"))))
        .collect::<Result<_>>()?;
    let conf: Vec<Image1<T>> = conf.into_iter().map(|x| x.unwrap()).collect();

    recenter_log_scales(&mut edge_params);

    // --- Adam over (χ, per-edge Sim3). ---
    let n_edge_params = 8; // log_scale + quat(4) + translation(3)
    let chi_offsets: Vec<usize> = {
        let mut off = vec![0usize];
        for x in &chi {
            off.push(off.last().unwrap() + x.data.len());
        }
        off
    };
    let n_params = chi_offsets.last().unwrap() + graph.edges.len() * n_edge_params;
    let mut m = vec![T::zero(); n_params];
    let mut v = vec![T::zero(); n_params];
    let beta1 = c::<T>(0.9);
    let beta2 = c::<T>(0.999);
    let eps = c::<T>(1e-15);

    let mut initial_obj = None;
    let mut best_obj = T::max_value().unwrap();
    let mut rising_streak = 0usize;

    for step in 0..cfg.iters {
        let (obj, grad) = alignment_objective(graph, &chi, &edge_params, &chi_offsets, cfg);
        if initial_obj.is_none() {
            initial_obj = Some(obj);
        }
        if obj < best_obj {
            best_obj = obj;
            rising_streak = 0;
        } else {
            rising_streak += 1;
            if rising_streak > 100 {
                return Err(Error::Diverged(format!(
                    "global_align: objective rose for {rising_streak} consecutive steps \
                     (current {:.6e}, best {:.6e})",
                    obj.to_f64c(),
                    best_obj.to_f64c()
                )));
            }
        }

        let t = T::from_usize(step + 1).unwrap();
        let bc1 = T::one() - beta1.powf(t);
        let bc2 = T::one() - beta2.powf(t);
        // Cosine decay to lr/100 damps the L1 jitter near the optimum.
        let progress = T::from_usize(step).unwrap() / T::from_usize(cfg.iters).unwrap();
        let lr_min = cfg.lr * c(0.01);
        let lr = lr_min
            + (cfg.lr - lr_min)
                * c::<T>(0.5)
                * (T::one() + (T::pi() * progress).cos());
        let mut upd = vec![T::zero(); n_params];
        for i in 0..n_params {
            m[i] = beta1 * m[i] + (T::one() - beta1) * grad[i];
            v[i] = beta2 * v[i] + (T::one() - beta2) * grad[i] * grad[i];
            upd[i] = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
        for (vi, x) in chi.iter_mut().enumerate() {
            let base = chi_offsets[vi];
            for (j, val) in x.data.iter_mut().enumerate() {
                *val -= upd[base + j];
            }
        }
        let ebase = *chi_offsets.last().unwrap();
        for (ei, ep) in edge_params.iter_mut().enumerate() {
            let b = ebase + ei * n_edge_params;
            ep.log_scale -= upd[b];
            let q = ep.rotation.as_array();
            ep.rotation = Quaternion::from_array([
                q[0] - upd[b + 1],
                q[1] - upd[b + 2],
                q[2] - upd[b + 3],
                q[3] - upd[b + 4],
            ]);
            ep.translation.x -= upd[b + 5];
            ep.translation.y -= upd[b + 6];
            ep.translation.z -= upd[b + 7];
        }
        recenter_log_scales(&mut edge_params);
    }

    let (final_obj, _) = alignment_objective(graph, &chi, &edge_params, &chi_offsets, cfg);
    if let Some(init) = initial_obj {
        if final_obj > init + c::<T>(1e-9) * (T::one() + init.abs()) {
            return Err(Error::Diverged(format!(
                "global_align: final objective {:.6e} exceeds initial {:.6e}",
                final_obj.to_f64c(),
                init.to_f64c()
            )));
        }
    }

    Ok(AlignedScene {
        chi,
        conf,
        per_edge: edge_params.iter().map(|p| p.sim3()).collect(),
        ref_edge,
        poses: vec![Pose::identity(); num_views],
        per_view_focal: vec![T::zero(); num_views],
        focal: T::zero(),
    })
}

/// For each view, an edge where it appears as the reference (first) view.
fn reference_edges<T: Real>(graph: &ViewGraph<T>) -> Vec<Option<usize>> {
    let mut ref_edge = vec![None; graph.num_views];
    for (ei, e) in graph.edges.iter().enumerate() {
        if ref_edge[e.view_n].is_none() {
            ref_edge[e.view_n] = Some(ei);
        }
    }
    ref_edge
}

fn anchor_edge_identity<T: Real>(
    graph: &ViewGraph<T>,
    ei: usize,
    edge_params: &mut [Option<EdgeParams<T>>],
    chi: &mut [Option<Image3<T>>],
    conf: &mut [Option<Image1<T>>],
) {
    edge_params[ei] = Some(EdgeParams {
        log_scale: T::zero(),
        rotation: Quaternion::identity(),
        translation: Vector3::zeros(),
    });
    fill_chi_from_edge(graph, ei, &edge_params[ei], chi, conf);
}

fn fill_chi_from_edge<T: Real>(
    graph: &ViewGraph<T>,
    ei: usize,
    params: &Option<EdgeParams<T>>,
    chi: &mut [Option<Image3<T>>],
    conf: &mut [Option<Image1<T>>],
) {
    let e = &graph.edges[ei];
    let sim = params.as_ref().unwrap().sim3();
    for (points, cmap, view) in [
        (&e.points_n, &e.conf_n, e.view_n),
        (&e.points_m, &e.conf_m, e.view_m),
    ] {
        if chi[view].is_some() {
            continue;
        }
        let mut img = Image3::zeros(points.width, points.height);
        for i in 0..points.pixels() {
            let p = Vector3::new(points.data[3 * i], points.data[3 * i + 1], points.data[3 * i + 2]);
            let q = sim.transform(&p);
            img.data[3 * i] = q.x;
            img.data[3 * i + 1] = q.y;
            img.data[3 * i + 2] = q.z;
        }
        chi[view] = Some(img);
        conf[view] = Some(cmap.clone());
    }
}

fn recenter_log_scales<T: Real>(edge_params: &mut [EdgeParams<T>]) {
    let n = T::from_usize(edge_params.len()).unwrap();
    let mean = edge_params.iter().map(|p| p.log_scale).sum::<T>() / n;
    for p in edge_params.iter_mut() {
        p.log_scale -= mean;
    }
}

/// Objective value and gradient. Residual per confident pixel is the
/// Charbonnier-smoothed Euclidean distance ρ(r) = √(‖r‖² + ε²) − ε.
fn alignment_objective<T: Real>(
    graph: &ViewGraph<T>,
    chi: &[Image3<T>],
    edge_params: &[EdgeParams<T>],
    chi_offsets: &[usize],
    cfg: &AlignConfig<T>,
) -> (T, Vec<T>) {
    let n_params = chi_offsets.last().unwrap() + graph.edges.len() * 8;
    let mut grad = vec![T::zero(); n_params];
    let mut obj = T::zero();
    let eps2 = cfg.charbonnier_eps * cfg.charbonnier_eps;
    let ebase = *chi_offsets.last().unwrap();

    for (ei, e) in graph.edges.iter().enumerate() {
        let ep = &edge_params[ei];
        let scale = ep.log_scale.exp();
        let rot = crate::geometry::quat_to_matrix(&ep.rotation);
        let mut d_rot = Matrix3::<T>::zeros();
        let mut d_log_scale = T::zero();
        let mut d_trans = Vector3::<T>::zeros();

        for (points, cmap, view) in [
            (&e.points_n, &e.conf_n, e.view_n),
            (&e.points_m, &e.conf_m, e.view_m),
        ] {
            let x = &chi[view];
            let base = chi_offsets[view];
            for i in 0..points.pixels() {
                let w = cmap.data[i];
                if w <= T::zero() {
                    continue;
                }
                let p = Vector3::new(
                    points.data[3 * i],
                    points.data[3 * i + 1],
                    points.data[3 * i + 2],
                );
                let rp = rot * p;
                let mapped = rp * scale + ep.translation;
                let xv = Vector3::new(x.data[3 * i], x.data[3 * i + 1], x.data[3 * i + 2]);
                let r = xv - mapped;
                let dist = (r.norm_squared() + eps2).sqrt();
                obj += w * (dist - cfg.charbonnier_eps);
                let d_r = r * (w / dist);
                // χ gradient
                grad[base + 3 * i] += d_r.x;
                grad[base + 3 * i + 1] += d_r.y;
                grad[base + 3 * i + 2] += d_r.z;
                // edge parameter gradients (mapped enters negatively)
                d_trans -= d_r;
                d_log_scale -= d_r.dot(&rp) * scale;
                d_rot -= d_r * (p * scale).transpose();
            }
        }

        let b = ebase + ei * 8;
        grad[b] += d_log_scale;
        let dq = crate::geometry::quat_to_matrix_backward(&ep.rotation, &d_rot);
        for k in 0..4 {
            grad[b + 1 + k] += dq[k];
        }
        grad[b + 5] += d_trans.x;
        grad[b + 6] += d_trans.y;
        grad[b + 7] += d_trans.z;
    }
    (obj, grad)
}

/// Recovers per-view focal lengths and poses from the aligned pointmaps,
/// then averages the focals. The view's camera-frame geometry is read from
/// its reference edge (whose maps live in that camera's frame), rescaled to
/// world scale by the edge's σ. The world gauge is fixed by composing all
/// poses so that view 0 is the identity.
pub fn estimate_pose_and_focal<T: Real>(
    scene: &mut AlignedScene<T>,
    width: usize,
    height: usize,
) -> Result<()> {
    let num_views = scene.chi.len();
    let cx = T::from_usize(width).unwrap() / c(2.0);
    let cy = T::from_usize(height).unwrap() / c(2.0);
    let mut poses = Vec::with_capacity(num_views);
    let mut focals = Vec::with_capacity(num_views);

    for v in 0..num_views {
        let chi = &scene.chi[v];
        let conf = &scene.conf[v];
        let Some(edge) = scene.ref_edge[v] else {
            return Err(Error::InvalidInput(format!(
                "view {v} is never the reference view of any edge; camera \
                 recovery needs one such edge per view"
            )));
        };
        let sim = &scene.per_edge[edge];
        let inv = sim.inverse();

        // Camera-frame points at world scale: σ·T⁻¹(χ).
        let mut cam_pts = Vec::new();
        let mut world_pts = Vec::new();
        let mut pixels = Vec::new();
        for y in 0..chi.height {
            for x in 0..chi.width {
                let i = y * chi.width + x;
                if conf.data[i] <= T::zero() {
                    continue;
                }
                let p = Vector3::new(chi.data[3 * i], chi.data[3 * i + 1], chi.data[3 * i + 2]);
                let q = inv.transform(&p) * sim.scale;
                if q.z <= T::EPS_BEHIND {
                    continue;
                }
                cam_pts.push(q);
                world_pts.push(p);
                pixels.push((
                    T::from_usize(x).unwrap() + c(0.5),
                    T::from_usize(y).unwrap() + c(0.5),
                ));
            }
        }
        if cam_pts.len() < 3 {
            return Err(Error::Degenerate(format!(
                "view {v}: too few confident points for camera recovery"
            )));
        }

        // Least-squares pinhole fit: minimize Σ (px−cx − f·X/Z)² + (py−cy − f·Y/Z)².
        let mut num = T::zero();
        let mut den = T::zero();
        for (q, (px, py)) in cam_pts.iter().zip(&pixels) {
            let rx = q.x / q.z;
            let ry = q.y / q.z;
            num += (*px - cx) * rx + (*py - cy) * ry;
            den += rx * rx + ry * ry;
        }
        if den <= c(1e-20) {
            return Err(Error::Degenerate(format!(
                "view {v}: degenerate pointmap (all rays through the principal point)"
            )));
        }
        let f = num / den;
        if f <= T::zero() {
            return Err(Error::Degenerate(format!("view {v}: negative focal fit")));
        }
        focals.push(f);

        let fit = umeyama_align(&world_pts, &cam_pts, false)?;
        poses.push(Pose::new(fit.rotation, fit.translation));
    }

    // Pin view 0 to identity: x' = P₀(x) is the new world frame.
    let gauge = poses[0];
    let gauge_inv = gauge.inverse();
    for pose in poses.iter_mut() {
        *pose = pose.compose(&gauge_inv);
    }
    for x in scene.chi.iter_mut() {
        for i in 0..x.pixels() {
            let p = Vector3::new(x.data[3 * i], x.data[3 * i + 1], x.data[3 * i + 2]);
            let q = gauge.transform(&p);
            x.data[3 * i] = q.x;
            x.data[3 * i + 1] = q.y;
            x.data[3 * i + 2] = q.z;
        }
    }
    for sim in scene.per_edge.iter_mut() {
        let r_g = gauge.rotation_matrix();
        let new_rot = Quaternion::from_matrix(&(r_g * crate::geometry::quat_to_matrix(&sim.rotation)));
        sim.translation = r_g * sim.translation + gauge.translation;
        sim.rotation = new_rot;
    }

    scene.focal = focals.iter().copied().sum::<T>() / T::from_usize(num_views).unwrap();
    scene.per_view_focal = focals;
    scene.poses = poses;
    Ok(())
}

/// Shared intrinsics after focal averaging, principal point at the image
/// center.
pub fn averaged_intrinsics<T: Real>(scene: &AlignedScene<T>, width: usize, height: usize) -> Intrinsics<T> {
    Intrinsics::centered(scene.focal, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_to_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_pointmap(w: usize, h: usize, f: impl Fn(usize, usize) -> Vector3<f64>) -> Image3<f64> {
        Image3::from_fn(w, h, |x, y| {
            let p = f(x, y);
            [p.x, p.y, p.z]
        })
    }

    fn ones(w: usize, h: usize) -> Image1<f64> {
        Image1::from_fn(w, h, |_, _| [1.0])
    }

    #[test]
    fn build_graph_chain_is_connected() {
        let pair = |n, m| PointMapPair {
            view_n: n,
            view_m: m,
            points_n: grid_pointmap(2, 2, |x, y| Vector3::new(x as f64, y as f64, 1.0)),
            points_m: grid_pointmap(2, 2, |x, y| Vector3::new(x as f64, y as f64, 1.0)),
            conf_n: ones(2, 2),
            conf_m: ones(2, 2),
        };
        assert!(build_graph(vec![pair(0, 1), pair(1, 2)], 3).is_ok());
    }

    #[test]
    fn build_graph_reports_components() {
        let pair = |n, m| PointMapPair {
            view_n: n,
            view_m: m,
            points_n: grid_pointmap(2, 2, |x, y| Vector3::new(x as f64, y as f64, 1.0)),
            points_m: grid_pointmap(2, 2, |x, y| Vector3::new(x as f64, y as f64, 1.0)),
            conf_n: ones(2, 2),
            conf_m: ones(2, 2),
        };
        match build_graph(vec![pair(0, 1), pair(2, 3)], 4) {
            Err(Error::Disconnected(comps)) => {
                assert_eq!(comps.len(), 2);
                let mut flat: Vec<usize> = comps.into_iter().flatten().collect();
                flat.sort();
                assert_eq!(flat, vec![0, 1, 2, 3]);
            }
            other => panic!("expected Disconnected, got {other:?}"),
        }
    }

    #[test]
    fn complete_pair_count() {
        let n = 5;
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                pairs.push(PointMapPair {
                    view_n: a,
                    view_m: b,
                    points_n: grid_pointmap(2, 2, |x, y| Vector3::new(x as f64, y as f64, 1.0)),
                    points_m: grid_pointmap(2, 2, |x, y| Vector3::new(x as f64, y as f64, 1.0)),
                    conf_n: ones(2, 2),
                    conf_m: ones(2, 2),
                });
            }
        }
        let g = build_graph(pairs, n).unwrap();
        assert_eq!(g.edges.len(), n * (n - 1) / 2);
    }

    #[test]
    fn already_aligned_single_edge_has_zero_objective() {
        let w = 8;
        let surface = |x: usize, y: usize| {
            Vector3::new(x as f64 * 0.1 - 0.4, y as f64 * 0.1 - 0.4, 2.0 + 0.05 * (x as f64))
        };
        let pair = PointMapPair {
            view_n: 0,
            view_m: 1,
            points_n: grid_pointmap(w, w, surface),
            points_m: grid_pointmap(w, w, |x, y| surface(x, y) + Vector3::new(0.0, 0.0, 0.1)),
            conf_n: ones(w, w),
            conf_m: ones(w, w),
        };
        let graph = build_graph(vec![pair], 2).unwrap();
        let cfg = AlignConfig {
            iters: 1,
            ..Default::default()
        };
        let scene = global_align(&graph, &cfg).unwrap();
        let sim = &scene.per_edge[0];
        assert!((sim.scale - 1.0).abs() < 1e-6);
        assert!((quat_to_matrix(&sim.rotation) - Matrix3::identity()).norm() < 1e-6);
        assert!(sim.translation.norm() < 1e-6);
    }

    /// Construct-and-recover: edge B's pointmaps are edge A's geometry moved
    /// by a known similarity (the pairwise scale ambiguity). The recovered
    /// relative transform between the two edges must match it.
    #[test]
    fn global_align_recovers_known_sim3() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = 32;
        let surface = |x: usize, y: usize| {
            let fx = x as f64 / w as f64 - 0.5;
            let fy = y as f64 / w as f64 - 0.5;
            Vector3::new(fx, fy, 2.0 + 0.3 * (fx * 6.0).sin() * (fy * 6.0).cos())
        };
        let true_scale = 1.5;
        let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        let true_q = Quaternion::from_axis_angle(&(axis / axis.norm() * 0.4));
        let true_r = quat_to_matrix(&true_q);
        let true_t = Vector3::new(0.2, -0.1, 0.3);
        // Edge A: both views' points in the "true" frame.
        let pts_a_n = grid_pointmap(w, w, surface);
        let pts_a_m = grid_pointmap(w, w, |x, y| surface(x, y) + Vector3::new(0.02, 0.0, 0.0));
        // Edge B sees the same geometry through the inverse similarity:
        // world = s·R·local + t  ⇔  local = (world − t)·Rᵀ/s.
        let to_local = |p: Vector3<f64>| true_r.transpose() * (p - true_t) / true_scale;
        let pts_b_m = grid_pointmap(w, w, |x, y| to_local(surface(x, y) + Vector3::new(0.02, 0.0, 0.0)));
        let pts_b_n = grid_pointmap(w, w, |x, y| to_local(surface(x, y)));
        let edge_a = PointMapPair {
            view_n: 0,
            view_m: 1,
            points_n: pts_a_n,
            points_m: pts_a_m,
            conf_n: ones(w, w),
            conf_m: ones(w, w),
        };
        let edge_b = PointMapPair {
            view_n: 1,
            view_m: 0,
            points_n: pts_b_m,
            points_m: pts_b_n,
            conf_n: ones(w, w),
            conf_m: ones(w, w),
        };
        let graph = build_graph(vec![edge_a, edge_b], 2).unwrap();
        let scene = global_align(&graph, &AlignConfig::default()).unwrap();

        // Gauge-invariant checks: relative scale and rotation between edges.
        let rel_scale = scene.per_edge[1].scale / scene.per_edge[0].scale;
        assert!(
            (rel_scale - true_scale).abs() / true_scale < 0.01,
            "relative scale {rel_scale} vs {true_scale}"
        );
        let rel_rot = quat_to_matrix(&scene.per_edge[0].rotation).transpose()
            * quat_to_matrix(&scene.per_edge[1].rotation);
        let angle = ((rel_rot.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        let true_angle = 0.4;
        assert!(
            (angle - true_angle).abs() < 0.5_f64.to_radians(),
            "relative rotation angle {angle} vs {true_angle}"
        );
    }

    #[test]
    fn masked_pixels_do_not_affect_solution() {
        let w = 16;
        let surface = |x: usize, y: usize| {
            let fx = x as f64 / w as f64 - 0.5;
            let fy = y as f64 / w as f64 - 0.5;
            Vector3::new(fx, fy, 1.5 + 0.2 * fx + 0.1 * fy * fy)
        };
        let make = |garbage: bool| {
            let mut points_n = grid_pointmap(w, w, surface);
            let points_m = grid_pointmap(w, w, |x, y| surface(x, y) + Vector3::new(0.01, 0.0, 0.0));
            let mut conf_n = ones(w, w);
            for i in 0..w * w {
                if i % 7 == 0 {
                    conf_n.data[i] = 0.0;
                    if garbage {
                        points_n.data[3 * i] = 1e6;
                        points_n.data[3 * i + 1] = -4e5;
                        points_n.data[3 * i + 2] = 3e7;
                    }
                }
            }
            let pair = PointMapPair {
                view_n: 0,
                view_m: 1,
                points_n,
                points_m,
                conf_n,
                conf_m: ones(w, w),
            };
            let graph = build_graph(vec![pair], 2).unwrap();
            let cfg = AlignConfig {
                iters: 50,
                ..Default::default()
            };
            global_align(&graph, &cfg).unwrap()
        };
        let clean = make(false);
        let dirty = make(true);
        assert!((clean.per_edge[0].scale - dirty.per_edge[0].scale).abs() < 1e-6);
        assert!(
            (quat_to_matrix(&clean.per_edge[0].rotation)
                - quat_to_matrix(&dirty.per_edge[0].rotation))
            .norm()
                < 1e-6
        );
        assert!((clean.per_edge[0].translation - dirty.per_edge[0].translation).norm() < 1e-6);
        // χ at confident pixels also agrees.
        for i in 0..w * w {
            if clean.conf[0].data[i] > 0.0 {
                for k in 0..3 {
                    assert!((clean.chi[0].data[3 * i + k] - dirty.chi[0].data[3 * i + k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn focal_and_pose_recovery_from_known_camera() {
        // χ generated by a known pinhole camera with f = 300.
        let (w, h) = (32, 24);
        let f = 300.0;
        let k = Intrinsics::centered(f, w, h);
        let pose = Pose::new(
            Quaternion::from_axis_angle(&Vector3::new(0.1, -0.2, 0.05)),
            Vector3::new(0.3, 0.1, 0.4),
        );
        let depth = |x: usize, y: usize| 2.0 + 0.01 * (x as f64) + 0.02 * (y as f64);
        let chi_of = |pose: &Pose<f64>| {
            grid_pointmap(w, h, |x, y| {
                let u = (x as f64 + 0.5) / w as f64;
                let v = (y as f64 + 0.5) / h as f64;
                crate::geometry::backproject_unchecked((u, v), depth(x, y), pose, &k)
            })
        };
        let mut scene = AlignedScene {
            chi: vec![chi_of(&Pose::identity()), chi_of(&pose)],
            conf: vec![ones(w, h), ones(w, h)],
            per_edge: vec![Sim3::identity(), Sim3::identity()],
            // Camera frame of each view equals its own backprojection frame —
            // emulate a reference edge mapping by the view's pose inverse.
            ref_edge: vec![Some(0), Some(1)],
            poses: vec![],
            per_view_focal: vec![],
            focal: 0.0,
        };
        // For view 0 the world frame is the camera frame (identity edge).
        // For view 1 the edge transform maps its camera frame into world.
        let inv = pose.inverse();
        scene.per_edge[1] = Sim3 {
            scale: 1.0,
            rotation: inv.rotation,
            translation: inv.translation,
        };
        scene.poses = vec![Pose::identity(); 2];
        estimate_pose_and_focal(&mut scene, w, h).unwrap();
        for fv in &scene.per_view_focal {
            assert!(
                (fv - f).abs() / f < 0.005,
                "recovered focal {fv} vs {f}"
            );
        }
        // Recovered relative pose matches the ground truth (view 0 pinned).
        let rel = scene.poses[1];
        assert!((rel.rotation_matrix() - pose.rotation_matrix()).norm() < 1e-6);
        assert!((rel.translation - pose.translation).norm() < 1e-6);
    }

    #[test]
    fn identical_chi_gives_identity_relative_poses() {
        let (w, h) = (16, 16);
        let chi = grid_pointmap(w, h, |x, y| {
            Vector3::new(
                (x as f64 + 0.5 - 8.0) / 100.0,
                (y as f64 + 0.5 - 8.0) / 100.0,
                1.0 + 0.001 * (x as f64 * y as f64),
            )
        });
        let mut scene = AlignedScene {
            chi: vec![chi.clone(), chi.clone(), chi],
            conf: vec![ones(w, h), ones(w, h), ones(w, h)],
            per_edge: vec![Sim3::identity()],
            ref_edge: vec![Some(0), Some(0), Some(0)],
            poses: vec![],
            per_view_focal: vec![],
            focal: 0.0,
        };
        scene.poses = vec![Pose::identity(); 3];
        estimate_pose_and_focal(&mut scene, w, h).unwrap();
        for p in &scene.poses {
            assert!((p.rotation_matrix() - Matrix3::identity()).norm() < 1e-9);
            assert!(p.translation.norm() < 1e-9);
        }
    }

    #[test]
    fn focal_mean_is_arithmetic() {
        // Three synthetic views with per-view focals 290/300/310 → f̄ = 300.
        let (w, h) = (24, 24);
        let mut chis = Vec::new();
        for f in [290.0, 300.0, 310.0] {
            let k = Intrinsics::centered(f, w, h);
            chis.push(grid_pointmap(w, h, |x, y| {
                let u = (x as f64 + 0.5) / w as f64;
                let v = (y as f64 + 0.5) / h as f64;
                crate::geometry::backproject_camera((u, v), 1.0 + 0.01 * (x + y) as f64, &k)
            }));
        }
        let mut scene = AlignedScene {
            chi: chis,
            conf: vec![ones(w, h), ones(w, h), ones(w, h)],
            per_edge: vec![Sim3::identity()],
            ref_edge: vec![Some(0), Some(0), Some(0)],
            poses: vec![Pose::identity(); 3],
            per_view_focal: vec![],
            focal: 0.0,
        };
        estimate_pose_and_focal(&mut scene, w, h).unwrap();
        assert!((scene.focal - 300.0).abs() < 0.5);
    }

    #[test]
    fn scale_gauge_under_input_scaling() {
        // Scaling all input pointmaps by a constant scales χ and the edge
        // translations by the same constant; σ ratios stay put under the
        // mean-centered log-scale gauge.
        let w = 12;
        let surface = |x: usize, y: usize| {
            Vector3::new(x as f64 * 0.1, y as f64 * 0.1, 1.0 + 0.02 * (x + y) as f64)
        };
        let build = |mult: f64| {
            let pair = PointMapPair {
                view_n: 0,
                view_m: 1,
                points_n: grid_pointmap(w, w, |x, y| surface(x, y) * mult),
                points_m: grid_pointmap(w, w, |x, y| (surface(x, y) + Vector3::new(0.01, 0.0, 0.0)) * mult),
                conf_n: ones(w, w),
                conf_m: ones(w, w),
            };
            let graph = build_graph(vec![pair], 2).unwrap();
            global_align(&graph, &AlignConfig { iters: 30, ..Default::default() }).unwrap()
        };
        let base = build(1.0);
        let scaled = build(3.0);
        assert!((scaled.per_edge[0].scale - base.per_edge[0].scale).abs() < 1e-6);
        for i in 0..w * w * 3 {
            assert!((scaled.chi[0].data[i] - 3.0 * base.chi[0].data[i]).abs() < 1e-6);
        }
        assert!((scaled.per_edge[0].translation - base.per_edge[0].translation * 3.0).norm() < 1e-6);
    }
}
