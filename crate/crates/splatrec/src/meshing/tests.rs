use super::*;
use crate::geometry::Quaternion;
use nalgebra::Vector3;

fn constant_depth_view(d: f64, w: usize, h: usize) -> (Image1<f64>, Image1<f64>) {
    (
        Image1::from_fn(w, h, |_, _| [d]),
        Image1::from_fn(w, h, |_, _| [1.0]),
    )
}

#[test]
fn integrate_plane_zero_crossing() {
    let k = Intrinsics::centered(64.0, 32, 32);
    let mut vol = TsdfVolume::centered_cube(Vector3::new(0.0, 0.0, 2.0), 1.0, 32).unwrap();
    let (depth, acc) = constant_depth_view(2.0, 32, 32);
    integrate(&mut vol, &depth, &acc, &Pose::identity(), &k);

    // Along the central column the sign must flip within voxel/2 of z = 2.
    let (x, y) = (16, 16);
    let mut crossing = None;
    for z in 0..vol.dims[2] - 1 {
        let a = vol.tsdf[vol.idx(x, y, z)];
        let b = vol.tsdf[vol.idx(x, y, z + 1)];
        let wa = vol.weight[vol.idx(x, y, z)];
        let wb = vol.weight[vol.idx(x, y, z + 1)];
        if wa > 0.0 && wb > 0.0 && a > 0.0 && b <= 0.0 {
            let za = vol.voxel_center(x, y, z).z;
            let zb = vol.voxel_center(x, y, z + 1).z;
            crossing = Some(za + (zb - za) * a / (a - b));
        }
    }
    let z0 = crossing.expect("no zero crossing");
    assert!(
        (z0 - 2.0).abs() < vol.voxel_size / 2.0,
        "crossing at {z0}, voxel {}",
        vol.voxel_size
    );
}

#[test]
fn integrate_twice_doubles_weights() {
    let k = Intrinsics::centered(64.0, 32, 32);
    let mut vol = TsdfVolume::centered_cube(Vector3::new(0.0, 0.0, 2.0), 1.0, 16).unwrap();
    let (depth, acc) = constant_depth_view(2.0, 32, 32);
    integrate(&mut vol, &depth, &acc, &Pose::identity(), &k);
    let tsdf_once = vol.tsdf.clone();
    let weight_once = vol.weight.clone();
    integrate(&mut vol, &depth, &acc, &Pose::identity(), &k);
    for i in 0..vol.tsdf.len() {
        assert!((vol.tsdf[i] - tsdf_once[i]).abs() < 1e-12);
        assert_eq!(vol.weight[i], 2.0 * weight_once[i]);
    }
}

#[test]
fn integrate_masked_view_is_noop() {
    let k = Intrinsics::centered(64.0, 32, 32);
    let mut vol = TsdfVolume::centered_cube(Vector3::new(0.0, 0.0, 2.0), 1.0, 16).unwrap();
    let depth = Image1::from_fn(32, 32, |_, _| [2.0]);
    let acc = Image1::from_fn(32, 32, |_, _| [0.0]);
    integrate(&mut vol, &depth, &acc, &Pose::identity(), &k);
    assert!(vol.weight.iter().all(|&w| w == 0.0));
    assert!(vol.tsdf.iter().all(|&t| t == 1.0));
}

fn analytic_sphere_volume(res: usize) -> (TsdfVolume<f64>, Vector3<f64>, f64) {
    let center = Vector3::new(0.0, 0.0, 0.0);
    let radius = 0.35;
    let mut vol = TsdfVolume::centered_cube(center, 1.0, res).unwrap();
    for z in 0..res {
        for y in 0..res {
            for x in 0..res {
                let p = vol.voxel_center(x, y, z);
                let sdf = (p - center).norm() - radius;
                let i = vol.idx(x, y, z);
                vol.tsdf[i] = (sdf / vol.truncation).clamp(-1.0, 1.0);
                vol.weight[i] = 1.0;
            }
        }
    }
    (vol, center, radius)
}

#[test]
fn extract_sphere_radial_rms() {
    let (vol, center, radius) = analytic_sphere_volume(64);
    let mesh = extract_mesh(&vol);
    assert!(!mesh.is_empty());
    let mut sq = 0.0;
    for v in &mesh.vertices {
        let e = (v - center).norm() - radius;
        sq += e * e;
    }
    let rms = (sq / mesh.vertices.len() as f64).sqrt();
    assert!(
        rms < vol.voxel_size / 2.0,
        "radial RMS {rms} vs voxel {}",
        vol.voxel_size
    );
}

#[test]
fn extract_all_positive_gives_empty_mesh() {
    let mut vol = TsdfVolume::centered_cube(Vector3::new(0.0, 0.0, 0.0), 1.0, 8).unwrap();
    for w in vol.weight.iter_mut() {
        *w = 1.0;
    }
    let mesh = extract_mesh(&vol);
    assert!(mesh.is_empty());
}

#[test]
fn extract_plane_normals_within_one_degree() {
    // Slanted plane SDF: n·p − d with unit n.
    let n = Vector3::new(0.3, -0.2, 1.0).normalize();
    let mut vol = TsdfVolume::centered_cube(Vector3::new(0.0, 0.0, 0.0), 1.0, 32).unwrap();
    for z in 0..32 {
        for y in 0..32 {
            for x in 0..32 {
                let p = vol.voxel_center(x, y, z);
                let sdf = n.dot(&p);
                let i = vol.idx(x, y, z);
                vol.tsdf[i] = (sdf / vol.truncation).clamp(-1.0, 1.0);
                vol.weight[i] = 1.0;
            }
        }
    }
    let mesh = extract_mesh(&vol);
    assert!(!mesh.is_empty());
    let tol = 1.0_f64.to_radians().cos();
    for tri in &mesh.triangles {
        let [a, b, cc] = tri.map(|i| mesh.vertices[i as usize]);
        let fnorm = (b - a).cross(&(cc - a)).normalize();
        assert!(
            fnorm.dot(&n).abs() > tol,
            "face normal {fnorm:?} vs plane {n:?}"
        );
    }
}

#[test]
fn extract_sphere_interior_edges_are_manifold() {
    let (vol, _, _) = analytic_sphere_volume(32);
    let mesh = extract_mesh(&vol);
    let mut edge_count: std::collections::HashMap<(u32, u32), usize> = Default::default();
    for tri in &mesh.triangles {
        for e in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            let key = (e.0.min(e.1), e.0.max(e.1));
            *edge_count.entry(key).or_default() += 1;
        }
    }
    // A closed surface inside the volume: every edge shared by exactly 2.
    for (&edge, &count) in &edge_count {
        assert_eq!(count, 2, "edge {edge:?} shared by {count}");
    }
}

fn small_plane_mesh() -> TriangleMesh<f64> {
    // Two triangles spanning the square [-0.5, 0.5]² at z = 2.
    TriangleMesh {
        vertices: vec![
            Vector3::new(-0.5, -0.5, 2.0),
            Vector3::new(0.5, -0.5, 2.0),
            Vector3::new(0.5, 0.5, 2.0),
            Vector3::new(-0.5, 0.5, 2.0),
        ],
        triangles: vec![[0, 1, 2], [0, 2, 3]],
        normals: None,
    }
}

#[test]
fn clean_with_permissive_masks_keeps_mesh() {
    let mesh = small_plane_mesh();
    let k = Intrinsics::centered(32.0, 32, 32);
    let masks = vec![Image1::from_fn(32, 32, |_, _| [1.0])];
    let out = clean_with_masks(&mesh, &masks, &[Pose::identity()], &k).unwrap();
    assert_eq!(out.vertices.len(), 4);
    assert_eq!(out.triangles.len(), 2);
}

#[test]
fn clean_with_restrictive_masks_empties_mesh() {
    let mesh = small_plane_mesh();
    let k = Intrinsics::centered(32.0, 32, 32);
    let masks = vec![Image1::from_fn(32, 32, |_, _| [0.0])];
    let out = clean_with_masks(&mesh, &masks, &[Pose::identity()], &k).unwrap();
    assert!(out.triangles.is_empty());
}

#[test]
fn clean_half_plane_mask_matches_projection_oracle() {
    let (vol, _, _) = analytic_sphere_volume(24);
    let mesh = extract_mesh(&vol);
    let k = Intrinsics::centered(32.0, 32, 32);
    let pose = Pose::new(Quaternion::identity(), Vector3::new(0.0, 0.0, 2.0));
    let mask = Image1::from_fn(32, 32, |x, _| [if x < 16 { 1.0 } else { 0.0 }]);
    let out = clean_with_masks(&mesh, &[mask.clone()], &[pose], &k).unwrap();

    // Brute-force per-vertex oracle.
    let mut expected = 0usize;
    for v in &mesh.vertices {
        let cam = pose.transform(v);
        let mut keep = true;
        if cam.z > 1e-8 {
            let px = (k.fx * cam.x / cam.z + k.cx).floor() as i64;
            let py = (k.fy * cam.y / cam.z + k.cy).floor() as i64;
            if (0..32).contains(&px) && (0..32).contains(&py) {
                keep = mask.get(px as usize, py as usize)[0] > 0.5;
            }
        }
        if keep {
            expected += 1;
        }
    }
    assert_eq!(out.vertices.len(), expected);
}

#[test]
fn rasterize_plane_depth_and_normal() {
    let mesh = small_plane_mesh();
    let k = Intrinsics::centered(32.0, 32, 32);
    let (depth, normal) = rasterize_mesh(&mesh, &Pose::identity(), &k);
    // Center pixels see the plane at depth 2 with a camera-facing normal.
    let d = depth.get(16, 16)[0];
    assert!((d - 2.0).abs() < 1e-9, "depth {d}");
    let n = normal.get(16, 16);
    assert!((n[2] - (-1.0)).abs() < 1e-9, "normal {n:?}");
    // A corner pixel outside the square's projection stays empty.
    assert_eq!(depth.get(0, 0)[0], 0.0);
}
