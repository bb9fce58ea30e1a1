//! Binary little-endian PLY: the de facto splat layout for surfel
//! checkpoints (readable by external splat viewers) and a plain triangle
//! mesh writer/reader.

use crate::error::{Error, Result};
use crate::geometry::Quaternion;
use crate::meshing::TriangleMesh;
use crate::sh::{SH_COEFFS, SH_TOTAL};
use crate::surfel::{Surfel, SurfelCloud};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const SH_REST: usize = SH_TOTAL - 3; // 45 higher-order coefficients

fn splat_properties() -> Vec<String> {
    let mut props = vec![
        "x".into(),
        "y".into(),
        "z".into(),
        "nx".into(),
        "ny".into(),
        "nz".into(),
        "f_dc_0".into(),
        "f_dc_1".into(),
        "f_dc_2".into(),
    ];
    for i in 0..SH_REST {
        props.push(format!("f_rest_{i}"));
    }
    props.push("opacity".into());
    props.push("scale_0".into());
    props.push("scale_1".into());
    for i in 0..4 {
        props.push(format!("rot_{i}"));
    }
    props
}

/// Writes the cloud in the standard splat-PLY layout: position, frame
/// normal (redundant with the quaternion, for viewers), DC and rest SH
/// coefficients channel-major, raw opacity logit, log scales, quaternion
/// wxyz.
pub fn write_splat_ply(path: &Path, cloud: &SurfelCloud<f32>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in splat_properties() {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;

    let mut emit = |v: f32| w.write_f32::<LittleEndian>(v);
    for s in &cloud.surfels {
        let n = s.normal();
        let vals = [s.center.x, s.center.y, s.center.z, n.x, n.y, n.z];
        for v in vals {
            emit(v).map_err(|e| Error::io(path, e))?;
        }
        for ch in 0..3 {
            emit(s.sh[ch * SH_COEFFS]).map_err(|e| Error::io(path, e))?;
        }
        for ch in 0..3 {
            for k in 1..SH_COEFFS {
                emit(s.sh[ch * SH_COEFFS + k]).map_err(|e| Error::io(path, e))?;
            }
        }
        emit(s.opacity_raw).map_err(|e| Error::io(path, e))?;
        emit(s.log_scale[0]).map_err(|e| Error::io(path, e))?;
        emit(s.log_scale[1]).map_err(|e| Error::io(path, e))?;
        for v in s.rotation.as_array() {
            emit(v).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

struct PlyHeader {
    vertex_count: usize,
    vertex_props: Vec<String>,
    face_count: usize,
    data_start: usize,
}

fn parse_header(path: &Path, data: &[u8]) -> Result<PlyHeader> {
    let mut reader = BufReader::new(data);
    let mut line = String::new();
    let mut offset = 0usize;
    let mut read_line = |reader: &mut BufReader<&[u8]>, line: &mut String| -> Result<usize> {
        line.clear();
        let n = reader
            .read_line(line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                offset: offset as u64,
                detail: "unexpected end of header".into(),
            });
        }
        Ok(n)
    };

    offset += read_line(&mut reader, &mut line)?;
    if line.trim() != "ply" {
        return Err(Error::schema(path, "not a PLY file"));
    }
    offset += read_line(&mut reader, &mut line)?;
    if line.trim() != "format binary_little_endian 1.0" {
        return Err(Error::schema(path, "only binary little-endian 1.0 supported"));
    }
    let mut vertex_count = 0;
    let mut face_count = 0;
    let mut vertex_props = Vec::new();
    let mut in_vertex = false;
    loop {
        offset += read_line(&mut reader, &mut line)?;
        let t = line.trim().to_string();
        if t == "end_header" {
            break;
        }
        if let Some(rest) = t.strip_prefix("element vertex ") {
            vertex_count = rest
                .parse()
                .map_err(|_| Error::schema(path, "bad vertex count"))?;
            in_vertex = true;
        } else if let Some(rest) = t.strip_prefix("element face ") {
            face_count = rest
                .parse()
                .map_err(|_| Error::schema(path, "bad face count"))?;
            in_vertex = false;
        } else if let Some(rest) = t.strip_prefix("property ") {
            if in_vertex {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() == 2 && parts[0] == "float" {
                    vertex_props.push(parts[1].to_string());
                } else if parts[0] != "list" {
                    return Err(Error::schema(path, format!("unsupported property {rest:?}")));
                }
            }
        } else if t.starts_with("comment") || t.starts_with("element") {
            in_vertex = false;
        }
    }
    Ok(PlyHeader {
        vertex_count,
        vertex_props,
        face_count,
        data_start: offset,
    })
}

pub fn read_splat_ply(path: &Path) -> Result<SurfelCloud<f32>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &data)?;
    let expected = splat_properties();
    if header.vertex_props != expected {
        return Err(Error::schema(
            path,
            format!(
                "splat PLY property mismatch: expected {} properties, found {:?}",
                expected.len(),
                header.vertex_props
            ),
        ));
    }
    let stride = expected.len() * 4;
    let need = header.data_start + header.vertex_count * stride;
    if data.len() < need {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: data.len() as u64,
            detail: format!("truncated vertex data: need {need} bytes"),
        });
    }
    let mut cloud = SurfelCloud::default();
    let mut cur = &data[header.data_start..];
    for _ in 0..header.vertex_count {
        let mut vals = vec![0f32; expected.len()];
        cur.read_f32_into::<LittleEndian>(&mut vals)
            .map_err(|e| Error::io(path, e))?;
        let mut sh = vec![0f32; SH_TOTAL];
        for ch in 0..3 {
            sh[ch * SH_COEFFS] = vals[6 + ch];
        }
        for ch in 0..3 {
            for k in 1..SH_COEFFS {
                sh[ch * SH_COEFFS + k] = vals[9 + ch * (SH_COEFFS - 1) + (k - 1)];
            }
        }
        let base = 9 + SH_REST;
        cloud.surfels.push(Surfel {
            center: Vector3::new(vals[0], vals[1], vals[2]),
            rotation: Quaternion {
                w: vals[base + 3],
                x: vals[base + 4],
                y: vals[base + 5],
                z: vals[base + 6],
            },
            log_scale: [vals[base + 1], vals[base + 2]],
            opacity_raw: vals[base],
            sh,
        });
        cloud.source_view.push(0);
    }
    Ok(cloud)
}

/// Mesh PLY: vertices as 3×float32 (plus normals when present), faces as
/// uchar count + 3×int32.
pub fn write_mesh_ply(path: &Path, mesh: &TriangleMesh<f32>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let has_normals = mesh.normals.is_some();
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if has_normals {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    header.push_str(&format!("element face {}\n", mesh.triangles.len()));
    header.push_str("property list uchar int vertex_indices\n");
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for val in [v.x, v.y, v.z] {
            w.write_f32::<LittleEndian>(val).map_err(|e| Error::io(path, e))?;
        }
        if let Some(normals) = &mesh.normals {
            let n = normals[i];
            for val in [n.x, n.y, n.z] {
                w.write_f32::<LittleEndian>(val).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    for tri in &mesh.triangles {
        w.write_u8(3).map_err(|e| Error::io(path, e))?;
        for &idx in tri {
            w.write_i32::<LittleEndian>(idx as i32)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

pub fn read_mesh_ply(path: &Path) -> Result<TriangleMesh<f32>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &data)?;
    let has_normals = header.vertex_props.len() >= 6;
    if header.vertex_props.len() != 3 && header.vertex_props.len() != 6 {
        return Err(Error::schema(path, "mesh PLY must have xyz or xyz+normals"));
    }
    let mut cur = &data[header.data_start..];
    let mut mesh = TriangleMesh::default();
    let mut normals = Vec::new();
    for _ in 0..header.vertex_count {
        let x = cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let y = cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        let z = cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        mesh.vertices.push(Vector3::new(x, y, z));
        if has_normals {
            let nx = cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            let ny = cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            let nz = cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            normals.push(Vector3::new(nx, ny, nz));
        }
    }
    for _ in 0..header.face_count {
        let count = cur.read_u8().map_err(|e| Error::io(path, e))?;
        if count != 3 {
            return Err(Error::schema(path, "only triangle faces supported"));
        }
        let mut tri = [0u32; 3];
        for t in tri.iter_mut() {
            let idx = cur.read_i32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            if idx < 0 || idx as usize >= mesh.vertices.len() {
                return Err(Error::schema(path, "face index out of range"));
            }
            *t = idx as u32;
        }
        mesh.triangles.push(tri);
    }
    if has_normals {
        mesh.normals = Some(normals);
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize) -> SurfelCloud<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cloud = SurfelCloud::default();
        for _ in 0..n {
            let mut sh = vec![0f32; SH_TOTAL];
            for v in sh.iter_mut() {
                *v = rng.gen::<f32>() - 0.5;
            }
            cloud.surfels.push(Surfel {
                center: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                rotation: Quaternion::new(rng.gen(), rng.gen(), rng.gen(), rng.gen::<f32>() + 0.1),
                log_scale: [rng.gen(), rng.gen()],
                opacity_raw: rng.gen(),
                sh,
            });
            cloud.source_view.push(0);
        }
        cloud
    }

    #[test]
    fn splat_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = random_cloud(100);
        let path = dir.path().join("s.ply");
        write_splat_ply(&path, &cloud).unwrap();
        let back = read_splat_ply(&path).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in cloud.surfels.iter().zip(&back.surfels) {
            assert_eq!(a.center, b.center);
            assert_eq!(a.rotation.as_array(), b.rotation.as_array());
            assert_eq!(a.log_scale, b.log_scale);
            assert_eq!(a.opacity_raw, b.opacity_raw);
            assert_eq!(a.sh, b.sh);
        }
    }

    #[test]
    fn splat_vertex_count_matches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ply");
        write_splat_ply(&path, &random_cloud(100)).unwrap();
        let text = std::fs::read(&path).unwrap();
        let header = String::from_utf8_lossy(&text[..200]);
        assert!(header.contains("element vertex 100"));
    }

    #[test]
    fn renamed_property_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ply");
        write_splat_ply(&path, &random_cloud(3)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Corrupt the "opacity" property name in the header.
        let pos = bytes
            .windows(7)
            .position(|w| w == b"opacity")
            .unwrap();
        bytes[pos] = b'q';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_splat_ply(&path), Err(Error::Schema { .. })));
    }

    #[test]
    fn mesh_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut mesh = TriangleMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2]],
            normals: None,
        };
        mesh.compute_vertex_normals();
        let path = dir.path().join("m.ply");
        write_mesh_ply(&path, &mesh).unwrap();
        let back = read_mesh_ply(&path).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.triangles, mesh.triangles);
        assert!(back.normals.is_some());
    }
}
