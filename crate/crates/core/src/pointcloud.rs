//! Conditioning point clouds: area-weighted surface sampling, 20-view
//! visibility filtering, farthest-point subsampling, and training-time
//! noise augmentation. Clouds serialize as binary little-endian PLY with
//! (x,y,z,nx,ny,nz) float32 per vertex.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bvh::{icosahedron_directions, mesh_triangles, Bvh, Triangle};
use crate::error::{Error, Result};
use crate::mesh::RawMesh;
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Positions finite; each normal unit length within 1e-4 or exactly 0.
    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.normals.len() {
            return Err(Error::Shape(format!(
                "{} positions vs {} normals",
                self.positions.len(),
                self.normals.len()
            )));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidMesh(format!("non-finite position {i}")));
            }
        }
        for (i, n) in self.normals.iter().enumerate() {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len != 0.0 && (len - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidMesh(format!(
                    "normal {i} has length {len}, expected 1 or 0"
                )));
            }
        }
        Ok(())
    }
}

/// Draw `count` area-weighted uniform samples on a triangulated mesh.
/// Positions are barycentric draws; normals are the face normals.
pub fn sample_surface(mesh: &RawMesh, count: usize, seed: u64) -> Result<PointCloud> {
    let tris = mesh_triangles(mesh);
    if tris.len() != mesh.faces.len() {
        return Err(Error::InvalidMesh(
            "surface sampling requires a triangulated mesh".into(),
        ));
    }
    let mut cumulative = Vec::with_capacity(tris.len());
    let mut total = 0.0f64;
    for t in &tris {
        total += crate::mesh::triangle_area(t.a, t.b, t.c);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::InvalidMesh("mesh has zero surface area".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for _ in 0..count {
        let u = rng.gen::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c <= u).min(tris.len() - 1);
        let t = &tris[idx];
        // uniform barycentric via the sqrt trick
        let r1 = rng.gen::<f64>().sqrt();
        let r2 = rng.gen::<f64>();
        let w = [1.0 - r1, r1 * (1.0 - r2), r1 * r2];
        let mut p = [0.0f64; 3];
        for k in 0..3 {
            p[k] = w[0] * t.a[k] + w[1] * t.b[k] + w[2] * t.c[k];
        }
        positions.push(p);
        normals.push(face_normal(t));
    }
    Ok(PointCloud { positions, normals })
}

fn face_normal(t: &Triangle) -> [f64; 3] {
    let u = [t.b[0] - t.a[0], t.b[1] - t.a[1], t.b[2] - t.a[2]];
    let v = [t.c[0] - t.a[0], t.c[1] - t.a[1], t.c[2] - t.a[2]];
    let mut n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 0.0 {
        for c in &mut n {
            *c /= len;
        }
    }
    n
}

/// Keep each point iff a ray offset by `epsilon` along at least one of the
/// 20 icosahedron directions escapes the mesh without intersection.
pub fn visibility_filter(points: &PointCloud, mesh: &RawMesh, epsilon: f64) -> PointCloud {
    let bvh = Bvh::build(mesh_triangles(mesh));
    let dirs = icosahedron_directions();
    let keep: Vec<bool> = par::map(&points.positions, |p| {
        dirs.iter().any(|d| {
            let origin = [
                p[0] + epsilon * d[0],
                p[1] + epsilon * d[1],
                p[2] + epsilon * d[2],
            ];
            !bvh.any_hit(origin, *d)
        })
    });
    filter_cloud(points, &keep)
}

/// Brute-force reference of `visibility_filter` (no BVH), kept verbatim
/// simple so it can serve as an oracle.
pub fn visibility_filter_bruteforce(
    points: &PointCloud,
    mesh: &RawMesh,
    epsilon: f64,
) -> PointCloud {
    let tris = mesh_triangles(mesh);
    let dirs = icosahedron_directions();
    let keep: Vec<bool> = points
        .positions
        .iter()
        .map(|p| {
            dirs.iter().any(|d| {
                let origin = [
                    p[0] + epsilon * d[0],
                    p[1] + epsilon * d[1],
                    p[2] + epsilon * d[2],
                ];
                !crate::bvh::any_hit_bruteforce(&tris, origin, *d)
            })
        })
        .collect();
    filter_cloud(points, &keep)
}

fn filter_cloud(points: &PointCloud, keep: &[bool]) -> PointCloud {
    let mut out = PointCloud {
        positions: Vec::new(),
        normals: Vec::new(),
    };
    for i in 0..points.len() {
        if keep[i] {
            out.positions.push(points.positions[i]);
            out.normals.push(points.normals[i]);
        }
    }
    out
}

pub const VISIBILITY_EPSILON: f64 = 1e-4;

/// Greedy farthest-point subsampling from a seed-chosen start.
pub fn fps(points: &PointCloud, k: usize, seed: u64) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(Error::InvalidMesh("empty point cloud".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..points.len());
    fps_from(points, k, start)
}

/// FPS with an explicit start index; ties broken by lowest index.
pub fn fps_from(points: &PointCloud, k: usize, start: usize) -> Result<PointCloud> {
    let n = points.len();
    if k > n {
        return Err(Error::Config(format!(
            "farthest-point sample size {k} exceeds point count {n}"
        )));
    }
    if k == 0 || n == 0 {
        return Ok(PointCloud {
            positions: Vec::new(),
            normals: Vec::new(),
        });
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut cur = start;
    chosen.push(cur);
    for _ in 1..k {
        let cp = points.positions[cur];
        let mut best = 0usize;
        let mut best_d2 = f64::NEG_INFINITY;
        for i in 0..n {
            let p = points.positions[i];
            let d2 = (p[0] - cp[0]).powi(2) + (p[1] - cp[1]).powi(2) + (p[2] - cp[2]).powi(2);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        cur = best;
        chosen.push(cur);
    }
    Ok(PointCloud {
        positions: chosen.iter().map(|&i| points.positions[i]).collect(),
        normals: chosen.iter().map(|&i| points.normals[i]).collect(),
    })
}

/// Training-time corruption: one noise scale per cloud drawn uniformly in
/// [0, sigma], Gaussian jitter at that scale, noisy normals renormalized,
/// and with probability `p_zero_normals` every normal zeroed.
pub fn augment(
    points: &PointCloud,
    sigma_pos: f64,
    sigma_normal: f64,
    p_zero_normals: f64,
    seed: u64,
) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_pos = if sigma_pos > 0.0 {
        rng.gen_range(0.0..=sigma_pos)
    } else {
        0.0
    };
    let s_nrm = if sigma_normal > 0.0 {
        rng.gen_range(0.0..=sigma_normal)
    } else {
        0.0
    };
    let zero_normals = rng.gen::<f64>() < p_zero_normals;

    let mut out = points.clone();
    if s_pos > 0.0 {
        let dist = Normal::new(0.0, s_pos).unwrap();
        for p in &mut out.positions {
            for c in p.iter_mut() {
                *c += dist.sample(&mut rng);
            }
        }
    }
    if zero_normals {
        for n in &mut out.normals {
            *n = [0.0; 3];
        }
    } else if s_nrm > 0.0 {
        let dist = Normal::new(0.0, s_nrm).unwrap();
        for n in &mut out.normals {
            if *n == [0.0; 3] {
                continue; // already-dropped normals stay dropped
            }
            for c in n.iter_mut() {
                *c += dist.sample(&mut rng);
            }
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 1e-12 {
                for c in n.iter_mut() {
                    *c /= len;
                }
            } else {
                *n = [0.0; 3];
            }
        }
    }
    out
}

// --- PLY serialization ---------------------------------------------------

const PLY_PROPS: [&str; 6] = ["x", "y", "z", "nx", "ny", "nz"];

pub fn write_ply<W: Write>(mut w: W, cloud: &PointCloud) -> Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        cloud.len()
    )?;
    for p in PLY_PROPS {
        writeln!(w, "property float {p}")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        for &v in &cloud.positions[i] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for &v in &cloud.normals[i] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_ply<R: Read>(r: R) -> Result<PointCloud> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::Ply("missing ply magic".into()));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Ply("unexpected EOF in header".into()));
        }
        let l = line.trim_end();
        if l == "end_header" {
            break;
        }
        let fields: Vec<&str> = l.split_whitespace().collect();
        match fields.as_slice() {
            ["format", fmt, "1.0"] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Ply(format!("unsupported format {fmt}")));
                }
            }
            ["element", "vertex", n] => {
                count = Some(n.parse().map_err(|_| {
                    Error::Ply(format!("bad vertex count {n:?}"))
                })?);
            }
            ["element", other, _] => {
                return Err(Error::Ply(format!("unsupported element {other}")));
            }
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, _] => {
                return Err(Error::Ply(format!("unsupported property type {ty}")));
            }
            ["comment", ..] => {}
            _ => return Err(Error::Ply(format!("unrecognized header line {l:?}"))),
        }
    }
    let count = count.ok_or_else(|| Error::Ply("no vertex element".into()))?;
    if props != PLY_PROPS {
        return Err(Error::Ply(format!(
            "expected properties {PLY_PROPS:?}, got {props:?}"
        )));
    }
    let mut payload = vec![0u8; count * 24];
    reader.read_exact(&mut payload)?;
    let mut cloud = PointCloud {
        positions: Vec::with_capacity(count),
        normals: Vec::with_capacity(count),
    };
    for rec in payload.chunks_exact(24) {
        let f = |i: usize| {
            f32::from_le_bytes([rec[4 * i], rec[4 * i + 1], rec[4 * i + 2], rec[4 * i + 3]])
                as f64
        };
        cloud.positions.push([f(0), f(1), f(2)]);
        cloud.normals.push([f(3), f(4), f(5)]);
    }
    Ok(cloud)
}

pub fn save_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ply(&mut file, cloud)?;
    file.flush()?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    read_ply(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{normalize, triangulate};
    use crate::procgen::{box_mesh, icosphere_mesh};

    fn unit_square() -> RawMesh {
        RawMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            faces: vec![vec![0, 1, 2], vec![0, 2, 3]],
            quad_ratio: 0.0,
        }
    }

    #[test]
    fn surface_samples_split_by_area() {
        let mesh = unit_square();
        let cloud = sample_surface(&mesh, 10_000, 1).unwrap();
        assert_eq!(cloud.len(), 10_000);
        cloud.validate().unwrap();
        // membership in triangle 0 (x >= y half) vs triangle 1
        let in_first = cloud
            .positions
            .iter()
            .filter(|p| p[0] >= p[1])
            .count() as f64;
        // binomial(10^4, 1/2): 3 sigma = 150
        assert!((in_first - 5000.0).abs() < 150.0, "count {in_first}");
        // all samples on the z=0 plane with +z or -z normals
        for (p, n) in cloud.positions.iter().zip(&cloud.normals) {
            assert!(p[2].abs() < 1e-12);
            assert!((n[2].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn surface_sampling_is_deterministic() {
        let mesh = unit_square();
        let a = sample_surface(&mesh, 100, 42).unwrap();
        let b = sample_surface(&mesh, 100, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_surface(&mesh, 100, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_area_mesh_rejected() {
        let mesh = RawMesh {
            vertices: vec![[0.0; 3], [0.0; 3], [0.0; 3]],
            faces: vec![vec![0, 1, 2]],
            quad_ratio: 0.0,
        };
        assert!(sample_surface(&mesh, 10, 0).is_err());
    }

    #[test]
    fn isolated_triangle_fully_visible() {
        let mesh = RawMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![vec![0, 1, 2]],
            quad_ratio: 0.0,
        };
        let cloud = sample_surface(&mesh, 200, 0).unwrap();
        let kept = visibility_filter(&cloud, &mesh, VISIBILITY_EPSILON);
        assert_eq!(kept.len(), 200);
    }

    #[test]
    fn nested_boxes_hide_inner_points() {
        // inner box fully inside the outer: its surface points are occluded
        let (inner, _) = triangulate(&box_mesh([0.4, 0.4, 0.4]));
        let (outer, _) = triangulate(&box_mesh([1.0, 1.0, 1.0]));
        let mut scene = outer.clone();
        let base = scene.vertices.len() as u32;
        scene.vertices.extend(inner.vertices.iter().copied());
        scene
            .faces
            .extend(inner.faces.iter().map(|f| f.iter().map(|&i| i + base).collect::<Vec<_>>()));

        let inner_pts = sample_surface(&inner, 300, 5).unwrap();
        let outer_pts = sample_surface(&outer, 300, 6).unwrap();

        let kept_inner = visibility_filter(&inner_pts, &scene, VISIBILITY_EPSILON);
        assert_eq!(kept_inner.len(), 0, "inner-box points must all be occluded");
        let kept_outer = visibility_filter(&outer_pts, &scene, VISIBILITY_EPSILON);
        assert_eq!(kept_outer.len(), 300, "outer-box points must all be kept");

        // exact agreement with the brute-force oracle on the mixed cloud
        let mut mixed = inner_pts.clone();
        mixed.positions.extend(outer_pts.positions.iter().copied());
        mixed.normals.extend(outer_pts.normals.iter().copied());
        let fast = visibility_filter(&mixed, &scene, VISIBILITY_EPSILON);
        let slow = visibility_filter_bruteforce(&mixed, &scene, VISIBILITY_EPSILON);
        assert_eq!(fast, slow);
    }

    #[test]
    fn fps_collinear_worked_example() {
        let cloud = PointCloud {
            positions: (0..10).map(|i| [i as f64, 0.0, 0.0]).collect(),
            normals: vec![[0.0, 0.0, 1.0]; 10],
        };
        let out = fps_from(&cloud, 2, 0).unwrap();
        assert_eq!(out.positions, vec![[0.0, 0.0, 0.0], [9.0, 0.0, 0.0]]);
        // k = n returns every point
        let all = fps_from(&cloud, 10, 0).unwrap();
        assert_eq!(all.len(), 10);
        assert!(fps_from(&cloud, 11, 0).is_err());
    }

    #[test]
    fn fps_is_permutation_invariant_given_start_point() {
        let mesh = normalize(&icosphere_mesh(2)).unwrap();
        let cloud = sample_surface(&mesh, 300, 9).unwrap();
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.reverse();
        let permuted = PointCloud {
            positions: perm.iter().map(|&i| cloud.positions[i]).collect(),
            normals: perm.iter().map(|&i| cloud.normals[i]).collect(),
        };
        let a = fps_from(&cloud, 32, 0).unwrap();
        let b = fps_from(&permuted, 32, cloud.len() - 1).unwrap();
        let mut pa = a.positions.clone();
        let mut pb = b.positions.clone();
        pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(pa, pb);
    }

    #[test]
    fn augment_identity_and_zeroing_limits() {
        let mesh = unit_square();
        let cloud = sample_surface(&mesh, 50, 3).unwrap();
        let same = augment(&cloud, 0.0, 0.0, 0.0, 7);
        assert_eq!(same, cloud);
        let zeroed = augment(&cloud, 0.0, 0.0, 1.0, 7);
        assert!(zeroed.normals.iter().all(|n| *n == [0.0; 3]));
        assert_eq!(zeroed.positions, cloud.positions);
        // determinism
        assert_eq!(
            augment(&cloud, 0.1, 0.2, 0.5, 11),
            augment(&cloud, 0.1, 0.2, 0.5, 11)
        );
        augment(&cloud, 0.1, 0.2, 0.5, 11).validate().unwrap();
    }

    #[test]
    fn ply_round_trip() {
        let cloud = PointCloud {
            positions: vec![[0.125, -0.5, 0.75], [1.0, 2.0, 3.0]],
            normals: vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
        };
        let mut buf = Vec::new();
        write_ply(&mut buf, &cloud).unwrap();
        let text = String::from_utf8_lossy(&buf[..60]);
        assert!(text.starts_with("ply\nformat binary_little_endian 1.0\n"));
        let back = read_ply(buf.as_slice()).unwrap();
        assert_eq!(back, cloud); // all values exactly representable in f32
        // corrupted header rejected
        let mut bad = buf.clone();
        bad[0] = b'x';
        assert!(read_ply(bad.as_slice()).is_err());
    }
}
