//! Procedural mesh families covering face counts from ~12 up past 4096.
//!
//! Generated meshes stand in for a real dataset: boxes, cylinders,
//! subdivided icospheres, extruded polygons, and box clusters, with
//! randomized dimensions and rotations. Output is deterministic for a fixed
//! (seed, spec) pair and already triangulated, with `quad_ratio` recording
//! the face mix before triangulation.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::{triangulate, RawMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Box,
    Cylinder,
    Icosphere,
    ExtrudedPolygon,
    UnionOfBoxes,
    Torus,
}

/// Ranges the generator draws from. Ranges are inclusive on both ends.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub families: Vec<Family>,
    pub cylinder_segments: (u32, u32),
    pub icosphere_subdiv: (u32, u32),
    pub polygon_sides: (u32, u32),
    pub union_boxes: (u32, u32),
    pub torus_major: (u32, u32),
    pub torus_minor: (u32, u32),
    pub rotate: bool,
    /// Per-axis scale multiplier range applied before rotation.
    pub scale_range: (f64, f64),
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            families: vec![
                Family::Box,
                Family::Cylinder,
                Family::Icosphere,
                Family::ExtrudedPolygon,
                Family::UnionOfBoxes,
                Family::Torus,
            ],
            cylinder_segments: (3, 48),
            icosphere_subdiv: (0, 3),
            polygon_sides: (3, 24),
            union_boxes: (2, 10),
            torus_major: (8, 64),
            torus_minor: (6, 32),
            rotate: true,
            scale_range: (0.4, 1.0),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (u32, u32)) -> u32 {
    if range.0 >= range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

/// Build one mesh. The same (seed, spec) always produces bit-identical
/// output; the returned mesh is triangles-only with quad_ratio from the
/// pre-triangulation face mix.
pub fn gen_procedural(seed: u64, spec: &GenSpec) -> RawMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = spec.families[rng.gen_range(0..spec.families.len())];
    let mut mesh = match family {
        Family::Box => box_mesh([1.0, 1.0, 1.0]),
        Family::Cylinder => cylinder_mesh(draw(&mut rng, spec.cylinder_segments).max(3)),
        Family::Icosphere => icosphere_mesh(draw(&mut rng, spec.icosphere_subdiv)),
        Family::ExtrudedPolygon => {
            let sides = draw(&mut rng, spec.polygon_sides).max(3);
            extruded_polygon_mesh(sides, &mut rng)
        }
        Family::UnionOfBoxes => {
            let count = draw(&mut rng, spec.union_boxes).max(1);
            union_of_boxes_mesh(count, &mut rng)
        }
        Family::Torus => {
            let major = draw(&mut rng, spec.torus_major).max(3);
            let minor = draw(&mut rng, spec.torus_minor).max(3);
            torus_mesh(major, minor)
        }
    };

    let (lo, hi) = spec.scale_range;
    let scale = [
        rng.gen_range(lo..=hi),
        rng.gen_range(lo..=hi),
        rng.gen_range(lo..=hi),
    ];
    for v in &mut mesh.vertices {
        for k in 0..3 {
            v[k] *= scale[k];
        }
    }
    if spec.rotate {
        let rot = random_rotation(&mut rng);
        for v in &mut mesh.vertices {
            *v = mat_mul_vec(&rot, *v);
        }
    }

    let quad_ratio = quad_fraction(&mesh);
    let (mut tri, _) = triangulate(&mesh);
    tri.quad_ratio = quad_ratio;
    tri
}

fn quad_fraction(mesh: &RawMesh) -> f64 {
    if mesh.faces.is_empty() {
        return 0.0;
    }
    let quads = mesh.faces.iter().filter(|f| f.len() == 4).count();
    quads as f64 / mesh.faces.len() as f64
}

/// Axis-aligned box of the given full extents, centered at the origin:
/// 8 vertices, 6 quads.
pub fn box_mesh(extent: [f64; 3]) -> RawMesh {
    box_at([0.0; 3], [extent[0] * 0.5, extent[1] * 0.5, extent[2] * 0.5])
}

fn box_at(center: [f64; 3], half: [f64; 3]) -> RawMesh {
    let mut vertices = Vec::with_capacity(8);
    for &z in &[-1.0, 1.0] {
        for &y in &[-1.0, 1.0] {
            for &x in &[-1.0, 1.0] {
                vertices.push([
                    center[0] + x * half[0],
                    center[1] + y * half[1],
                    center[2] + z * half[2],
                ]);
            }
        }
    }
    // Outward-facing quads; winding is CCW seen from outside.
    let faces = vec![
        vec![0, 2, 3, 1], // -z
        vec![4, 5, 7, 6], // +z
        vec![0, 1, 5, 4], // -y
        vec![2, 6, 7, 3], // +y
        vec![0, 4, 6, 2], // -x
        vec![1, 3, 7, 5], // +x
    ];
    RawMesh {
        vertices,
        faces,
        quad_ratio: 1.0,
    }
}

/// Unit-height cylinder around the z axis: n side quads plus two n-gon caps.
pub fn cylinder_mesh(segments: u32) -> RawMesh {
    let n = segments as usize;
    let mut vertices = Vec::with_capacity(2 * n);
    for &z in &[-0.5, 0.5] {
        for i in 0..n {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            vertices.push([0.5 * a.cos(), 0.5 * a.sin(), z]);
        }
    }
    let mut faces: Vec<Vec<u32>> = Vec::with_capacity(n + 2);
    for i in 0..n {
        let j = (i + 1) % n;
        faces.push(vec![
            i as u32,
            j as u32,
            (n + j) as u32,
            (n + i) as u32,
        ]);
    }
    faces.push((0..n as u32).rev().collect()); // bottom cap, outward -z
    faces.push((n as u32..2 * n as u32).collect()); // top cap, outward +z
    RawMesh {
        vertices,
        faces,
        quad_ratio: 0.0, // recomputed by callers that care
    }
}

/// Icosahedron subdivided `subdiv` times and projected to the unit sphere:
/// 20 * 4^subdiv triangles.
pub fn icosphere_mesh(subdiv: u32) -> RawMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in &mut vertices {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        for k in 0..3 {
            v[k] /= norm;
        }
    }
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdiv {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, vs: &mut Vec<[f64; 3]>| -> u32 {
            let key = (a.min(b), a.max(b));
            if let Some(&idx) = midpoints.get(&key) {
                return idx;
            }
            let pa = vs[a as usize];
            let pb = vs[b as usize];
            let mut m = [
                0.5 * (pa[0] + pb[0]),
                0.5 * (pa[1] + pb[1]),
                0.5 * (pa[2] + pb[2]),
            ];
            let norm = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            for k in 0..3 {
                m[k] /= norm;
            }
            let idx = vs.len() as u32;
            vs.push(m);
            midpoints.insert(key, idx);
            idx
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }

    RawMesh {
        vertices,
        faces: faces.iter().map(|f| f.to_vec()).collect(),
        quad_ratio: 0.0,
    }
}

/// Star-shaped polygon with random spoke radii, extruded along z:
/// two n-gon caps plus n side quads.
pub fn extruded_polygon_mesh(sides: u32, rng: &mut ChaCha8Rng) -> RawMesh {
    let n = sides as usize;
    let mut ring: Vec<[f64; 2]> = Vec::with_capacity(n);
    for i in 0..n {
        let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        let r = rng.gen_range(0.25..=0.5);
        ring.push([r * a.cos(), r * a.sin()]);
    }
    let height = rng.gen_range(0.3..=1.0);
    let mut vertices = Vec::with_capacity(2 * n);
    for &z in &[-0.5 * height, 0.5 * height] {
        for p in &ring {
            vertices.push([p[0], p[1], z]);
        }
    }
    let mut faces: Vec<Vec<u32>> = Vec::with_capacity(n + 2);
    for i in 0..n {
        let j = (i + 1) % n;
        faces.push(vec![
            i as u32,
            j as u32,
            (n + j) as u32,
            (n + i) as u32,
        ]);
    }
    faces.push((0..n as u32).rev().collect());
    faces.push((n as u32..2 * n as u32).collect());
    RawMesh {
        vertices,
        faces,
        quad_ratio: 0.0,
    }
}

/// Torus around the z axis: a major x minor grid of quads (so 2*major*minor
/// triangles once triangulated). Major radius 0.35, tube radius 0.12.
pub fn torus_mesh(major: u32, minor: u32) -> RawMesh {
    const R: f64 = 0.35;
    const TUBE: f64 = 0.12;
    let (mm, nn) = (major as usize, minor as usize);
    let mut vertices = Vec::with_capacity(mm * nn);
    for i in 0..mm {
        let u = 2.0 * std::f64::consts::PI * i as f64 / mm as f64;
        for j in 0..nn {
            let v = 2.0 * std::f64::consts::PI * j as f64 / nn as f64;
            let ring = R + TUBE * v.cos();
            vertices.push([ring * u.cos(), ring * u.sin(), TUBE * v.sin()]);
        }
    }
    let at = |i: usize, j: usize| ((i % mm) * nn + (j % nn)) as u32;
    let mut faces: Vec<Vec<u32>> = Vec::with_capacity(mm * nn);
    for i in 0..mm {
        for j in 0..nn {
            // Counterclockwise in (u, v) = outward-facing winding.
            faces.push(vec![at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)]);
        }
    }
    RawMesh {
        vertices,
        faces,
        quad_ratio: 1.0,
    }
}

/// Overlapping axis-aligned boxes merged into one face list (a triangle
/// soup, not a boolean union).
pub fn union_of_boxes_mesh(count: u32, rng: &mut ChaCha8Rng) -> RawMesh {
    let mut vertices = Vec::new();
    let mut faces: Vec<Vec<u32>> = Vec::new();
    for _ in 0..count {
        let center = [
            rng.gen_range(-0.3..=0.3),
            rng.gen_range(-0.3..=0.3),
            rng.gen_range(-0.3..=0.3),
        ];
        let half = [
            rng.gen_range(0.05..=0.25),
            rng.gen_range(0.05..=0.25),
            rng.gen_range(0.05..=0.25),
        ];
        let b = box_at(center, half);
        let base = vertices.len() as u32;
        vertices.extend(b.vertices);
        faces.extend(
            b.faces
                .iter()
                .map(|f| f.iter().map(|&i| i + base).collect::<Vec<_>>()),
        );
    }
    RawMesh {
        vertices,
        faces,
        quad_ratio: 1.0,
    }
}

/// Uniform random rotation via a normalized random quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for c in &mut q {
            *c = rng.gen_range(-1.0..=1.0);
        }
        let n2: f64 = q.iter().map(|c| c * c).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            for c in &mut q {
                *c /= n;
            }
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn mat_mul_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_has_8_vertices_12_triangles_all_quads() {
        let spec = GenSpec {
            families: vec![Family::Box],
            ..GenSpec::default()
        };
        let mesh = gen_procedural(7, &spec);
        assert_eq!(mesh.vertices.len(), 8);
        assert_eq!(mesh.faces.len(), 12);
        assert!(mesh.faces.iter().all(|f| f.len() == 3));
        assert_eq!(mesh.quad_ratio, 1.0);
    }

    #[test]
    fn icosphere_face_counts_follow_subdivision() {
        assert_eq!(icosphere_mesh(0).faces.len(), 20);
        assert_eq!(icosphere_mesh(1).faces.len(), 80);
        assert_eq!(icosphere_mesh(2).faces.len(), 320);
        assert_eq!(icosphere_mesh(4).faces.len(), 5120);
    }

    #[test]
    fn icosphere_vertices_lie_on_unit_sphere() {
        let mesh = icosphere_mesh(2);
        for v in &mesh.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
        // closed sphere: V - E + F = 2 with E = 3F/2
        let f = mesh.faces.len();
        assert_eq!(mesh.vertices.len(), 2 + f / 2);
    }

    #[test]
    fn cylinder_face_count_and_quad_ratio() {
        let mesh = cylinder_mesh(12);
        assert_eq!(mesh.faces.len(), 14); // 12 quads + 2 caps
        let spec = GenSpec {
            families: vec![Family::Cylinder],
            cylinder_segments: (12, 12),
            ..GenSpec::default()
        };
        let tri = gen_procedural(3, &spec);
        assert_eq!(tri.faces.len(), 4 * 12 - 4);
        assert!((tri.quad_ratio - 12.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn torus_is_a_closed_quad_grid() {
        let mesh = torus_mesh(64, 32);
        assert_eq!(mesh.vertices.len(), 64 * 32);
        assert_eq!(mesh.faces.len(), 64 * 32);
        assert!(mesh.faces.iter().all(|f| f.len() == 4));
        mesh.validate().unwrap();
        let (tri, _) = triangulate(&mesh);
        assert_eq!(tri.faces.len(), 2 * 64 * 32); // 4096
        // Genus-1 surface: V - E + F = 0 with E = 2F for a pure quad grid.
        let v = mesh.vertices.len() as i64;
        let f = mesh.faces.len() as i64;
        assert_eq!(v - 2 * f + f, 0);
        // Everything stays inside the unit cube centred on the origin.
        for p in &tri.vertices {
            for c in p {
                assert!(c.abs() <= 0.5);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = GenSpec::default();
        for seed in [0u64, 1, 42, 999] {
            let a = gen_procedural(seed, &spec);
            let b = gen_procedural(seed, &spec);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn generated_meshes_validate() {
        let spec = GenSpec::default();
        for seed in 0..50 {
            gen_procedural(seed, &spec).validate().unwrap();
        }
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = GenSpec::default();
        let text = toml::to_string(&spec).unwrap();
        let back: GenSpec = toml::from_str(&text).unwrap();
        assert_eq!(back.families, spec.families);
        assert_eq!(back.scale_range, spec.scale_range);
    }
}
