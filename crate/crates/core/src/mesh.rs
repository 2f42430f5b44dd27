//! Mesh containers and the normalize / triangulate / quantize pipeline.
//!
//! `RawMesh` carries float vertices and arbitrary n-gon faces straight from
//! disk or a generator. `QuantizedMesh` is the canonical geometric object the
//! rest of the pipeline consumes: integer coordinates on a `Q`-level grid,
//! triangles only, no duplicate vertices or faces.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Float-precision mesh with n-gon faces (n >= 3).
///
/// `quad_ratio` records the fraction of quad faces before any triangulation;
/// it is carried along so it can later serve as a conditioning scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<Vec<u32>>,
    pub quad_ratio: f64,
}

/// Integer-coordinate triangle mesh on a `[0, Q-1]^3` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedMesh {
    pub quant_level: u32,
    pub vertices: Vec<[u32; 3]>,
    pub faces: Vec<[u32; 3]>,
}

/// Faces discarded while triangulating (fewer than 3 distinct corners).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TriangulateReport {
    pub degenerate_triangles_dropped: usize,
}

/// Faces and vertices discarded while quantizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuantizeReport {
    pub vertices_merged: usize,
    pub degenerate_faces_dropped: usize,
    pub duplicate_faces_dropped: usize,
}

impl RawMesh {
    /// Check the structural invariants: indices in range, faces with at
    /// least 3 distinct corners, quad_ratio in [0, 1].
    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let n = self.vertices.len() as u32;
        for (i, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {i} references vertex out of range (vertex count {n})"
                )));
            }
            let mut distinct: Vec<u32> = face.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 3 {
                return Err(Error::InvalidMesh(format!(
                    "face {i} has fewer than 3 distinct vertices"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.quad_ratio) {
            return Err(Error::InvalidMesh(format!(
                "quad_ratio {} outside [0, 1]",
                self.quad_ratio
            )));
        }
        Ok(())
    }

    /// Axis-aligned bounding box as (min, max), or None for an empty mesh.
    pub fn aabb(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        Some((lo, hi))
    }

    /// Sum of triangle areas; n-gons are fanned first.
    pub fn surface_area(&self) -> f64 {
        let mut total = 0.0;
        for face in &self.faces {
            for i in 2..face.len() {
                let a = self.vertices[face[0] as usize];
                let b = self.vertices[face[i - 1] as usize];
                let c = self.vertices[face[i] as usize];
                total += triangle_area(a, b, c);
            }
        }
        total
    }
}

pub fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let cx = u[1] * v[2] - u[2] * v[1];
    let cy = u[2] * v[0] - u[0] * v[2];
    let cz = u[0] * v[1] - u[1] * v[0];
    0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
}

/// Fan-triangulate every n-gon from its first listed vertex. Triangles pass
/// through unchanged; fan triangles with a repeated corner are dropped and
/// counted. `quad_ratio` is preserved from the input.
pub fn triangulate(mesh: &RawMesh) -> (RawMesh, TriangulateReport) {
    let mut faces = Vec::with_capacity(mesh.faces.len());
    let mut report = TriangulateReport::default();
    for face in &mesh.faces {
        for i in 2..face.len() {
            let tri = [face[0], face[i - 1], face[i]];
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                report.degenerate_triangles_dropped += 1;
            } else {
                faces.push(vec![tri[0], tri[1], tri[2]]);
            }
        }
    }
    (
        RawMesh {
            vertices: mesh.vertices.clone(),
            faces,
            quad_ratio: mesh.quad_ratio,
        },
        report,
    )
}

/// Center the bounding box on the origin and scale the longest axis to
/// exactly 1.0, so every coordinate lands in [-0.5, 0.5].
pub fn normalize(mesh: &RawMesh) -> Result<RawMesh> {
    let (lo, hi) = mesh.aabb().ok_or(Error::EmptyMesh)?;
    let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let longest = extent[0].max(extent[1]).max(extent[2]);
    if longest <= 0.0 {
        return Err(Error::InvalidMesh(
            "zero-extent mesh: all vertices identical".into(),
        ));
    }
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let scale = 1.0 / longest;
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| {
            [
                (v[0] - center[0]) * scale,
                (v[1] - center[1]) * scale,
                (v[2] - center[2]) * scale,
            ]
        })
        .collect();
    Ok(RawMesh {
        vertices,
        faces: mesh.faces.clone(),
        quad_ratio: mesh.quad_ratio,
    })
}

const NORMALIZE_TOLERANCE: f64 = 1e-6;

/// Snap a normalized mesh onto the `Q`-level grid.
///
/// Per component `q = clamp(floor((x + 0.5) * Q), 0, Q-1)`. Vertices that
/// land on the same grid point are merged; faces that collapse (repeated
/// vertex) or duplicate an earlier face's vertex set are dropped and counted.
pub fn quantize(mesh: &RawMesh, quant_level: u32) -> Result<(QuantizedMesh, QuantizeReport)> {
    if quant_level < 2 {
        return Err(Error::Config(format!(
            "quantization level must be >= 2, got {quant_level}"
        )));
    }
    mesh.validate()?;
    let q = quant_level as f64;
    let mut report = QuantizeReport::default();

    let quantized_coords: Vec<[u32; 3]> = mesh
        .vertices
        .iter()
        .map(|v| {
            let mut out = [0u32; 3];
            for k in 0..3 {
                let x = v[k];
                if x < -0.5 - NORMALIZE_TOLERANCE || x > 0.5 + NORMALIZE_TOLERANCE {
                    return Err(Error::CoordinateOutOfRange { value: x });
                }
                let bin = ((x + 0.5) * q).floor();
                out[k] = bin.clamp(0.0, q - 1.0) as u32;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    // Merge identical grid points.
    let mut remap = vec![0u32; quantized_coords.len()];
    let mut vertices: Vec<[u32; 3]> = Vec::new();
    let mut seen: HashMap<[u32; 3], u32> = HashMap::new();
    for (i, &p) in quantized_coords.iter().enumerate() {
        match seen.get(&p) {
            Some(&idx) => {
                remap[i] = idx;
                report.vertices_merged += 1;
            }
            None => {
                let idx = vertices.len() as u32;
                seen.insert(p, idx);
                vertices.push(p);
                remap[i] = idx;
            }
        }
    }

    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut face_sets: HashMap<[u32; 3], ()> = HashMap::new();
    for face in &mesh.faces {
        if face.len() != 3 {
            return Err(Error::InvalidMesh(
                "quantize requires a triangulated mesh".into(),
            ));
        }
        let tri = [
            remap[face[0] as usize],
            remap[face[1] as usize],
            remap[face[2] as usize],
        ];
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            report.degenerate_faces_dropped += 1;
            continue;
        }
        let mut key = tri;
        key.sort_unstable();
        if face_sets.insert(key, ()).is_some() {
            report.duplicate_faces_dropped += 1;
            continue;
        }
        faces.push(tri);
    }

    Ok((
        QuantizedMesh {
            quant_level,
            vertices,
            faces,
        },
        report,
    ))
}

/// Map grid coordinates back to bin centers: `x = (q + 0.5)/Q - 0.5`.
pub fn dequantize(mesh: &QuantizedMesh) -> RawMesh {
    let q = mesh.quant_level as f64;
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| {
            [
                (v[0] as f64 + 0.5) / q - 0.5,
                (v[1] as f64 + 0.5) / q - 0.5,
                (v[2] as f64 + 0.5) / q - 0.5,
            ]
        })
        .collect();
    let faces = mesh
        .faces
        .iter()
        .map(|f| vec![f[0], f[1], f[2]])
        .collect();
    RawMesh {
        vertices,
        faces,
        quad_ratio: mesh.quad_ratio(),
    }
}

impl QuantizedMesh {
    /// Quantized meshes are always triangles; the quad ratio of the source
    /// mesh is not stored here.
    pub fn quad_ratio(&self) -> f64 {
        0.0
    }

    /// Check the structural invariants of the quantized representation.
    pub fn validate(&self) -> Result<()> {
        let q = self.quant_level;
        let mut seen_v = HashMap::new();
        for (i, v) in self.vertices.iter().enumerate() {
            if v.iter().any(|&c| c >= q) {
                return Err(Error::InvalidMesh(format!(
                    "vertex {i} outside [0, {}]",
                    q - 1
                )));
            }
            if seen_v.insert(*v, i).is_some() {
                return Err(Error::InvalidMesh(format!("duplicate vertex {i}")));
            }
        }
        let n = self.vertices.len() as u32;
        let mut seen_f = HashMap::new();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh(format!("face {i} index out of range")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {i} repeats a vertex")));
            }
            let mut key = *f;
            key.sort_unstable();
            if seen_f.insert(key, i).is_some() {
                return Err(Error::InvalidMesh(format!("duplicate face {i}")));
            }
        }
        Ok(())
    }
}
