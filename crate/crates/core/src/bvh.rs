//! Axis-aligned BVH over triangles with any-hit ray queries, plus the 20
//! icosahedron-face directions used for visibility filtering.
//!
//! Boxes are padded by a tiny margin so the traversal is strictly
//! conservative: a ray that hits a triangle always reaches its leaf, and
//! the per-triangle intersection test gives the same answer as a plain
//! loop over all triangles.

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy)]
pub struct Triangle {
    pub a: Vec3,
    pub b: Vec3,
    pub c: Vec3,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

const DET_EPS: f64 = 1e-14;
const T_MIN: f64 = 1e-12;

/// Watertight-enough Möller-Trumbore: returns the ray parameter of the
/// nearest forward intersection, if any.
pub fn ray_triangle(origin: Vec3, dir: Vec3, tri: &Triangle) -> Option<f64> {
    let e1 = sub(tri.b, tri.a);
    let e2 = sub(tri.c, tri.a);
    let p = cross(dir, e2);
    let det = dot(e1, p);
    if det.abs() < DET_EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = sub(origin, tri.a);
    let u = dot(s, p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(s, e1);
    let v = dot(dir, q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot(e2, q) * inv;
    if t > T_MIN {
        Some(t)
    } else {
        None
    }
}

/// Reference any-hit: plain loop over every triangle.
pub fn any_hit_bruteforce(tris: &[Triangle], origin: Vec3, dir: Vec3) -> bool {
    tris.iter().any(|t| ray_triangle(origin, dir, t).is_some())
}

#[derive(Debug, Clone)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    // leaf: children == None, tris in [start, start+count)
    children: Option<(u32, u32)>,
    start: u32,
    count: u32,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    tris: Vec<Triangle>,
}

const LEAF_SIZE: usize = 4;
const BOX_PAD: f64 = 1e-12;

impl Bvh {
    pub fn build(tris: Vec<Triangle>) -> Bvh {
        let mut bvh = Bvh {
            nodes: Vec::new(),
            tris,
        };
        if bvh.tris.is_empty() {
            return bvh;
        }
        let n = bvh.tris.len();
        bvh.build_node(0, n);
        bvh
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.tris
    }

    fn build_node(&mut self, start: usize, count: usize) -> u32 {
        let (lo, hi) = bounds(&self.tris[start..start + count]);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            lo,
            hi,
            children: None,
            start: start as u32,
            count: count as u32,
        });
        if count <= LEAF_SIZE {
            return idx;
        }
        // split on the widest centroid axis at the median triangle
        let axis = {
            let ext = sub(hi, lo);
            if ext[0] >= ext[1] && ext[0] >= ext[2] {
                0
            } else if ext[1] >= ext[2] {
                1
            } else {
                2
            }
        };
        let slice = &mut self.tris[start..start + count];
        slice.sort_by(|a, b| {
            centroid_axis(a, axis)
                .partial_cmp(&centroid_axis(b, axis))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let half = count / 2;
        let left = self.build_node(start, half);
        let right = self.build_node(start + half, count - half);
        self.nodes[idx as usize].children = Some((left, right));
        idx
    }

    /// Does any triangle intersect the forward ray?
    pub fn any_hit(&self, origin: Vec3, dir: Vec3) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        let inv = [1.0 / dir[0], 1.0 / dir[1], 1.0 / dir[2]];
        let mut stack = vec![0u32];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx as usize];
            if !slab_hit(node.lo, node.hi, origin, inv) {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    stack.push(l);
                    stack.push(r);
                }
                None => {
                    let s = node.start as usize;
                    let e = s + node.count as usize;
                    for tri in &self.tris[s..e] {
                        if ray_triangle(origin, dir, tri).is_some() {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn centroid_axis(t: &Triangle, axis: usize) -> f64 {
    (t.a[axis] + t.b[axis] + t.c[axis]) / 3.0
}

fn bounds(tris: &[Triangle]) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for t in tris {
        for p in [t.a, t.b, t.c] {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    for k in 0..3 {
        let pad = BOX_PAD + 1e-12 * (hi[k] - lo[k]).abs();
        lo[k] -= pad;
        hi[k] += pad;
    }
    (lo, hi)
}

fn slab_hit(lo: Vec3, hi: Vec3, origin: Vec3, inv_dir: Vec3) -> bool {
    let mut tmin = 0.0f64;
    let mut tmax = f64::INFINITY;
    for k in 0..3 {
        let t1 = (lo[k] - origin[k]) * inv_dir[k];
        let t2 = (hi[k] - origin[k]) * inv_dir[k];
        // f64::min/max drop NaNs (0 * inf), which only widens the slab
        tmin = tmin.max(t1.min(t2));
        tmax = tmax.min(t1.max(t2));
    }
    tmin <= tmax
}

/// Face normals of a canonical regular icosahedron (normalized face
/// centroids), the 20 view directions for visibility filtering.
pub fn icosahedron_directions() -> [Vec3; 20] {
    let ico = crate::procgen::icosphere_mesh(0);
    let mut dirs = [[0.0; 3]; 20];
    for (i, f) in ico.faces.iter().enumerate() {
        let mut c = [0.0f64; 3];
        for &vi in f {
            for k in 0..3 {
                c[k] += ico.vertices[vi as usize][k] / 3.0;
            }
        }
        let n = dot(c, c).sqrt();
        for k in 0..3 {
            dirs[i][k] = c[k] / n;
        }
    }
    dirs
}

/// Triangle list of a triangulated mesh, for BVH construction.
pub fn mesh_triangles(mesh: &crate::mesh::RawMesh) -> Vec<Triangle> {
    mesh.faces
        .iter()
        .filter(|f| f.len() == 3)
        .map(|f| Triangle {
            a: mesh.vertices[f[0] as usize],
            b: mesh.vertices[f[1] as usize],
            c: mesh.vertices[f[2] as usize],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ray_hits_and_misses_single_triangle() {
        let tri = Triangle {
            a: [0.0, 0.0, 1.0],
            b: [1.0, 0.0, 1.0],
            c: [0.0, 1.0, 1.0],
        };
        let t = ray_triangle([0.2, 0.2, 0.0], [0.0, 0.0, 1.0], &tri).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!(ray_triangle([0.9, 0.9, 0.0], [0.0, 0.0, 1.0], &tri).is_none());
        // behind the origin
        assert!(ray_triangle([0.2, 0.2, 2.0], [0.0, 0.0, 1.0], &tri).is_none());
        // parallel
        assert!(ray_triangle([0.2, 0.2, 0.0], [1.0, 0.0, 0.0], &tri).is_none());
    }

    #[test]
    fn bvh_agrees_with_bruteforce_on_random_rays() {
        let mesh = crate::procgen::icosphere_mesh(2);
        let tris = mesh_triangles(&mesh);
        let bvh = Bvh::build(tris.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let origin = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let mut dir = [
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = dot(dir, dir).sqrt();
            if n < 1e-6 {
                continue;
            }
            for k in 0..3 {
                dir[k] /= n;
            }
            assert_eq!(
                bvh.any_hit(origin, dir),
                any_hit_bruteforce(&tris, origin, dir)
            );
        }
    }

    #[test]
    fn rays_from_inside_sphere_always_hit() {
        let mesh = crate::procgen::icosphere_mesh(1);
        let bvh = Bvh::build(mesh_triangles(&mesh));
        for dir in icosahedron_directions() {
            assert!(bvh.any_hit([0.0, 0.0, 0.0], dir));
        }
        // from well outside, pointing away: no hit
        assert!(!bvh.any_hit([3.0, 0.0, 0.0], [1.0, 0.0, 0.0]));
    }

    #[test]
    fn icosahedron_directions_are_unit_and_spread() {
        let dirs = icosahedron_directions();
        for d in &dirs {
            assert!((dot(*d, *d).sqrt() - 1.0).abs() < 1e-12);
        }
        // opposite faces give opposite normals; all pairwise dots < 1
        for i in 0..20 {
            for j in (i + 1)..20 {
                assert!(dot(dirs[i], dirs[j]) < 0.999);
            }
        }
        // centroid of all directions is ~0 (symmetry)
        let mut c = [0.0f64; 3];
        for d in &dirs {
            for k in 0..3 {
                c[k] += d[k];
            }
        }
        assert!(dot(c, c).sqrt() < 1e-9);
    }
}
