//! Static 3-d tree for exact nearest-neighbor queries.
//!
//! Median-split construction, cycling the axis per depth. Queries use
//! branch-and-bound with squared distances and only skip a subtree when no
//! point inside it can be strictly closer than the current best, so the
//! returned distance equals the brute-force minimum bit for bit.

#[derive(Debug, Clone)]
struct Node {
    point: [f64; 3],
    axis: usize,
    left: i32,
    right: i32,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    root: i32,
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    /// Builds from a non-empty point set. Panics on an empty slice; callers
    /// validate emptiness at their API boundary.
    pub fn build(points: &[[f64; 3]]) -> KdTree {
        assert!(!points.is_empty(), "kd-tree needs at least one point");
        let mut pts = points.to_vec();
        let mut nodes = Vec::with_capacity(pts.len());
        let n = pts.len();
        let root = Self::split(&mut pts, 0, n, 0, &mut nodes);
        KdTree { nodes, root }
    }

    fn split(
        pts: &mut [[f64; 3]],
        lo: usize,
        hi: usize,
        depth: usize,
        nodes: &mut Vec<Node>,
    ) -> i32 {
        if lo >= hi {
            return -1;
        }
        let axis = depth % 3;
        let mid = (lo + hi) / 2;
        pts[lo..hi].select_nth_unstable_by(mid - lo, |a, b| {
            a[axis].partial_cmp(&b[axis]).expect("finite coordinates")
        });
        let id = nodes.len() as i32;
        nodes.push(Node {
            point: pts[mid],
            axis,
            left: -1,
            right: -1,
        });
        let left = Self::split(pts, lo, mid, depth + 1, nodes);
        let right = Self::split(pts, mid + 1, hi, depth + 1, nodes);
        nodes[id as usize].left = left;
        nodes[id as usize].right = right;
        id
    }

    /// Squared Euclidean distance from `q` to its nearest stored point.
    pub fn nearest_sq(&self, q: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.walk(self.root, q, &mut best);
        best
    }

    fn walk(&self, id: i32, q: [f64; 3], best: &mut f64) {
        if id < 0 {
            return;
        }
        let node = &self.nodes[id as usize];
        let d2 = dist_sq(node.point, q);
        if d2 < *best {
            *best = d2;
        }
        let delta = q[node.axis] - node.point[node.axis];
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.walk(near, q, best);
        if delta * delta < *best {
            self.walk(far, q, best);
        }
    }
}

/// Brute-force reference used by tests and doubling as the oracle for the
/// tree's exactness guarantee.
pub fn nearest_sq_bruteforce(points: &[[f64; 3]], q: [f64; 3]) -> f64 {
    points
        .iter()
        .map(|&p| dist_sq(p, q))
        .fold(f64::INFINITY, f64::min)
}
