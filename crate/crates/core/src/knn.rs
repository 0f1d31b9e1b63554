//! Exact k-nearest-neighbor queries over 3D points with a static kd-tree.
//!
//! Ties in distance are broken by the smaller point index, so results do not
//! depend on tree layout.

use nalgebra::Vector3;

use crate::real::Real;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Candidate ordered by (squared distance, index).
#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Candidate {
    fn before(&self, other: &Candidate) -> bool {
        (self.d2, self.index) < (other.d2, other.index)
    }
}

impl KdTree {
    pub fn new<T: Real>(points: &[Vector3<T>]) -> Self {
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x.to_f64(), p.y.to_f64(), p.z.to_f64()]).collect();
        let mut tree = Self { order: (0..points.len()).collect(), points, nodes: Vec::new() };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        if hi[axis] - lo[axis] <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Up to `k` nearest points to `query`, excluding `exclude`, as
    /// `(index, squared distance)` sorted by distance then index.
    pub fn nearest(&self, query: [f64; 3], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut best: Vec<Candidate> = Vec::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, &query, k, exclude, &mut best);
        }
        best.into_iter().map(|c| (c.index, c.d2)).collect()
    }

    fn search(&self, node: usize, q: &[f64; 3], k: usize, exclude: Option<usize>, best: &mut Vec<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let p = &self.points[i];
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    let c = Candidate { d2, index: i };
                    if best.len() == k && !c.before(&best[k - 1]) {
                        continue;
                    }
                    let pos = best.iter().position(|b| c.before(b)).unwrap_or(best.len());
                    best.insert(pos, c);
                    best.truncate(k);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, best);
                // Points equal to the split value may sit on either side.
                if best.len() < k || diff * diff <= best[k - 1].d2 {
                    self.search(far, q, k, exclude, best);
                }
            }
        }
    }
}

/// Fixed neighbor lists used by the rigidity regularizers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NeighborGraph {
    pub k: usize,
    /// `neighbors[i]` holds `min(k, N - 1)` indices, never `i` itself.
    pub neighbors: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn build<T: Real>(points: &[Vector3<T>], k: usize) -> Self {
        let tree = KdTree::new(points);
        let k_eff = k.min(points.len().saturating_sub(1));
        let neighbors = (0..points.len())
            .map(|i| tree.nearest(tree.points[i], k_eff, Some(i)).into_iter().map(|(j, _)| j).collect())
            .collect();
        Self { k, neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Total number of directed edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}
