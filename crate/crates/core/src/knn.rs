//! Exact k-nearest-neighbour search over 3D points.
//!
//! Neighbours are ordered by (squared distance, index), so equidistant
//! points resolve to the lower index. A point is never its own neighbour.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Clone, Copy, Debug)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        self.dist2.total_cmp(&o.dist2).then(self.index.cmp(&o.index))
    }
}

enum Node {
    Leaf(Vec<usize>),
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

const LEAF_SIZE: usize = 8;

pub struct KdTree<'a> {
    points: &'a [Vec3],
    root: Node,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let root = build(points, &mut idx);
        KdTree { points, root }
    }

    /// The `k` nearest points to `points[query]`, excluding itself.
    pub fn nearest(&self, query: usize, k: usize) -> Vec<usize> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, query, k, &mut heap);
        let mut out = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| c.index).collect()
    }

    fn search(&self, node: &Node, query: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let q = self.points[query];
        match node {
            Node::Leaf(items) => {
                for &i in items {
                    if i == query {
                        continue;
                    }
                    let p = self.points[i];
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    let c = Candidate {
                        dist2: d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, heap);
                // Equal distances must still be visited for the index tie-break.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

fn build(points: &[Vec3], idx: &mut [usize]) -> Node {
    if idx.len() <= LEAF_SIZE {
        return Node::Leaf(idx.to_vec());
    }
    let axis = (0..3)
        .max_by(|&a, &b| spread(points, idx, a).total_cmp(&spread(points, idx, b)))
        .unwrap();
    idx.sort_by(|&i, &j| points[i][axis].total_cmp(&points[j][axis]).then(i.cmp(&j)));
    let mid = idx.len() / 2;
    let value = points[idx[mid - 1]][axis];
    let (l, r) = idx.split_at_mut(mid);
    Node::Split {
        axis,
        value,
        left: Box::new(build(points, l)),
        right: Box::new(build(points, r)),
    }
}

fn spread(points: &[Vec3], idx: &[usize], axis: usize) -> f64 {
    let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
        (lo.min(points[i][axis]), hi.max(points[i][axis]))
    });
    hi - lo
}

/// Neighbour lists for every point.
pub fn knn_all(points: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Validation("k_neighbors must be at least 1".into()));
    }
    if k >= points.len() {
        return Err(Error::Validation(format!(
            "k_neighbors = {k} needs more than {k} gaussians, cloud has {}",
            points.len()
        )));
    }
    let tree = KdTree::new(points);
    Ok((0..points.len()).map(|i| tree.nearest(i, k)).collect())
}
