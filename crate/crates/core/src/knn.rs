//! Exact k-nearest-neighbor queries over 3D points with a kd-tree.
//!
//! Neighbors are ordered by `(squared distance, index)`, so equidistant
//! candidates resolve to the lower index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    d2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    order: Vec<u32>,
    root: Node,
}

const LEAF_SIZE: usize = 8;

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let root = Self::build(points, &mut order, 0);
        KdTree { points, order, root }
    }

    fn build(points: &[[f64; 3]], idx: &mut [u32], offset: usize) -> Node {
        if idx.len() <= LEAF_SIZE {
            return Node::Leaf { start: offset, end: offset + idx.len() };
        }
        let axis = (0..3)
            .max_by(|&a, &b| {
                let spread = |ax: usize| {
                    let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        let v = points[i as usize][ax];
                        (lo.min(v), hi.max(v))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b))
            })
            .unwrap();
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a as usize][axis].total_cmp(&points[b as usize][axis]));
        let value = points[idx[mid] as usize][axis];
        let (lo, hi) = idx.split_at_mut(mid);
        Node::Split {
            axis,
            value,
            left: Box::new(Self::build(points, lo, offset)),
            right: Box::new(Self::build(points, hi, offset + mid)),
        }
    }

    /// The `k` nearest points to `points[query]`, excluding itself, nearest first.
    pub fn nearest_excluding(&self, query: usize, k: usize) -> Vec<u32> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(&self.root, query, k, &mut heap);
        }
        let mut out = heap.into_sorted_vec();
        out.truncate(k);
        out.into_iter().map(|c| c.index).collect()
    }

    fn search(&self, node: &Node, query: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let q = self.points[query];
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if i as usize == query {
                        continue;
                    }
                    let p = self.points[i as usize];
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    let c = Candidate { d2, index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, heap);
                // Points on the far side are at least |diff| away; equality
                // must still be explored because of index tie-breaking.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

/// `k` nearest neighbors of every point (self excluded), `k` clamped to `N − 1`.
pub fn k_nearest(points: &[[f64; 3]], k: usize) -> Vec<Vec<u32>> {
    let k = k.min(points.len().saturating_sub(1));
    let tree = KdTree::new(points);
    (0..points.len()).map(|i| tree.nearest_excluding(i, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[[f64; 3]], k: usize) -> Vec<Vec<u32>> {
        let k = k.min(points.len() - 1);
        (0..points.len())
            .map(|i| {
                let mut c: Vec<(f64, u32)> = (0..points.len())
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d2: f64 = (0..3).map(|a| (points[i][a] - points[j][a]).powi(2)).sum();
                        (d2, j as u32)
                    })
                    .collect();
                c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                c.into_iter().take(k).map(|x| x.1).collect()
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_including_lattice_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let random: Vec<[f64; 3]> = (0..300).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        assert_eq!(k_nearest(&random, 20), brute(&random, 20));
        let mut lattice = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..4 {
                    lattice.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        assert_eq!(k_nearest(&lattice, 7), brute(&lattice, 7));
        let dup = vec![[0.5; 3]; 30];
        assert_eq!(k_nearest(&dup, 5), brute(&dup, 5));
    }
}
