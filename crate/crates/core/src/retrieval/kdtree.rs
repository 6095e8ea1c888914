//! Exact k-nearest-neighbour search under cosine distance on unit vectors.
//!
//! For unit vectors `1 − a·b = ‖a − b‖² / 2`, so Euclidean splitting planes give valid
//! lower bounds. Leaves evaluate the same [`cosine_distance`] as the brute-force search, so
//! both return identical rankings.

use std::cmp::Ordering;

/// Points per leaf.
const LEAF: usize = 8;

/// Allowance for rounding in the Euclidean bound; pruning is only ever more conservative.
const SLACK: f64 = 1e-6;

/// `1 − a·b`, accumulated in double precision.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    1.0 - a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum::<f64>()
}

/// A ranked search result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Row of the point in the indexed matrix.
    pub row: usize,
    pub id: u64,
    pub distance: f64,
}

fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id))
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<usize>),
    Split {
        dim: usize,
        value: f32,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Kd-tree over the rows of a row-major `n × dim` matrix. Pruning compares cosine distance
/// with half the squared split distance, which needs unit-norm queries and rows of norm at
/// most 1.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<u64>,
    root: Node,
}

impl KdTree {
    pub fn build(data: Vec<f32>, dim: usize, ids: Vec<u64>) -> Self {
        assert!(dim > 0 && data.len() == ids.len() * dim, "matrix shape");
        let rows: Vec<usize> = (0..ids.len()).collect();
        let root = Self::build_node(&data, dim, rows);
        KdTree {
            dim,
            data,
            ids,
            root,
        }
    }

    fn build_node(data: &[f32], dim: usize, mut rows: Vec<usize>) -> Node {
        if rows.len() <= LEAF {
            return Node::Leaf(rows);
        }
        // split on the dimension of largest spread
        let mut best = (0usize, -1f32);
        for d in 0..dim {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &r in &rows {
                let v = data[r * dim + d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        let d = best.0;
        if best.1 <= 0.0 {
            return Node::Leaf(rows);
        }
        rows.sort_by(|&a, &b| data[a * dim + d].total_cmp(&data[b * dim + d]).then(a.cmp(&b)));
        let mid = rows.len() / 2;
        let value = data[rows[mid] * dim + d];
        let right = rows.split_off(mid);
        Node::Split {
            dim: d,
            value,
            left: Box::new(Self::build_node(data, dim, rows)),
            right: Box::new(Self::build_node(data, dim, right)),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    /// The `k` nearest rows accepted by `keep`, nearest first, ties by id.
    pub fn nearest(&self, query: &[f32], k: usize, keep: &dyn Fn(usize) -> bool) -> Vec<Neighbor> {
        assert_eq!(query.len(), self.dim, "query dimension");
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(&self.root, query, k, keep, &mut best);
        }
        best
    }

    fn search(
        &self,
        node: &Node,
        q: &[f32],
        k: usize,
        keep: &dyn Fn(usize) -> bool,
        best: &mut Vec<Neighbor>,
    ) {
        match node {
            Node::Leaf(rows) => {
                for &r in rows {
                    if !keep(r) {
                        continue;
                    }
                    let cand = Neighbor {
                        row: r,
                        id: self.ids[r],
                        distance: cosine_distance(q, self.row(r)),
                    };
                    if best.len() == k && rank(&cand, &best[k - 1]) != Ordering::Less {
                        continue;
                    }
                    let pos = best
                        .binary_search_by(|b| rank(b, &cand))
                        .unwrap_or_else(|p| p);
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = f64::from(q[*dim]) - f64::from(*value);
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, keep, best);
                let bound = diff * diff / 2.0;
                if best.len() < k || bound <= best[k - 1].distance + SLACK {
                    self.search(far, q, k, keep, best);
                }
            }
        }
    }
}

/// Exhaustive reference search with the same ranking rule as [`KdTree::nearest`].
pub fn brute_force_nearest(
    data: &[f32],
    dim: usize,
    ids: &[u64],
    query: &[f32],
    k: usize,
    keep: &dyn Fn(usize) -> bool,
) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = (0..ids.len())
        .filter(|&r| keep(r))
        .map(|r| Neighbor {
            row: r,
            id: ids[r],
            distance: cosine_distance(query, &data[r * dim..(r + 1) * dim]),
        })
        .collect();
    all.sort_by(rank);
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            out.extend(v.iter().map(|x| x / norm));
        }
        out
    }

    #[test]
    fn matches_brute_force_on_random_vectors() {
        let (n, dim) = (200, 16);
        let data = unit_vectors(n, dim, 1);
        let ids: Vec<u64> = (0..n as u64).map(|i| 1000 - i).collect();
        let tree = KdTree::build(data.clone(), dim, ids.clone());
        let queries = unit_vectors(20, dim, 2);
        for q in queries.chunks(dim) {
            let a = tree.nearest(q, 5, &|_| true);
            let b = brute_force_nearest(&data, dim, &ids, q, 5, &|_| true);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn self_query_has_zero_distance_and_ties_go_to_lower_id() {
        let data = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let tree = KdTree::build(data, 2, vec![9, 4, 2]);
        let hits = tree.nearest(&[1.0, 0.0], 3, &|_| true);
        assert_eq!(hits[0].id, 2);
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits[1].id, 9);
        assert_eq!(hits[2].id, 4);
    }

    #[test]
    fn filter_is_respected() {
        let data = unit_vectors(50, 4, 3);
        let ids: Vec<u64> = (0..50).collect();
        let tree = KdTree::build(data, 4, ids);
        let hits = tree.nearest(&[0.5, 0.5, 0.5, 0.5], 50, &|r| r % 3 == 0);
        assert_eq!(hits.len(), 17);
        assert!(hits.iter().all(|h| h.row % 3 == 0));
    }
}
