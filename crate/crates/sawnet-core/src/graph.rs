//! Dynamic neighborhoods over point features.
//!
//! Graphs are recomputed from whatever feature space a layer currently
//! operates in, so "neighbors" drift from spatial to semantic as the
//! network deepens. Selection must be exactly reproducible: squared
//! distances are accumulated coordinate by coordinate in index order (no
//! Gram-matrix shortcut, which rounds differently), and ties are broken
//! toward the lower point index.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, IndexTensor, Tape, Tensor};

/// k nearest neighbors for every point in a batch, plus how decisively the
/// selection won. `margin` is the smallest gap between the kth kept
/// distance and the first excluded one across the whole batch; a tiny
/// margin warns that an input perturbation could flip the neighbor set.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    idx: IndexTensor,
    k: usize,
    margin: f64,
}

impl NeighborGraph {
    pub fn batch(&self) -> usize {
        self.idx.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.idx.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Neighbor indices, shaped `[batch, points, k]` row-major.
    pub fn indices(&self) -> &[usize] {
        self.idx.data()
    }

    pub fn index_tensor(&self) -> &IndexTensor {
        &self.idx
    }
}

fn squared_dist<T: Element>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Exact k nearest neighbors under squared Euclidean distance, self
/// excluded, over `points` shaped `[batch, n, c]`.
pub fn knn<T: Element>(points: &Tensor<T>, k: usize) -> Result<NeighborGraph> {
    if points.rank() != 3 {
        return Err(Error::BadShape {
            op: "knn",
            msg: "expected [batch, points, channels]".into(),
            shape: points.shape().to_vec(),
        });
    }
    let (b, n, c) = (points.shape()[0], points.shape()[1], points.shape()[2]);
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n <= k {
        return Err(Error::Config(format!(
            "k = {k} neighbors requested but clouds have only {n} points (need k < n)"
        )));
    }
    let xd = points.data();

    // Each (batch, point) row is independent; outputs are disjoint slices.
    let rows: Vec<(Vec<usize>, f64)> = (0..b * n)
        .into_par_iter()
        .map(|row| {
            let bi = row / n;
            let i = row % n;
            let base = bi * n * c;
            let pi = &xd[base + i * c..base + (i + 1) * c];
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let pj = &xd[base + j * c..base + (j + 1) * c];
                    (squared_dist(pi, pj).as_f64(), j)
                })
                .collect();
            let by_dist_then_index = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
                a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
            };
            let margin = if cand.len() > k {
                cand.select_nth_unstable_by(k, by_dist_then_index);
                let runner_up = cand[k].0;
                cand[..k].sort_unstable_by(by_dist_then_index);
                runner_up - cand[k - 1].0
            } else {
                cand.sort_unstable_by(by_dist_then_index);
                f64::INFINITY
            };
            (cand[..k].iter().map(|&(_, j)| j).collect(), margin)
        })
        .collect();

    let mut indices = Vec::with_capacity(b * n * k);
    let mut margin = f64::INFINITY;
    for (row_idx, row_margin) in rows {
        indices.extend_from_slice(&row_idx);
        margin = margin.min(row_margin);
    }
    Ok(NeighborGraph {
        idx: IndexTensor::new(&[b, n, k], indices)?,
        k,
        margin,
    })
}

/// Per-edge features `[x_i, x_j - x_i]` shaped `[batch, n, k, 2c]` from
/// point features `[batch, n, c]`.
pub fn edge_features<T: Element>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    graph: &NeighborGraph,
) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::BadShape {
            op: "edge_features",
            msg: "expected [batch, points, channels]".into(),
            shape: x.shape().to_vec(),
        });
    }
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if graph.batch() != b || graph.points() != n {
        return Err(Error::Contract(format!(
            "graph is for {}x{} clouds but features are {b}x{n}",
            graph.batch(),
            graph.points()
        )));
    }
    let neighbors = tape.gather_points(x, graph.index_tensor())?;
    let center = tape.reshape(x, &[b, n, 1, c])?;
    let center = tape.broadcast_axis(&center, 2, graph.k())?;
    let relative = tape.sub(&neighbors, &center)?;
    tape.concat(&[&center, &relative], 3)
}

/// Max over the neighbor axis: `[batch, n, k, c] -> [batch, n, c]`.
pub fn neighbor_max<T: Element>(tape: &mut Tape<T>, edges: &Tensor<T>) -> Result<Tensor<T>> {
    if edges.rank() != 4 {
        return Err(Error::BadShape {
            op: "neighbor_max",
            msg: "expected [batch, points, k, channels]".into(),
            shape: edges.shape().to_vec(),
        });
    }
    let (vals, _) = tape.reduce_max(edges, 2)?;
    Ok(vals)
}

/// Reference selection by fully sorting all candidates. Quadratic and slow;
/// exists so tests can diff the fast path against something obviously
/// correct that uses the same distance arithmetic.
pub fn knn_by_full_sort<T: Element>(points: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    if points.rank() != 3 {
        return Err(Error::BadShape {
            op: "knn_by_full_sort",
            msg: "expected [batch, points, channels]".into(),
            shape: points.shape().to_vec(),
        });
    }
    let (b, n, c) = (points.shape()[0], points.shape()[1], points.shape()[2]);
    if n <= k || k == 0 {
        return Err(Error::Config(format!("need 0 < k < n, got k = {k}, n = {n}")));
    }
    let xd = points.data();
    let mut out = Vec::with_capacity(b * n * k);
    for bi in 0..b {
        let base = bi * n * c;
        for i in 0..n {
            let pi = &xd[base + i * c..base + (i + 1) * c];
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let pj = &xd[base + j * c..base + (j + 1) * c];
                    (squared_dist(pi, pj).as_f64(), j)
                })
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out.extend(cand[..k].iter().map(|&(_, j)| j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn line_cloud() -> Tensor<f64> {
        let mut data = Vec::new();
        for x in [0.0, 1.0, 2.0, 5.0] {
            data.extend_from_slice(&[x, 0.0, 0.0]);
        }
        Tensor::new(&[1, 4, 3], data).unwrap()
    }

    #[test]
    fn nearest_neighbor_on_a_line() {
        let g = knn(&line_cloud(), 1).unwrap();
        assert_eq!(g.indices(), &[1, 0, 1, 2]);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        // point 1 is equidistant from 0 and 2
        let g = knn(&line_cloud(), 1).unwrap();
        assert_eq!(g.indices()[1], 0);
    }

    #[test]
    fn too_few_points_is_a_config_error() {
        let err = knn(&line_cloud(), 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('4'), "{msg}");
    }

    #[test]
    fn margin_measures_runner_up_gap() {
        let mut data = Vec::new();
        for x in [0.0, 1.0, 3.0, 7.0] {
            data.extend_from_slice(&[x, 0.0, 0.0]);
        }
        let pts = Tensor::new(&[1, 4, 3], data).unwrap();
        let g = knn(&pts, 1).unwrap();
        // tightest point is 1: nearest d^2 = 1 (point 0), runner-up 4 (point 3)
        assert_eq!(g.margin(), 3.0);
    }

    #[test]
    fn all_other_points_as_neighbors_has_infinite_margin() {
        let g = knn(&line_cloud(), 3).unwrap();
        assert_eq!(g.margin(), f64::INFINITY);
    }

    #[test]
    fn matches_full_sort_reference() {
        let mut rng = rng_from(9, &[77]);
        for trial in 0..20 {
            let (b, n, c) = (2, 3 + trial % 13 + 5, 1 + trial % 4);
            let data: Vec<f32> = (0..b * n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pts = Tensor::new(&[b, n, c], data).unwrap();
            for k in [1, 2, n - 1] {
                let fast = knn(&pts, k).unwrap();
                let slow = knn_by_full_sort(&pts, k).unwrap();
                assert_eq!(fast.indices(), &slow[..], "trial {trial}, k {k}");
            }
        }
    }

    #[test]
    fn duplicate_points_still_match_reference() {
        let mut rng = rng_from(9, &[78]);
        let n = 12;
        let mut data: Vec<f32> = Vec::new();
        for _ in 0..n {
            // coordinates drawn from a tiny grid force many exact ties
            let x = rng.gen_range(0..3) as f32;
            let y = rng.gen_range(0..3) as f32;
            data.extend_from_slice(&[x, y]);
        }
        let pts = Tensor::new(&[1, n, 2], data).unwrap();
        for k in [1, 3, 5] {
            let fast = knn(&pts, k).unwrap();
            let slow = knn_by_full_sort(&pts, k).unwrap();
            assert_eq!(fast.indices(), &slow[..], "k {k}");
        }
    }

    #[test]
    fn edge_features_center_then_relative() {
        let pts = Tensor::param(&[1, 3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0]).unwrap();
        let g = knn(&pts, 1).unwrap();
        assert_eq!(g.indices(), &[1, 0, 0]);
        let mut tape = Tape::new();
        let ef = edge_features(&mut tape, &pts, &g).unwrap();
        assert_eq!(ef.shape(), &[1, 3, 1, 4]);
        // point 0's edge to point 1: [x_0, x_1 - x_0]
        assert_eq!(&ef.data()[..4], &[0.0, 0.0, 1.0, 0.0]);
        // gradients flow to the points through both halves
        let loss = {
            let sq = tape.mul(&ef, &ef).unwrap();
            tape.sum_all(&sq).unwrap()
        };
        let grads = tape.backward(&loss, &[pts.node().unwrap()]).unwrap();
        assert!(grads.get(pts.node().unwrap()).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn neighbor_max_pools_over_k() {
        let edges = Tensor::param(&[1, 1, 3, 2], vec![1.0, -5.0, 3.0, -1.0, 2.0, -9.0]).unwrap();
        let mut tape = Tape::new();
        let pooled = neighbor_max(&mut tape, &edges).unwrap();
        assert_eq!(pooled.shape(), &[1, 1, 2]);
        assert_eq!(pooled.data(), &[3.0, -1.0]);
    }
}
