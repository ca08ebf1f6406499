use std::sync::Arc;

use crate::numerics::{Real, SparseMatrix};

/// `D^(-1/2) A D^(-1/2)` over all task nodes. Isolated nodes have empty rows.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: Arc<SparseMatrix>,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.matrix.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Real {
        self.matrix.get(i, j)
    }
}

/// Symmetric normalization of an undirected canonical edge list. With
/// `self_loops`, every node gets a unit self-edge before normalizing.
pub fn normalize_adjacency(n: usize, edges: &[(usize, usize)], self_loops: bool) -> NormalizedAdjacency {
    let mut deg = vec![if self_loops { 1.0 } else { 0.0 }; n];
    for &(i, j) in edges {
        deg[i] += 1.0;
        deg[j] += 1.0;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d: &f64| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut trip = Vec::with_capacity(2 * edges.len() + if self_loops { n } else { 0 });
    for &(i, j) in edges {
        let w = (inv_sqrt[i] * inv_sqrt[j]) as Real;
        trip.push((i, j, w));
        trip.push((j, i, w));
    }
    if self_loops {
        for (v, s) in inv_sqrt.iter().enumerate() {
            trip.push((v, v, (s * s) as Real));
        }
    }
    NormalizedAdjacency { matrix: Arc::new(SparseMatrix::from_triplets(n, n, trip)) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_has_unit_weights() {
        let a = normalize_adjacency(2, &[(0, 1)], false);
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(a.get(1, 0), 1.0);
        assert_eq!(a.get(0, 0), 0.0);
    }

    #[test]
    fn triangle_entries_are_one_half() {
        let a = normalize_adjacency(3, &[(0, 1), (0, 2), (1, 2)], false);
        assert_eq!(a.matrix.nnz(), 6);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((a.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn isolated_node_is_empty() {
        let a = normalize_adjacency(4, &[(0, 1), (1, 2)], false);
        assert_eq!(a.matrix.row_entries(3).count(), 0);
        assert!((0..4).all(|i| a.get(i, 3) == 0.0));
    }

    #[test]
    fn symmetric_and_spectrally_bounded() {
        let edges = vec![(0, 1), (0, 4), (1, 2), (1, 3), (2, 3), (3, 5)];
        let a = normalize_adjacency(6, &edges, false);
        for i in 0..6 {
            for j in 0..6 {
                assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-12);
            }
        }
        // power iteration: ‖Ãᵏx‖ stays bounded by ‖x‖
        let mut x: Vec<Real> = (0..6).map(|i| 1.0 + i as Real).collect();
        let norm0: Real = x.iter().map(|v| v * v).sum::<Real>().sqrt();
        for _ in 0..50 {
            x = a.matrix.mul_dense(&x, 1);
        }
        assert!(x.iter().map(|v| v * v).sum::<Real>().sqrt() <= norm0 * (1.0 + 1e-9));
    }

    #[test]
    fn self_loops_give_gcn_normalization() {
        let a = normalize_adjacency(2, &[(0, 1)], true);
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!((a.get(i, j) - 0.5).abs() < 1e-15);
        }
    }
}
