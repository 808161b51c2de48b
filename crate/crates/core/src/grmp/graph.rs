use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg::cosine_or_neg;

/// Benign updates as graph nodes, joined when their cosine similarity
/// clears `tau_edge`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateGraph {
    /// Node features, one flattened update per row.
    pub x: Array2<f64>,
    /// Symmetric 0/1 adjacency with zero diagonal.
    pub adjacency: Array2<f64>,
    pub tau_edge: f64,
}

impl UpdateGraph {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn edge_count(&self) -> usize {
        let n = self.n();
        (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[[i, j]] != 0.0)
            .count()
    }
}

pub fn build_update_graph(updates: &Array2<f64>, tau_edge: f64) -> Result<UpdateGraph> {
    let n = updates.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "update graph needs at least 2 nodes, got {n}"
        )));
    }
    let mut adjacency = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            if cosine_or_neg(updates.row(i), updates.row(j)) >= tau_edge {
                adjacency[[i, j]] = 1.0;
                adjacency[[j, i]] = 1.0;
            }
        }
    }
    Ok(UpdateGraph {
        x: updates.clone(),
        adjacency,
        tau_edge,
    })
}

/// Combinatorial Laplacian `D - A`.
pub fn laplacian(adjacency: &Array2<f64>) -> Array2<f64> {
    let n = adjacency.nrows();
    let mut l = -adjacency.clone();
    for i in 0..n {
        l[[i, i]] = adjacency.row(i).sum();
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_rows_give_complete_graph() {
        let u = Array2::from_elem((4, 3), 0.3);
        let g = build_update_graph(&u, 0.9).unwrap();
        assert_eq!(g.edge_count(), 6);
        for i in 0..4 {
            assert_eq!(g.adjacency[[i, i]], 0.0);
        }
    }

    #[test]
    fn orthogonal_rows_give_no_edges() {
        let u = Array2::eye(4);
        let g = build_update_graph(&u, 0.5).unwrap();
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn zero_row_is_isolated() {
        let u = array![[1.0, 0.0], [0.0, 0.0], [1.0, 0.1]];
        let g = build_update_graph(&u, -0.5).unwrap();
        assert_eq!(g.adjacency.row(1).sum(), 0.0);
        assert_eq!(g.adjacency[[0, 2]], 1.0);
    }

    #[test]
    fn needs_two_nodes() {
        assert!(build_update_graph(&Array2::ones((1, 3)), 0.1).is_err());
    }

    #[test]
    fn laplacian_of_path() {
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        assert_eq!(
            laplacian(&a),
            array![[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]]
        );
    }
}
