//! Graph Fourier analysis of the benign update signals and re-synthesis on
//! an adversarial graph.

use ndarray::{Array1, Array2};

use super::graph::{laplacian, UpdateGraph};
use crate::error::{Error, Result};
use crate::linalg::{orient, symmetric_eigen, SymmetricEigen};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub laplacian: Array2<f64>,
    /// Orthonormal eigenvectors as columns, ascending eigenvalue order.
    pub basis: Array2<f64>,
    pub eigenvalues: Array1<f64>,
    /// Graph Fourier coefficients `U^T X`, `n x d`.
    pub coefficients: Array2<f64>,
}

/// Eigenvalues at or below this count as graph frequency zero.
pub const ZERO_FREQUENCY_TOL: f64 = 1e-9;

/// Eigendecomposition of a graph Laplacian. The zero-frequency eigenspace
/// has one dimension per connected component, so its basis is not unique;
/// it is fixed here as the constant vector followed by the Gram-Schmidt
/// completion of the solver's vectors.
pub fn laplacian_eigen(l: &Array2<f64>) -> Result<SymmetricEigen> {
    let mut eig = symmetric_eigen(l)?;
    let n = l.nrows();
    let m = eig
        .values
        .iter()
        .take_while(|&&v| v <= ZERO_FREQUENCY_TOL)
        .count();
    if m == 0 || n == 0 {
        return Ok(eig);
    }
    let mut basis: Vec<Array1<f64>> = vec![Array1::from_elem(n, 1.0 / (n as f64).sqrt())];
    for k in 0..m {
        if basis.len() == m {
            break;
        }
        let mut w = eig.vectors.column(k).to_owned();
        for b in &basis {
            let p = w.dot(b);
            w.scaled_add(-p, b);
        }
        let len = w.dot(&w).sqrt();
        if len > 1e-8 {
            w.mapv_inplace(|x| x / len);
            orient(&mut w);
            basis.push(w);
        }
    }
    for (k, b) in basis.iter().enumerate() {
        eig.vectors.column_mut(k).assign(b);
    }
    Ok(eig)
}

pub fn gsp_decompose(g: &UpdateGraph) -> Result<SpectralDecomposition> {
    if g.n() < 2 {
        return Err(Error::InvalidInput(
            "spectral decomposition needs n >= 2".into(),
        ));
    }
    let l = laplacian(&g.adjacency);
    let eig = laplacian_eigen(&l)?;
    let coefficients = eig.vectors.t().dot(&g.x);
    Ok(SpectralDecomposition {
        laplacian: l,
        basis: eig.vectors,
        eigenvalues: eig.values,
        coefficients,
    })
}

fn check_adjacency(decomp: &SpectralDecomposition, a_adv: &Array2<f64>) -> Result<()> {
    let n = decomp.basis.nrows();
    if a_adv.dim() != (n, n) {
        return Err(Error::Dimension {
            expected: n,
            got: a_adv.nrows(),
        });
    }
    Ok(())
}

/// Eigenbasis of the adversarial graph's Laplacian.
pub fn adversarial_basis(
    decomp: &SpectralDecomposition,
    a_adv: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_adjacency(decomp, a_adv)?;
    Ok(laplacian_eigen(&laplacian(a_adv))?.vectors)
}

/// Re-expresses the benign spectral coefficients in the eigenbasis of
/// `a_adv`: `X_syn = U' (U^T X)`.
pub fn gsp_synthesize(decomp: &SpectralDecomposition, a_adv: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(adversarial_basis(decomp, a_adv)?.dot(&decomp.coefficients))
}

/// Mean row of [`gsp_synthesize`] without materializing the full matrix.
pub fn synthesize_mean(decomp: &SpectralDecomposition, a_adv: &Array2<f64>) -> Result<Array1<f64>> {
    let basis = adversarial_basis(decomp, a_adv)?;
    let n = basis.nrows() as f64;
    let weights = basis.sum_axis(ndarray::Axis(0)) / n;
    Ok(weights.dot(&decomp.coefficients))
}
