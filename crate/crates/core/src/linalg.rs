//! Small dense linear-algebra helpers shared by the defenses and the attack.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

pub fn norm(a: ArrayView1<f64>) -> f64 {
    a.dot(&a).sqrt()
}

/// Cosine similarity, `None` when either side has zero norm.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine with the convention used by the server filter and the update graph:
/// a zero vector is maximally dissimilar to everything.
pub fn cosine_or_neg(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    cosine(a, b).unwrap_or(-1.0)
}

pub fn mean_rows(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(m.ncols()))
}

/// Eigenpairs of a real symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Array1<f64>,
    /// Column `j` is the eigenvector for `values[j]`.
    pub vectors: Array2<f64>,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver.
///
/// Output columns are sorted by ascending eigenvalue (stable on ties, so
/// equal eigenvalues keep the rotation order) and each eigenvector is
/// signed so that its largest-magnitude entry is positive, lowest index
/// winning on ties.
/// Flips `v` so its largest-magnitude entry (lowest index on ties) is
/// positive.
pub fn orient(v: &mut Array1<f64>) {
    let mut pivot = 0;
    for k in 1..v.len() {
        if v[k].abs() > v[pivot].abs() {
            pivot = k;
        }
    }
    if !v.is_empty() && v[pivot] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

pub fn symmetric_eigen(a: &Array2<f64>) -> Result<SymmetricEigen> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: a.ncols(),
        });
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);

    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[[p, q]] * m[[p, q]])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                // f64::signum(0.0) is 1.0, so theta == 0 gives a 45 degree rotation.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;

                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Eigen {
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].total_cmp(&m[[j, j]]));

    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).to_owned();
        orient(&mut col);
        vectors.column_mut(dst).assign(&col);
    }
    Ok(SymmetricEigen { values, vectors })
}
