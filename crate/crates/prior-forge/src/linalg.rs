//! Small dense linear-algebra helpers: Gram-Schmidt orthonormalization and
//! a Jacobi eigensolver for symmetric matrices. Sizes here are tiny (3x3 for
//! pixel covariances, up to the embedding width for Frechet distances), so a
//! dependency-free solver is plenty.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Orthonormalizes the columns of `m` in place via modified Gram-Schmidt.
///
/// Requires rows >= cols and numerically independent columns.
pub fn orthonormalize_columns(m: &mut Array2<f64>) -> Result<()> {
    let (rows, cols) = m.dim();
    if rows < cols {
        return Err(Error::invalid(format!(
            "cannot orthonormalize {cols} columns in {rows} rows"
        )));
    }
    for j in 0..cols {
        for i in 0..j {
            let dot: f64 = (0..rows).map(|r| m[[r, i]] * m[[r, j]]).sum();
            for r in 0..rows {
                m[[r, j]] -= dot * m[[r, i]];
            }
        }
        let norm: f64 = (0..rows).map(|r| m[[r, j]] * m[[r, j]]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::numeric("rank-deficient matrix in Gram-Schmidt"));
        }
        for r in 0..rows {
            m[[r, j]] /= norm;
        }
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns (eigenvalues, eigenvectors) with eigenvectors in columns, so
/// `a = V diag(w) V^T`.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::invalid("symmetric_eigen requires a square matrix"));
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
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
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let w = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    Ok((w, v))
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Square root of a symmetric PSD matrix; negative eigenvalues are clamped to 0.
pub fn psd_sqrt(a: &Array2<f64>) -> Result<Array2<f64>> {
    let (w, v) = symmetric_eigen(a)?;
    let n = a.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let s = w[k].max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += s * v[[i, k]] * v[[j, k]];
            }
        }
    }
    Ok(out)
}

/// Inverse square root of a symmetric PSD matrix with an eigenvalue floor.
pub fn psd_inv_sqrt(a: &Array2<f64>, floor: f64) -> Result<Array2<f64>> {
    let (w, v) = symmetric_eigen(a)?;
    let n = a.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let s = 1.0 / w[k].max(floor).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += s * v[[i, k]] * v[[j, k]];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{gaussian_matrix, rng_from_seed};

    #[test]
    fn gram_schmidt_gives_orthonormal_columns() {
        let mut rng = rng_from_seed(3);
        let m32 = gaussian_matrix(&mut rng, 12, 7);
        let mut m = m32.mapv(|x| x as f64);
        orthonormalize_columns(&mut m).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let dot: f64 = (0..12).map(|r| m[[r, i]] * m[[r, j]]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "col {i} vs {j}: {dot}");
            }
        }
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(1, 4, 9) rotated by a fixed orthogonal matrix
        let d = Array2::from_diag(&Array1::from(vec![1.0, 4.0, 9.0]));
        let mut q = Array2::from_shape_vec(
            (3, 3),
            vec![0.3, -0.2, 0.9, 0.1, 0.8, 0.4, 0.7, 0.5, -0.3],
        )
        .unwrap();
        orthonormalize_columns(&mut q).unwrap();
        let a = q.dot(&d).dot(&q.t());
        let (mut w, v) = symmetric_eigen(&a).unwrap();
        w.as_slice_mut().unwrap().sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((w[0] - 1.0).abs() < 1e-9);
        assert!((w[1] - 4.0).abs() < 1e-9);
        assert!((w[2] - 9.0).abs() < 1e-9);
        // reconstruction
        let (w2, _) = symmetric_eigen(&a).unwrap();
        let mut recon = Array2::<f64>::zeros((3, 3));
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    recon[[i, j]] += w2[k] * v[[i, k]] * v[[j, k]];
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!((recon[[i, j]] - a[[i, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sqrt_of_sqrt_matches() {
        let mut rng = rng_from_seed(11);
        let g = gaussian_matrix(&mut rng, 5, 5).mapv(|x| x as f64);
        let a = g.dot(&g.t()); // PSD
        let s = psd_sqrt(&a).unwrap();
        let back = s.dot(&s);
        for i in 0..5 {
            for j in 0..5 {
                assert!((back[[i, j]] - a[[i, j]]).abs() < 1e-8);
            }
        }
    }
}
