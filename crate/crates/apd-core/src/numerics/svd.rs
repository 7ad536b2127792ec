//! One-sided Jacobi SVD for small dense matrices.
//!
//! The routine orthogonalizes the columns of the (tall) input with plane
//! rotations until all pairwise inner products vanish; column norms are then
//! the singular values. One-sided Jacobi is slow but extremely robust on the
//! small matrices that appear here (component layers, toy weights), and it
//! computes small singular values to high relative accuracy, which the rank
//! spectra reports depend on.

use alloc::vec::Vec;

use super::matrix::{dot, Matrix};
use crate::{CoreError, Result};

/// `m ~= left * diag(sigma) * right^T`, `sigma` sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub sigma: Vec<f64>,
    /// rows(m) x min_dim, orthonormal columns (zero columns for zero sigma).
    pub left: Matrix,
    /// cols(m) x min_dim, orthonormal columns.
    pub right: Matrix,
}

impl Svd {
    /// Reconstructs `left * diag(sigma) * right^T`.
    pub fn reconstruct(&self) -> Matrix {
        let rows = self.left.rows();
        let cols = self.right.rows();
        let mut out = Matrix::zeros(rows, cols);
        for (j, &s) in self.sigma.iter().enumerate() {
            for r in 0..rows {
                let lv = self.left.get(r, j) * s;
                if lv == 0.0 {
                    continue;
                }
                let row = out.row_mut(r);
                for c in 0..cols {
                    row[c] += lv * self.right.get(c, j);
                }
            }
        }
        out
    }
}

/// Relative threshold below which a column pair counts as orthogonal.
const ROTATION_EPS: f64 = 1e-14;

/// Computes the SVD of `m`. `tol` bounds the acceptable reconstruction
/// error relative to `||m||_F`; the sweep cap is `100 * min(rows, cols)`.
pub fn svd_small(m: &Matrix, tol: f64) -> Result<Svd> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 || cols == 0 {
        return Err(crate::shape_err!("svd_small", "empty matrix {rows}x{cols}"));
    }
    if rows >= cols {
        svd_tall(m, tol)
    } else {
        let svd = svd_tall(&m.transpose(), tol)?;
        Ok(Svd {
            sigma: svd.sigma,
            left: svd.right,
            right: svd.left,
        })
    }
}

fn svd_tall(m: &Matrix, tol: f64) -> Result<Svd> {
    let n = m.rows();
    let k = m.cols();
    // Work on the transpose so each column of `m` is a contiguous row.
    let mut w = m.transpose(); // k x n, row p = column p of m
    let mut vt = Matrix::identity(k); // row p = column p of the eventual V

    let max_sweeps = 100 * k.max(1);
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (a, b, g) = {
                    let wp = w.row(p);
                    let wq = w.row(q);
                    (dot(wp, wp), dot(wq, wq), dot(wp, wq))
                };
                if g == 0.0 || g * g <= ROTATION_EPS * ROTATION_EPS * a * b {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * g);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + libm::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + libm::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        let residual = max_off_diag(&w);
        return Err(CoreError::NoConvergence {
            context: "svd_small",
            residual,
        });
    }

    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = (0..k).map(|p| libm::sqrt(dot(w.row(p), w.row(p)))).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut sigma = Vec::with_capacity(k);
    let mut left = Matrix::zeros(n, k);
    let mut right = Matrix::zeros(k, k);
    for (col, &p) in order.iter().enumerate() {
        let s = norms[p];
        sigma.push(s);
        if s > 0.0 {
            let wrow = w.row(p);
            for r in 0..n {
                left.set(r, col, wrow[r] / s);
            }
        }
        let vrow = vt.row(p);
        for r in 0..k {
            right.set(r, col, vrow[r]);
        }
    }

    let svd = Svd { sigma, left, right };
    let norm_m = m.frob_norm();
    if norm_m > 0.0 {
        let err = libm::sqrt(svd.reconstruct().dist_sq(m)?);
        if err > tol.max(1e-12) * norm_m {
            return Err(CoreError::NoConvergence {
                context: "svd_small (reconstruction)",
                residual: err / norm_m,
            });
        }
    }
    Ok(svd)
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let (pr, qr) = if p < q { (p, q) } else { (q, p) };
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(qr * cols);
    let row_p = &mut head[pr * cols..(pr + 1) * cols];
    let row_q = &mut tail[..cols];
    for i in 0..cols {
        let vp = row_p[i];
        let vq = row_q[i];
        row_p[i] = c * vp - s * vq;
        row_q[i] = s * vp + c * vq;
    }
}

fn max_off_diag(w: &Matrix) -> f64 {
    let k = w.rows();
    let mut worst: f64 = 0.0;
    for p in 0..k {
        for q in p + 1..k {
            let g = dot(w.row(p), w.row(q));
            let a = dot(w.row(p), w.row(p));
            let b = dot(w.row(q), w.row(q));
            if a > 0.0 && b > 0.0 {
                worst = worst.max(libm::fabs(g) / libm::sqrt(a * b));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let svd = svd_small(&m, 1e-10).unwrap();
        assert!((svd.sigma[0] - 3.0).abs() < 1e-12);
        assert!((svd.sigma[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_outer_product() {
        // ||u|| = 2, ||v|| = 5 -> sigma_1 = 10
        let u = [2.0, 0.0, 0.0];
        let v = [3.0, 4.0];
        let mut m = Matrix::zeros(3, 2);
        m.add_outer(&u, &v, 1.0).unwrap();
        let svd = svd_small(&m, 1e-10).unwrap();
        assert!((svd.sigma[0] - 10.0).abs() < 1e-10);
        assert!(svd.sigma[1].abs() < 1e-10);
    }

    #[test]
    fn energy_and_orthonormality() {
        let mut rng = Rng::new(33);
        for trial in 0..20 {
            let (r, c) = (3 + trial % 5, 2 + (trial * 7) % 6);
            let mut m = Matrix::zeros(r, c);
            m.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
            let svd = svd_small(&m, 1e-9).unwrap();
            let energy: f64 = svd.sigma.iter().map(|s| s * s).sum();
            assert!(
                (energy - m.frob_norm_sq()).abs() <= 1e-8 * m.frob_norm_sq(),
                "energy mismatch"
            );
            for a in 0..svd.sigma.len() {
                for b in a..svd.sigma.len() {
                    let want = if a == b { 1.0 } else { 0.0 };
                    let lu = dot(&svd.left.column(a), &svd.left.column(b));
                    let rv = dot(&svd.right.column(a), &svd.right.column(b));
                    assert!((lu - want).abs() < 1e-8, "left not orthonormal");
                    assert!((rv - want).abs() < 1e-8, "right not orthonormal");
                }
            }
            // descending order
            for i in 1..svd.sigma.len() {
                assert!(svd.sigma[i - 1] >= svd.sigma[i]);
            }
        }
    }

    #[test]
    fn wide_matrix_reconstructs() {
        let mut rng = Rng::new(5);
        let mut m = Matrix::zeros(3, 7);
        m.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
        let svd = svd_small(&m, 1e-9).unwrap();
        let err = svd.reconstruct().dist_sq(&m).unwrap().sqrt();
        assert!(err < 1e-9 * m.frob_norm());
    }
}
