//! Deterministic dense linear algebra, seeded randomness, a fixed-op-set
//! gradient engine, optimizers and learning-rate schedules.

pub mod graph;
pub mod matrix;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod svd;

pub use graph::{Graph, GraphBuilder, JacobianEngine, NodeId, Trace};
pub use matrix::Matrix;
pub use optim::{OptimKind, OptimState};
pub use rng::Rng;
pub use schedule::LrSchedule;
pub use svd::{svd_small, Svd};

/// Solves `A x = b` for small square systems by Gaussian elimination with
/// partial pivoting. Used for the per-feature path construction of deep
/// linear ground truths; not intended for large or ill-conditioned systems.
pub fn solve_small(a: &Matrix, b: &[f64]) -> crate::Result<alloc::vec::Vec<f64>> {
    use alloc::vec;
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(crate::shape_err!(
            "solve_small",
            "need square system, got {}x{} with rhs {}",
            a.rows(),
            a.cols(),
            b.len()
        ));
    }
    let mut aug = a.clone();
    let mut x = b.to_vec();
    let mut perm: alloc::vec::Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pivot = col;
        let mut best = libm::fabs(aug.get(perm[col], col));
        for row in col + 1..n {
            let v = libm::fabs(aug.get(perm[row], col));
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best == 0.0 {
            return Err(crate::CoreError::NoConvergence {
                context: "solve_small (singular matrix)",
                residual: 0.0,
            });
        }
        perm.swap(col, pivot);
        let diag = aug.get(perm[col], col);
        for row in col + 1..n {
            let factor = aug.get(perm[row], col) / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                let v = aug.get(perm[col], k);
                *aug.get_mut(perm[row], k) -= factor * v;
            }
            x[perm[row]] -= factor * x[perm[col]];
        }
    }
    let mut out = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = x[perm[col]];
        for k in col + 1..n {
            acc -= aug.get(perm[col], k) * out[k];
        }
        out[col] = acc / aug.get(perm[col], col);
    }
    Ok(out)
}
