//! Rank-revealing minimum-norm least squares.
//!
//! The multiple-shooting Newton for connection refinement solves wide,
//! rank-deficient linear systems `J Δx = -r` where the solution set is an
//! affine subspace (the connection families are locally two-dimensional).
//! Each step takes the minimum-norm least-squares solution, computed from a
//! QR decomposition with column pivoting: with `A P = Q R`,
//! `R = [R11 R12; 0 0]` and `rank` decided by the pivot ratio, the permuted
//! solution splits as `y1 = R11⁻¹(c1 - R12 y2)` and the norm is minimized by
//! the small SPD system `(I + KᵀK) y2 = Kᵀ R11⁻¹ c1` with `K = R11⁻¹ R12`.
//!
//! An SVD-based kernel dimension check is provided as the independent
//! diagnostic of the converged solutions.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// A diagonal entry of `R` smaller than this ratio times the leading entry
/// ends the numerical rank.
pub const RANK_PIVOT_RATIO: f64 = 1e-10;

/// Minimum-norm least-squares solution together with the numerical rank that
/// produced it.
#[derive(Debug, Clone)]
pub struct MinNormSolution {
    pub x: DVector<f64>,
    pub rank: usize,
}

/// Minimum-norm least-squares solution of `A x = b` with the default pivot
/// ratio.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<MinNormSolution> {
    min_norm_solve_with(a, b, RANK_PIVOT_RATIO)
}

/// Minimum-norm least-squares solution of `A x = b`; the numerical rank is
/// the number of leading diagonal entries of the pivoted `R` that stay above
/// `pivot_ratio` times the first one.
pub fn min_norm_solve_with(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    pivot_ratio: f64,
) -> Result<MinNormSolution> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::InvalidInput(format!(
            "right-hand side length {} does not match {} rows",
            b.len(),
            m
        )));
    }

    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let kmax = m.min(n);

    // Numerical rank from the pivoted diagonal.
    let lead = r[(0, 0)].abs();
    let mut rank = 0;
    while rank < kmax && r[(rank, rank)].abs() > pivot_ratio * lead {
        rank += 1;
    }
    if rank == 0 {
        return Ok(MinNormSolution {
            x: DVector::zeros(n),
            rank: 0,
        });
    }

    // c1 = leading `rank` entries of Qᵀ b.
    let c = qr.q().transpose() * b;
    let c1 = c.rows(0, rank).into_owned();

    let r11 = r.view((0, 0), (rank, rank));
    // y1_0 = R11⁻¹ c1 (basic solution in pivoted coordinates).
    let y1_0 = r11
        .solve_upper_triangular(&c1)
        .ok_or_else(|| Error::NoConvergence {
            what: "min-norm solve",
            detail: "pivoted R11 block is numerically singular".into(),
        })?;

    let mut y = DVector::zeros(n);
    if rank == n {
        y.rows_mut(0, rank).copy_from(&y1_0);
    } else {
        // K = R11⁻¹ R12, one triangular solve per trailing column.
        let r12 = r.view((0, rank), (rank, n - rank)).into_owned();
        let k = r11
            .solve_upper_triangular(&r12)
            .ok_or_else(|| Error::NoConvergence {
                what: "min-norm solve",
                detail: "pivoted R11 block is numerically singular".into(),
            })?;
        // Minimize ‖(y1_0 - K y2, y2)‖ over y2.
        let mut normal = k.transpose() * &k;
        for i in 0..n - rank {
            normal[(i, i)] += 1.0;
        }
        let rhs = k.transpose() * &y1_0;
        let y2 = normal
            .cholesky()
            .ok_or_else(|| Error::NoConvergence {
                what: "min-norm solve",
                detail: "normal matrix I + KᵀK lost positive definiteness".into(),
            })?
            .solve(&rhs);
        let y1 = y1_0 - &k * &y2;
        y.rows_mut(0, rank).copy_from(&y1);
        y.rows_mut(rank, n - rank).copy_from(&y2);
    }

    // Undo the column pivoting (the permutation preserves the norm).
    qr.p().inv_permute_rows(&mut y);
    Ok(MinNormSolution { x: y, rank })
}

/// Kernel dimension of `A` by SVD: the number of singular values below
/// `rel_tol` times the largest one.
pub fn kernel_dimension(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return a.ncols();
    }
    let rank = sv.iter().filter(|&&s| s > rel_tol * smax).count();
    a.ncols() - rank
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    /// Plane rotation acting on coordinates (i, j) of an n-dimensional space.
    fn rot(n: usize, i: usize, j: usize, th: f64) -> DMatrix<f64> {
        let mut g = DMatrix::identity(n, n);
        g[(i, i)] = th.cos();
        g[(j, j)] = th.cos();
        g[(i, j)] = -th.sin();
        g[(j, i)] = th.sin();
        g
    }

    /// A 5×7 rank-3 matrix built from an explicit SVD, so the minimum-norm
    /// least-squares solution `V Σ⁺ Uᵀ b` is available in closed form.
    fn rank3_factors() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let u = rot(5, 0, 1, 0.3) * rot(5, 1, 2, -0.7) * rot(5, 2, 3, 1.1) * rot(5, 3, 4, 0.5);
        let v = rot(7, 0, 4, -0.2) * rot(7, 1, 5, 0.9) * rot(7, 2, 6, 0.4) * rot(7, 3, 4, -1.3);
        let mut sigma = DMatrix::zeros(5, 7);
        sigma[(0, 0)] = 3.0;
        sigma[(1, 1)] = 2.0;
        sigma[(2, 2)] = 1.0;
        (u, sigma, v)
    }

    #[test]
    fn min_norm_solution_matches_the_analytic_pseudoinverse() {
        let (u, sigma, v) = rank3_factors();
        let a = &u * &sigma * v.transpose();
        let b = DVector::from_vec(vec![0.7, -1.3, 2.1, 0.4, -0.9]);

        let mut sigma_pinv = DMatrix::zeros(7, 5);
        sigma_pinv[(0, 0)] = 1.0 / 3.0;
        sigma_pinv[(1, 1)] = 0.5;
        sigma_pinv[(2, 2)] = 1.0;
        let x_exact = &v * sigma_pinv * u.transpose() * &b;

        let sol = min_norm_solve(&a, &b).unwrap();
        assert_eq!(sol.rank, 3);
        assert!(
            (&sol.x - &x_exact).norm() < 1e-12,
            "min-norm solution departs from the analytic one by {:.3e}",
            (&sol.x - &x_exact).norm()
        );
    }

    #[test]
    fn solution_is_orthogonal_to_the_kernel_and_feasible_on_wide_full_rank_systems() {
        // 4×6, full row rank: the system is consistent for every b, and the
        // minimum-norm solution must lie in the row space.
        let a = DMatrix::from_row_slice(
            4,
            6,
            &[
                1.0, 2.0, 0.5, -1.0, 0.0, 3.0, //
                0.0, 1.0, -2.0, 1.5, 2.0, -1.0, //
                2.0, -1.0, 1.0, 0.0, -3.0, 0.5, //
                -1.0, 0.5, 0.0, 2.0, 1.0, 1.0,
            ],
        );
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let sol = min_norm_solve(&a, &b).unwrap();
        assert_eq!(sol.rank, 4);
        assert!((&a * &sol.x - &b).norm() < 1e-12);

        // Minimum norm means x lies in the row space: projecting onto it
        // must reproduce x.
        let gram = &a * a.transpose();
        let w = gram.lu().solve(&(&a * &sol.x)).unwrap();
        let projected = a.transpose() * w;
        assert!((&projected - &sol.x).norm() < 1e-12);
    }

    #[test]
    fn tall_systems_reduce_to_the_unique_least_squares_solution() {
        let a = DMatrix::from_row_slice(
            6,
            3,
            &[
                1.0, 0.5, -1.0, //
                2.0, -1.0, 0.0, //
                0.0, 1.0, 1.5, //
                -1.0, 2.0, 0.5, //
                3.0, 0.0, -2.0, //
                0.5, 1.0, 1.0,
            ],
        );
        let b = DVector::from_vec(vec![1.0, 0.0, -1.0, 2.0, 0.5, -0.5]);
        let sol = min_norm_solve(&a, &b).unwrap();
        assert_eq!(sol.rank, 3);
        let normal = a.transpose() * &a;
        let x_ls = normal.lu().solve(&(a.transpose() * &b)).unwrap();
        assert!((&sol.x - &x_ls).norm() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_rank_zero_and_zero_solution() {
        let a = DMatrix::zeros(3, 5);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let sol = min_norm_solve(&a, &b).unwrap();
        assert_eq!(sol.rank, 0);
        assert_eq!(sol.x, DVector::zeros(5));
    }

    #[test]
    fn kernel_dimension_counts_small_singular_values() {
        let (u, sigma, v) = rank3_factors();
        let a = &u * &sigma * v.transpose();
        assert_eq!(kernel_dimension(&a, 1e-10), 4);

        let full = DMatrix::<f64>::identity(4, 4);
        assert_eq!(kernel_dimension(&full, 1e-10), 0);
        assert_eq!(kernel_dimension(&DMatrix::zeros(3, 5), 1e-10), 5);
    }

    #[test]
    fn pivot_ratio_decides_the_numerical_rank() {
        // One direction is 1e-13 of the leading one: rank-deficient at the
        // default ratio, full rank when the ratio is pushed below it.
        let (u, mut sigma, v) = rank3_factors();
        sigma[(3, 3)] = 3e-13;
        let a = &u * &sigma * v.transpose();
        let b = DVector::from_vec(vec![0.7, -1.3, 2.1, 0.4, -0.9]);
        let strict = min_norm_solve_with(&a, &b, RANK_PIVOT_RATIO).unwrap();
        let loose = min_norm_solve_with(&a, &b, 1e-16).unwrap();
        assert_eq!(strict.rank, 3);
        assert_eq!(loose.rank, 4);
        // The tiny direction amplifies the solution enormously.
        assert!(loose.x.norm() > 1e9 * strict.x.norm());
    }
}
