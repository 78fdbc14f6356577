//! Dense reference computations used to check the iterative estimators.

use crate::netcore::linalg::{dot, norm_l2};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        crate::netcore::linalg::matvec(&self.data, x, self.rows, self.cols)
    }

    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        crate::netcore::linalg::matvec_t(&self.data, v, self.rows, self.cols)
    }

    pub fn singular_values(&self) -> Vec<f64> {
        jacobi_singular_values(&self.data, self.rows, self.cols)
    }
}

/// All singular values (descending) by one-sided Jacobi rotations.
///
/// Columns of the narrower orientation of `a` are orthogonalized pairwise
/// until every pair is numerically orthogonal; the singular values are then
/// the column norms.
pub fn jacobi_singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    // vectors to orthogonalize: columns of A, or columns of Aᵀ when wider
    let mut vecs: Vec<Vec<f64>> = if cols <= rows {
        (0..cols)
            .map(|j| (0..rows).map(|i| a[i * cols + j]).collect())
            .collect()
    } else {
        a.chunks_exact(cols).map(|r| r.to_vec()).collect()
    };
    let n = vecs.len();
    let eps = 1e-15;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&vecs[p], &vecs[p]);
                let beta = dot(&vecs[q], &vecs[q]);
                let gamma = dot(&vecs[p], &vecs[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = vecs.split_at_mut(q);
                for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let a = *xp;
                    let b = *xq;
                    *xp = c * a - s * b;
                    *xq = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = vecs.iter().map(|v| norm_l2(v)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let a = [3.0, 0.0, 0.0, 0.0, -1.0, 0.0];
        let sv = jacobi_singular_values(&a, 2, 3);
        assert!((sv[0] - 3.0).abs() < 1e-14);
        assert!((sv[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rank_one_matrix() {
        // u vᵀ with ‖u‖ = 5, ‖v‖ = √2
        let u = [3.0, 4.0];
        let v = [1.0, 1.0];
        let a: Vec<f64> = u.iter().flat_map(|x| v.iter().map(move |y| x * y)).collect();
        let sv = jacobi_singular_values(&a, 2, 2);
        assert!((sv[0] - 5.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(sv[1].abs() < 1e-12);
    }

    #[test]
    fn sum_of_squares_matches_frobenius() {
        let a: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let sv = jacobi_singular_values(&a, 4, 5);
        let fro2: f64 = a.iter().map(|x| x * x).sum();
        let s2: f64 = sv.iter().map(|x| x * x).sum();
        assert!((fro2 - s2).abs() < 1e-10 * fro2);
    }
}
