//! Dense least squares with rank detection.

use nalgebra::{DMatrix, DVector};

/// Singular values below `RANK_RTOL * sigma_max` count as zero.
pub const RANK_RTOL: f64 = 1e-10;

/// Pseudo-inverse of a fixed matrix, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    rows: usize,
    cols: usize,
    /// `cols x rows`, row-major.
    pinv: Vec<f64>,
    rank: usize,
}

impl PseudoInverse {
    /// Factorizes a row-major `rows x cols` matrix by SVD.
    pub fn new(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols);
        if rows == 0 || cols == 0 {
            return Self { rows, cols, pinv: vec![0.0; rows * cols], rank: 0 };
        }
        let a = DMatrix::from_row_slice(rows, cols, data);
        let svd = a.svd(true, true);
        let sigma_max = svd.singular_values.max();
        let cutoff = RANK_RTOL * sigma_max;
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested V^T");
        let mut pinv = vec![0.0; cols * rows];
        let mut rank = 0;
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if !(s > cutoff) || s == 0.0 {
                continue;
            }
            rank += 1;
            let inv = 1.0 / s;
            for i in 0..cols {
                let vik = v_t[(k, i)] * inv;
                let row = &mut pinv[i * rows..(i + 1) * rows];
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot += vik * u[(j, k)];
                }
            }
        }
        Self { rows, cols, pinv, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Minimum-norm least-squares solution for `rhs`.
    pub fn apply(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.rows);
        self.pinv
            .chunks(self.rows.max(1))
            .take(self.cols)
            .map(|row| row.iter().zip(rhs).map(|(p, b)| p * b).sum())
            .collect()
    }
}

/// Numerical rank of a row-major matrix.
pub fn rank(rows: usize, cols: usize, data: &[f64]) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let a = DMatrix::from_row_slice(rows, cols, data);
    let sv = a.singular_values();
    let cutoff = RANK_RTOL * sv.max();
    sv.iter().filter(|&&s| s > cutoff && s > 0.0).count()
}

/// `A x - b` for a row-major `A`.
pub fn residual(rows: usize, cols: usize, a: &[f64], x: &[f64], b: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| a[r * cols..(r + 1) * cols].iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - b[r])
        .collect()
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimum-norm solution of a symmetric positive semi-definite system, via
/// eigendecomposition. Eigenvalues below `rtol * lambda_max` are dropped.
pub(crate) fn solve_symmetric_psd(
    n: usize,
    gram: Vec<f64>,
    rtol: f64,
) -> (impl Fn(&[f64]) -> Vec<f64>, usize) {
    let g = DMatrix::from_row_slice(n, n, &gram);
    let eig = g.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
    let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > rtol * lmax && lmax > 0.0).collect();
    let rank = keep.len();
    let vecs = eig.eigenvectors;
    let vals = eig.eigenvalues;
    let solve = move |rhs: &[f64]| {
        let b = DVector::from_column_slice(rhs);
        let mut x = DVector::zeros(n);
        for &k in &keep {
            let col = vecs.column(k);
            let coef = col.dot(&b) / vals[k];
            x.axpy(coef, &col, 1.0);
        }
        x.as_slice().to_vec()
    };
    (solve, rank)
}
