//! Dense row-major matrices with the handful of operations the rest of the
//! crate needs: products, Kronecker products, and a symmetric eigensolver.
//!
//! Everything is `f64`. Matrices here are small (stalk blocks up to 8x8,
//! Gram matrices up to a few hundred rows), so a cyclic Jacobi sweep is both
//! simple and accurate enough; no sparse or blocked kernels are provided.

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::contract(format!(
                    "row {} has length {}, expected {}",
                    i,
                    row.len(),
                    c
                )));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Matrix {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] += v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Standard matrix product.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
                for j in 0..b.cols {
                    out_row[j] += aik * b_row[j];
                }
            }
        }
        Ok(out)
    }

    /// Kronecker product: block (i, j) of the result equals `self[i,j] * b`.
    pub fn kron(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows * b.rows, self.cols * b.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a_ij = self.data[i * self.cols + j];
                if a_ij == 0.0 {
                    continue;
                }
                for p in 0..b.rows {
                    for q in 0..b.cols {
                        out.data[(i * b.rows + p) * out.cols + (j * b.cols + q)] =
                            a_ij * b.data[p * b.cols + q];
                    }
                }
            }
        }
        out
    }

    pub fn add(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with(b, "add", |x, y| x + y)
    }

    pub fn sub(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with(b, "sub", |x, y| x - y)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    fn zip_with(&self, b: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != b.shape() {
            return Err(Error::Shape {
                op,
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(b.data.iter())
                .map(|(x, y)| f(*x, *y))
                .collect(),
        })
    }

    /// In-place `self += c * b`.
    pub fn add_scaled_assign(&mut self, b: &Matrix, c: f64) -> Result<()> {
        if self.shape() != b.shape() {
            return Err(Error::Shape {
                op: "add_scaled_assign",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        for (x, y) in self.data.iter_mut().zip(b.data.iter()) {
            *x += c * y;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Maximum absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Copies `block` into `self` with its top-left corner at `(i0, j0)`.
    pub fn set_block(&mut self, i0: usize, j0: usize, block: &Matrix) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.set(i0 + i, j0 + j, block.get(i, j));
            }
        }
    }

    /// Adds `c * block` into `self` at `(i0, j0)`.
    pub fn add_block(&mut self, i0: usize, j0: usize, block: &Matrix, c: f64) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.add_at(i0 + i, j0 + j, c * block.get(i, j));
            }
        }
    }

    pub fn block(&self, i0: usize, j0: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| self.get(i0 + i, j0 + j))
    }

    /// New matrix whose rows are `self`'s rows at the given indices.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(indices.len(), self.cols, |i, j| self.get(indices[i], j))
    }
}

/// Standard matrix product; free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Kronecker product; free-function form of [`Matrix::kron`].
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kron(b)
}

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_JACOBI_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns. Rejects inputs whose asymmetry exceeds `1e-10`
/// relative to the matrix scale, and fails if the sweep cap is hit.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !a.is_square() {
        return Err(Error::contract(format!(
            "sym_eig requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.max_abs().max(1.0);
    if a.asymmetry() > SYMMETRY_TOL * scale {
        return Err(Error::contract(format!(
            "sym_eig requires a symmetric matrix (asymmetry {:.3e})",
            a.asymmetry()
        )));
    }

    let n = a.rows();
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let frob = a.frobenius_norm().max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if (2.0 * off).sqrt() <= 1e-14 * frob {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = m.get(i, p);
                    let aiq = m.get(i, q);
                    m.set(i, p, c * aip - s * aiq);
                    m.set(p, i, c * aip - s * aiq);
                    m.set(i, q, s * aip + c * aiq);
                    m.set(q, i, s * aip + c * aiq);
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "Jacobi eigensolver did not converge within {} sweeps on a {}x{} matrix",
            MAX_JACOBI_SWEEPS, n, n
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok((eigenvalues, vectors))
}

/// Inverse square root of a symmetric positive semi-definite matrix:
/// `V diag((lambda + eps)^(-1/2)) V^T`.
///
/// Eigenvalues in `[-1e-8, 0)` are clamped to zero; anything more negative
/// violates the PSD contract. `eps > 0` regularizes singular inputs.
pub fn inv_sqrt_psd(a: &Matrix, eps: f64) -> Result<Matrix> {
    let (eigenvalues, vectors) = sym_eig(a)?;
    let n = a.rows();
    let mut scaled = Matrix::zeros(n, n);
    for k in 0..n {
        let lambda = eigenvalues[k];
        if lambda < -1e-8 {
            return Err(Error::contract(format!(
                "inv_sqrt_psd requires a PSD matrix; eigenvalue {} is {:.3e}",
                k, lambda
            )));
        }
        let shifted = lambda.max(0.0) + eps;
        if shifted <= 0.0 {
            return Err(Error::numeric(
                "inv_sqrt_psd: zero eigenvalue with eps = 0".to_string(),
            ));
        }
        let f = 1.0 / shifted.sqrt();
        for i in 0..n {
            scaled.set(i, k, vectors.get(i, k) * f);
        }
    }
    let out = scaled.matmul(&vectors.transpose())?;
    // Symmetrize away rounding noise from the two products.
    Ok(Matrix::from_fn(n, n, |i, j| {
        0.5 * (out.get(i, j) + out.get(j, i))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let b = random_matrix(rng, n, n);
        Matrix::from_fn(n, n, |i, j| 0.5 * (b.get(i, j) + b.get(j, i)))
    }

    #[test]
    fn matmul_identity() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let got = Matrix::identity(2).matmul(&a).unwrap();
        assert_eq!(got, a);
    }

    #[test]
    fn matmul_scalar() {
        let a = mat(&[&[2.0]]);
        let b = mat(&[&[3.0]]);
        assert_eq!(a.matmul(&b).unwrap(), mat(&[&[6.0]]));
    }

    #[test]
    fn matmul_hand_example() {
        let a = mat(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let b = mat(&[&[1.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), mat(&[&[1.0, 1.0], &[1.0, 2.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "message should name shapes: {msg}");
    }

    #[test]
    fn kron_identity_left() {
        let swap = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let got = Matrix::identity(2).kron(&swap);
        let want = mat(&[
            &[0.0, 1.0, 0.0, 0.0],
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0],
            &[0.0, 0.0, 1.0, 0.0],
        ]);
        assert_eq!(got, want);
    }

    #[test]
    fn kron_scalar() {
        let got = mat(&[&[2.0]]).kron(&mat(&[&[1.0, 1.0]]));
        assert_eq!(got, mat(&[&[2.0, 2.0]]));
    }

    #[test]
    fn kron_diag_with_identity() {
        let got = mat(&[&[1.0, 0.0], &[0.0, 2.0]]).kron(&Matrix::identity(2));
        let want = Matrix::from_fn(4, 4, |i, j| {
            if i != j {
                0.0
            } else if i < 2 {
                1.0
            } else {
                2.0
            }
        });
        assert_eq!(got, want);
    }

    #[test]
    fn kron_applies_blockwise() {
        // kron(I_n, W) acting on stacked blocks equals applying W per block.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(1..=5);
            let d = rng.gen_range(1..=4);
            let c = rng.gen_range(1..=3);
            let w = random_matrix(&mut rng, d, d);
            let x = random_matrix(&mut rng, n * d, c);
            let full = Matrix::identity(n).kron(&w).matmul(&x).unwrap();
            for v in 0..n {
                let block = x.block(v * d, 0, d, c);
                let expected = w.matmul(&block).unwrap();
                let got = full.block(v * d, 0, d, c);
                assert!(expected.sub(&got).unwrap().max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sym_eig_diagonal() {
        let (vals, vecs) = sym_eig(&mat(&[&[3.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(vals, vec![1.0, 3.0]);
        // Eigenvectors are the standard basis, up to sign.
        assert!((vecs.get(1, 0).abs() - 1.0).abs() < 1e-12);
        assert!((vecs.get(0, 1).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_swap_matrix() {
        let (vals, vecs) = sym_eig(&mat(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        // lambda = -1 direction is (1, -1)/sqrt(2), lambda = 1 is (1, 1)/sqrt(2).
        assert!((vecs.get(0, 0).abs() - inv_sqrt2).abs() < 1e-12);
        assert!((vecs.get(0, 0) + vecs.get(1, 0)).abs() < 1e-12);
        assert!((vecs.get(0, 1) - vecs.get(1, 1)).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_scaled_identity() {
        let (vals, _) = sym_eig(&mat(&[&[2.0, 0.0], &[0.0, 2.0]])).unwrap();
        assert_eq!(vals, vec![2.0, 2.0]);
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let err = sym_eig(&mat(&[&[0.0, 1.0], &[0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn sym_eig_reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &n in &[1usize, 2, 7, 16, 33, 64] {
            let a = random_symmetric(&mut rng, n);
            let (vals, vecs) = sym_eig(&a).unwrap();
            let recon = Matrix::from_fn(n, n, |i, j| {
                (0..n).map(|k| vecs.get(i, k) * vals[k] * vecs.get(j, k)).sum()
            });
            assert!(
                a.sub(&recon).unwrap().max_abs() < 1e-8,
                "reconstruction failed for n = {n}"
            );
            // Orthonormality of the eigenvector columns.
            let gram = vecs.transpose().matmul(&vecs).unwrap();
            assert!(gram.sub(&Matrix::identity(n)).unwrap().max_abs() < 1e-8);
        }
    }

    #[test]
    fn inv_sqrt_psd_identity() {
        let got = inv_sqrt_psd(&Matrix::identity(2), 0.0).unwrap();
        assert!(got.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_psd_diagonal() {
        let got = inv_sqrt_psd(&mat(&[&[4.0, 0.0], &[0.0, 9.0]]), 0.0).unwrap();
        assert!((got.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((got.get(1, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert!(got.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_psd_regularizes_zero_eigenvalue() {
        let got = inv_sqrt_psd(&mat(&[&[0.0, 0.0], &[0.0, 1.0]]), 1e-6).unwrap();
        assert!((got.get(0, 0) - 1000.0).abs() < 1e-6);
        assert!((got.get(1, 1) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn inv_sqrt_psd_squared_inverts_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let n = rng.gen_range(1..=6);
            let b = random_matrix(&mut rng, n, n);
            // b^T b + I is safely SPD.
            let spd = b
                .transpose()
                .matmul(&b)
                .unwrap()
                .add(&Matrix::identity(n))
                .unwrap();
            let s = inv_sqrt_psd(&spd, 0.0).unwrap();
            let should_be_eye = s.matmul(&s).unwrap().matmul(&spd).unwrap();
            assert!(should_be_eye.sub(&Matrix::identity(n)).unwrap().max_abs() < 1e-8);
        }
    }

    #[test]
    fn inv_sqrt_psd_rejects_negative_eigenvalue() {
        let err = inv_sqrt_psd(&mat(&[&[-1.0, 0.0], &[0.0, 1.0]]), 0.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, k, l, n) = (
                rng.gen_range(1..=5usize),
                rng.gen_range(1..=5usize),
                rng.gen_range(1..=5usize),
                rng.gen_range(1..=5usize),
            );
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, l);
            let c = random_matrix(&mut rng, l, n);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.sub(&right).unwrap().max_abs() < 1e-10);
        }

        #[test]
        fn finite_inputs_stay_finite(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 4, 3);
            let b = random_matrix(&mut rng, 3, 5);
            prop_assert!(a.matmul(&b).unwrap().is_finite());
            prop_assert!(a.kron(&b).is_finite());
        }
    }
}
