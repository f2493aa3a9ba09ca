//! Symmetric positive definite block-tridiagonal matrices and their
//! forward-elimination / back-substitution solver.
//!
//! A matrix here is described by `N` dense `n x n` diagonal blocks `c_k` and
//! `N-1` sub-diagonal blocks `a_k` (the super-diagonal is `a_k^T` by
//! symmetry). The solver runs in `O(n^3 N)`:
//!
//! 1. `d_1 = c_1`, `s_1 = r_1`
//! 2. for `k = 2..N`: `d_k = c_k - a_k d_{k-1}^{-1} a_k^T`,
//!    `s_k = r_k - a_k d_{k-1}^{-1} s_{k-1}`
//! 3. `e_N = d_N^{-1} s_N`
//! 4. for `k = N-1..1`: `e_k = d_k^{-1} (s_k - a_{k+1}^T e_{k+1})`
//!
//! with `a_k` the block at row `k`, column `k-1` (below the diagonal). The
//! transpose placement matters for non-symmetric coupling blocks: the pivot
//! update must sandwich `d_{k-1}^{-1}` between `a_k` and `a_k^T` in this
//! order, or the recursion solves a different (block-transposed) system.
//!
//! All `d_k^{-1}` applications go through Cholesky factor solves; a failed
//! factorization is reported as [`Error::NotPositiveDefinite`] with the
//! offending block index.

use nalgebra::{Cholesky, DMatrix, DVector, DVectorView, Dyn};

use crate::{Error, Result};

/// Vector of `N` stacked length-`n` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    n: usize,
    data: DVector<f64>,
}

impl BlockVector {
    pub fn zeros(n: usize, len: usize) -> Self {
        BlockVector { n, data: DVector::zeros(n * len) }
    }

    /// Wrap a flat vector whose length must be a multiple of `n`.
    pub fn from_flat(n: usize, data: DVector<f64>) -> Result<Self> {
        if n == 0 || data.len() % n != 0 || data.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "flat length {} is not a positive multiple of block dim {}",
                data.len(),
                n
            )));
        }
        Ok(BlockVector { n, data })
    }

    pub fn from_blocks(blocks: &[DVector<f64>]) -> Result<Self> {
        let n = blocks.first().map(|b| b.len()).unwrap_or(0);
        if n == 0 {
            return Err(Error::ShapeMismatch("empty block list".into()));
        }
        let mut data = DVector::zeros(n * blocks.len());
        for (k, b) in blocks.iter().enumerate() {
            if b.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "block {} has length {}, expected {}",
                    k,
                    b.len(),
                    n
                )));
            }
            data.rows_mut(k * n, n).copy_from(b);
        }
        Ok(BlockVector { n, data })
    }

    /// Block dimension `n`.
    pub fn block_dim(&self) -> usize {
        self.n
    }

    /// Number of blocks `N`.
    pub fn len(&self) -> usize {
        self.data.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, k: usize) -> DVectorView<'_, f64> {
        self.data.rows(k * self.n, self.n)
    }

    pub fn block_owned(&self, k: usize) -> DVector<f64> {
        self.block(k).into_owned()
    }

    pub fn set_block(&mut self, k: usize, value: &DVector<f64>) {
        self.data.rows_mut(k * self.n, self.n).copy_from(value);
    }

    pub fn as_dvector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_dvector(self) -> DVector<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn dot(&self, other: &BlockVector) -> f64 {
        self.data.dot(&other.data)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &BlockVector) {
        self.data.axpy(alpha, &other.data, 1.0);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data *= alpha;
    }

    fn same_shape(&self, other: &BlockVector) -> bool {
        self.n == other.n && self.data.len() == other.data.len()
    }
}

impl std::ops::Add<&BlockVector> for &BlockVector {
    type Output = BlockVector;
    fn add(self, rhs: &BlockVector) -> BlockVector {
        assert!(self.same_shape(rhs), "block vector shape mismatch");
        BlockVector { n: self.n, data: &self.data + &rhs.data }
    }
}

impl std::ops::Sub<&BlockVector> for &BlockVector {
    type Output = BlockVector;
    fn sub(self, rhs: &BlockVector) -> BlockVector {
        assert!(self.same_shape(rhs), "block vector shape mismatch");
        BlockVector { n: self.n, data: &self.data - &rhs.data }
    }
}

impl std::ops::Mul<f64> for &BlockVector {
    type Output = BlockVector;
    fn mul(self, rhs: f64) -> BlockVector {
        BlockVector { n: self.n, data: &self.data * rhs }
    }
}

/// Symmetric block-tridiagonal matrix.
///
/// `sub[k]` couples block row `k+1` to block row `k` (zero based), i.e. it
/// sits below the diagonal; the transposed copy above the diagonal is
/// implicit. Diagonal blocks are symmetrized on construction since assembly
/// arithmetic introduces asymmetry at roundoff level.
#[derive(Debug, Clone)]
pub struct BlockTriMatrix {
    n: usize,
    diag: Vec<DMatrix<f64>>,
    sub: Vec<DMatrix<f64>>,
}

impl BlockTriMatrix {
    pub fn new(diag: Vec<DMatrix<f64>>, sub: Vec<DMatrix<f64>>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::ShapeMismatch("need at least one diagonal block".into()));
        }
        let n = diag[0].nrows();
        if n == 0 {
            return Err(Error::ShapeMismatch("zero block dimension".into()));
        }
        if sub.len() + 1 != diag.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} sub-diagonal blocks for {} diagonal blocks",
                sub.len(),
                diag.len()
            )));
        }
        for (k, c) in diag.iter().enumerate() {
            if c.nrows() != n || c.ncols() != n {
                return Err(Error::ShapeMismatch(format!(
                    "diagonal block {} is {}x{}, expected {}x{}",
                    k,
                    c.nrows(),
                    c.ncols(),
                    n,
                    n
                )));
            }
        }
        for (k, a) in sub.iter().enumerate() {
            if a.nrows() != n || a.ncols() != n {
                return Err(Error::ShapeMismatch(format!(
                    "sub-diagonal block {} is {}x{}, expected {}x{}",
                    k,
                    a.nrows(),
                    a.ncols(),
                    n,
                    n
                )));
            }
        }
        let diag = diag.into_iter().map(|c| (&c + c.transpose()) * 0.5).collect();
        Ok(BlockTriMatrix { n, diag, sub })
    }

    /// Identity with `len` blocks of dimension `n`.
    pub fn identity(n: usize, len: usize) -> Self {
        BlockTriMatrix {
            n,
            diag: (0..len).map(|_| DMatrix::identity(n, n)).collect(),
            sub: (0..len.saturating_sub(1)).map(|_| DMatrix::zeros(n, n)).collect(),
        }
    }

    pub fn block_dim(&self) -> usize {
        self.n
    }

    /// Number of block rows `N`.
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn diag_block(&self, k: usize) -> &DMatrix<f64> {
        &self.diag[k]
    }

    /// Block at row `k+1`, column `k`.
    pub fn sub_block(&self, k: usize) -> &DMatrix<f64> {
        &self.sub[k]
    }

    /// Add `m` onto diagonal block `k`, re-symmetrizing.
    pub fn add_to_diag(&mut self, k: usize, m: &DMatrix<f64>) {
        let sym = (m + m.transpose()) * 0.5;
        self.diag[k] += sym;
    }

    fn check_vec(&self, x: &BlockVector) -> Result<()> {
        if x.block_dim() != self.n || x.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "vector has {} blocks of dim {}, matrix has {} of dim {}",
                x.len(),
                x.block_dim(),
                self.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// Matrix-vector product in `O(n^2 N)`.
    pub fn mul_vec(&self, x: &BlockVector) -> Result<BlockVector> {
        self.check_vec(x)?;
        let len = self.len();
        let mut out = BlockVector::zeros(self.n, len);
        for k in 0..len {
            let mut y = &self.diag[k] * x.block(k);
            if k > 0 {
                y += &self.sub[k - 1] * x.block(k - 1);
            }
            if k + 1 < len {
                y += self.sub[k].transpose() * x.block(k + 1);
            }
            out.set_block(k, &y);
        }
        Ok(out)
    }

    /// Forward elimination and back substitution (`O(n^3 N)`).
    ///
    /// Returns the solution of `A e = r` together with the forward factor
    /// holding the pivot blocks `d_k` and transformed right-hand side `s_k`.
    pub fn solve(&self, rhs: &BlockVector) -> Result<(BlockVector, ForwardFactor)> {
        self.check_vec(rhs)?;
        let len = self.len();
        let mut d: Vec<DMatrix<f64>> = Vec::with_capacity(len);
        let mut chol: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(len);
        let mut s = BlockVector::zeros(self.n, len);

        d.push(self.diag[0].clone());
        s.set_block(0, &rhs.block_owned(0));
        chol.push(factorize(&d[0], 1)?);
        for k in 1..len {
            let a = &self.sub[k - 1];
            // d_k = c_k - a_k d_{k-1}^{-1} a_k^T
            let dinv_at = chol[k - 1].solve(&a.transpose());
            let mut dk = self.diag[k].clone();
            dk.gemm(-1.0, a, &dinv_at, 1.0);
            // keep the pivot exactly symmetric under accumulated roundoff
            dk = (&dk + dk.transpose()) * 0.5;
            let dinv_s = chol[k - 1].solve(&s.block_owned(k - 1));
            let sk = rhs.block_owned(k) - a * dinv_s;
            s.set_block(k, &sk);
            chol.push(factorize(&dk, k + 1)?);
            d.push(dk);
        }

        let mut e = BlockVector::zeros(self.n, len);
        e.set_block(len - 1, &chol[len - 1].solve(&s.block_owned(len - 1)));
        for k in (0..len - 1).rev() {
            let t = s.block_owned(k) - self.sub[k].transpose() * e.block(k + 1);
            e.set_block(k, &chol[k].solve(&t));
        }

        Ok((e, ForwardFactor { d, chol, s }))
    }

    /// Dense `nN x nN` copy; intended for small instances and test oracles.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let len = self.len();
        let mut out = DMatrix::zeros(self.n * len, self.n * len);
        for k in 0..len {
            out.view_mut((k * self.n, k * self.n), (self.n, self.n)).copy_from(&self.diag[k]);
            if k + 1 < len {
                out.view_mut(((k + 1) * self.n, k * self.n), (self.n, self.n))
                    .copy_from(&self.sub[k]);
                out.view_mut((k * self.n, (k + 1) * self.n), (self.n, self.n))
                    .copy_from(&self.sub[k].transpose());
            }
        }
        out
    }
}

fn factorize(m: &DMatrix<f64>, block: usize) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite { block })
}

/// Output of the forward elimination: pivot blocks `d_k` (with their Cholesky
/// factors) and the transformed right-hand side `s_k`.
#[derive(Debug, Clone)]
pub struct ForwardFactor {
    d: Vec<DMatrix<f64>>,
    chol: Vec<Cholesky<f64, Dyn>>,
    s: BlockVector,
}

impl ForwardFactor {
    pub fn pivot(&self, k: usize) -> &DMatrix<f64> {
        &self.d[k]
    }

    pub fn pivots(&self) -> &[DMatrix<f64>] {
        &self.d
    }

    pub fn transformed_rhs(&self) -> &BlockVector {
        &self.s
    }

    /// Apply `d_k^{-1}` through the cached Cholesky factor.
    pub fn pivot_solve(&self, k: usize, v: &DVector<f64>) -> DVector<f64> {
        self.chol[k].solve(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bv(n: usize, vals: &[f64]) -> BlockVector {
        BlockVector::from_flat(n, DVector::from_row_slice(vals)).unwrap()
    }

    #[test]
    fn scalar_solve() {
        let a = BlockTriMatrix::new(vec![DMatrix::from_row_slice(1, 1, &[2.0])], vec![]).unwrap();
        let (e, _) = a.solve(&bv(1, &[4.0])).unwrap();
        assert!((e.as_dvector()[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let a = BlockTriMatrix::identity(2, 4);
        let r = bv(2, &[1.0, -2.0, 3.0, 0.5, -0.25, 4.0, 7.0, -1.0]);
        let (e, _) = a.solve(&r).unwrap();
        assert!((e.as_dvector() - r.as_dvector()).norm() < 1e-14);
    }

    #[test]
    fn identity_multiply_is_noop() {
        let a = BlockTriMatrix::identity(3, 3);
        let x = bv(3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let y = a.mul_vec(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_tridiagonal_multiply() {
        // [[2,1],[1,2]] * [1,1] = [3,3]
        let a = BlockTriMatrix::new(
            vec![DMatrix::from_row_slice(1, 1, &[2.0]), DMatrix::from_row_slice(1, 1, &[2.0])],
            vec![DMatrix::from_row_slice(1, 1, &[1.0])],
        )
        .unwrap();
        let y = a.mul_vec(&bv(1, &[1.0, 1.0])).unwrap();
        assert!((y.as_dvector() - DVector::from_row_slice(&[3.0, 3.0])).norm() < 1e-14);
    }

    #[test]
    fn dense_assembly_single_and_decoupled() {
        let c1 = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let a = BlockTriMatrix::new(vec![c1.clone()], vec![]).unwrap();
        assert_eq!(a.to_dense(), c1);

        let b = BlockTriMatrix::new(vec![c1.clone(), c1.clone()], vec![DMatrix::zeros(2, 2)])
            .unwrap();
        let dense = b.to_dense();
        assert_eq!(dense.view((0, 0), (2, 2)).into_owned(), c1);
        assert_eq!(dense.view((2, 2), (2, 2)).into_owned(), c1);
        assert_eq!(dense.view((2, 0), (2, 2)).into_owned(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn construction_symmetrizes_diag() {
        let skew = DMatrix::from_row_slice(2, 2, &[4.0, 1.0 + 1e-13, 1.0, 3.0]);
        let a = BlockTriMatrix::new(vec![skew], vec![]).unwrap();
        let d = a.diag_block(0);
        assert_eq!(d[(0, 1)], d[(1, 0)]);
    }

    #[test]
    fn not_positive_definite_reports_block() {
        let a = BlockTriMatrix::new(
            vec![
                DMatrix::from_row_slice(1, 1, &[1.0]),
                DMatrix::from_row_slice(1, 1, &[0.25]),
            ],
            vec![DMatrix::from_row_slice(1, 1, &[1.0])],
        )
        .unwrap();
        // d_2 = 0.25 - 1 * 1 * 1 = -0.75
        let err = a.solve(&bv(1, &[1.0, 1.0])).unwrap_err();
        assert_eq!(err, Error::NotPositiveDefinite { block: 2 });
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = BlockTriMatrix::identity(2, 3);
        let bad = bv(2, &[1.0, 2.0]);
        assert!(matches!(a.solve(&bad), Err(Error::ShapeMismatch(_))));
        assert!(matches!(a.mul_vec(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn forward_factor_satisfies_recursion() {
        let a = BlockTriMatrix::new(
            vec![
                DMatrix::from_row_slice(1, 1, &[4.0]),
                DMatrix::from_row_slice(1, 1, &[5.0]),
                DMatrix::from_row_slice(1, 1, &[6.0]),
            ],
            vec![DMatrix::from_row_slice(1, 1, &[1.0]), DMatrix::from_row_slice(1, 1, &[2.0])],
        )
        .unwrap();
        let r = bv(1, &[1.0, 2.0, 3.0]);
        let (_, f) = a.solve(&r).unwrap();
        // d_1 = c_1, s_1 = r_1, then the step-2 recursions exactly.
        assert_eq!(f.pivot(0), a.diag_block(0));
        assert_eq!(f.transformed_rhs().block_owned(0), r.block_owned(0));
        for k in 1..3 {
            let prev = f.pivot(k - 1);
            let sub = a.sub_block(k - 1);
            let expect_d = a.diag_block(k)
                - sub * prev.clone().cholesky().unwrap().solve(&sub.transpose());
            assert!((f.pivot(k) - expect_d).norm() < 1e-12);
            let expect_s = r.block_owned(k)
                - sub
                    * prev.clone().cholesky().unwrap().solve(&f.transformed_rhs().block_owned(k - 1));
            assert!((f.transformed_rhs().block_owned(k) - expect_s).norm() < 1e-12);
        }
    }

    #[test]
    fn upper_triangularized_system_holds_row_by_row() {
        // After elimination, d_k e_k + a_{k+1}^T e_{k+1} = s_k for every k.
        let a = BlockTriMatrix::new(
            vec![
                DMatrix::from_row_slice(2, 2, &[4.0, 0.5, 0.5, 3.0]),
                DMatrix::from_row_slice(2, 2, &[5.0, -0.2, -0.2, 4.0]),
                DMatrix::from_row_slice(2, 2, &[6.0, 0.1, 0.1, 5.0]),
            ],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 0.2, 0.4]),
                DMatrix::from_row_slice(2, 2, &[-0.2, 0.5, 0.1, 0.3]),
            ],
        )
        .unwrap();
        let r = bv(2, &[1.0, -1.0, 2.0, 0.5, -0.5, 1.5]);
        let (e, f) = a.solve(&r).unwrap();
        for k in 0..3 {
            let mut lhs = f.pivot(k) * e.block(k);
            if k + 1 < 3 {
                lhs += a.sub_block(k).transpose() * e.block(k + 1);
            }
            assert!((lhs - f.transformed_rhs().block_owned(k)).norm() < 1e-12);
        }
    }
}
