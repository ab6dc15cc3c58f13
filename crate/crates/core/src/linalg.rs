//! Symmetric-matrix utilities shared by every other module.
//!
//! All decompositions run on an explicitly symmetrized copy of the input, and
//! eigenvectors follow one sign convention (largest-magnitude entry positive,
//! ties to the lowest row) so repeated calls return identical bytes.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Pivot floor below which a matrix counts as singular.
pub const TOL_PD: f64 = 1e-12;
/// Column orthonormality tolerance of an [`EigenSelection`].
pub const TOL_ORTH: f64 = 1e-10;

/// Dense symmetric matrix. Construction symmetrizes the input as `(M + Mᵀ)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Panics if `m` is not square.
    pub fn new(m: Matrix) -> Self {
        assert!(m.is_square(), "SymMatrix requires a square matrix, got {}x{}", m.nrows(), m.ncols());
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn try_new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dims("SymMatrix", "square", format!("{}x{}", m.nrows(), m.ncols())));
        }
        Ok(Self::new(m))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Matrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(Matrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(Matrix::from_diagonal(&Vector::from_column_slice(d)))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        SymMatrix(Matrix::identity(n, n) * s)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    /// `1e-9 · (1 + max|entry|)`.
    pub fn tol_psd(&self) -> f64 {
        1e-9 * (1.0 + self.0.amax())
    }

    /// Eigenvalues in descending order with sign-normalized eigenvectors.
    pub fn eigen(&self) -> Spectrum {
        Spectrum::of(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return f64::INFINITY;
        }
        let eig = SymmetricEigen::new(self.0.clone());
        eig.eigenvalues.min()
    }

    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -self.tol_psd()
    }

    /// Returns `Err(NotPsd)` unless the matrix is PSD within [`SymMatrix::tol_psd`].
    pub fn check_psd(&self) -> Result<()> {
        let min_eig = self.min_eigenvalue();
        if min_eig < -self.tol_psd() {
            Err(Error::NotPsd { min_eig })
        } else {
            Ok(())
        }
    }

    /// Principal submatrix over `idx`.
    pub fn principal(&self, idx: &[usize]) -> SymMatrix {
        SymMatrix(self.0.select_rows(idx).select_columns(idx))
    }

    /// `a · self · aᵀ`, re-symmetrized.
    pub fn congruence(&self, a: &Matrix) -> SymMatrix {
        SymMatrix::new(a * &self.0 * a.transpose())
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

impl Deref for SymMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

impl From<Matrix> for SymMatrix {
    fn from(m: Matrix) -> Self {
        SymMatrix::new(m)
    }
}

/// Full symmetric eigendecomposition, descending eigenvalues.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vector,
    pub vectors: Matrix,
}

impl Spectrum {
    fn of(m: &Matrix) -> Self {
        let n = m.nrows();
        if n == 0 {
            return Spectrum {
                values: Vector::zeros(0),
                vectors: Matrix::zeros(0, 0),
            };
        }
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..n).collect();
        // stable sort keeps the solver's order for exact ties
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = Matrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            let mut col = eig.eigenvectors.column(src).into_owned();
            canonicalize_sign(&mut col);
            vectors.set_column(dst, &col);
        }
        Spectrum { values, vectors }
    }

    /// Largest absolute eigenvalue.
    pub fn radius(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Flips `v` so its largest-magnitude entry is positive (first index wins ties).
pub fn canonicalize_sign(v: &mut Vector) {
    let mut best = 0usize;
    let mut best_abs = -1.0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Orthonormal eigenvectors with their eigenvalues, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSelection {
    pub vectors: Matrix,
    pub values: Vector,
}

impl EigenSelection {
    pub fn empty(dim: usize) -> Self {
        EigenSelection {
            vectors: Matrix::zeros(dim, 0),
            values: Vector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading `count` columns.
    pub fn truncate(&self, count: usize) -> Self {
        let k = count.min(self.len());
        EigenSelection {
            vectors: self.vectors.columns(0, k).into_owned(),
            values: self.values.rows(0, k).into_owned(),
        }
    }
}

/// Default zero threshold: `1e-10` times the spectral radius.
pub fn default_tol_zero(spec: &Spectrum) -> f64 {
    1e-10 * spec.radius()
}

/// Symmetric PSD square root; eigenvalues within tolerance of zero are clamped.
pub fn sym_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let spec = m.eigen();
    let tol = m.tol_psd();
    if let Some(&min) = spec.values.iter().next_back() {
        if min < -tol {
            return Err(Error::NotPsd { min_eig: min });
        }
    }
    let roots = spec.values.map(|v| v.max(0.0).sqrt());
    Ok(SymMatrix::new(&spec.vectors * Matrix::from_diagonal(&roots) * spec.vectors.transpose()))
}

/// Inverse square root of a positive-definite matrix.
pub fn sym_inv_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let spec = m.eigen();
    if let Some(&min) = spec.values.iter().next_back() {
        if min <= TOL_PD {
            return Err(Error::Singular {
                context: "sym_inv_sqrt",
                min_eig: min,
            });
        }
    }
    let inv_roots = spec.values.map(|v| 1.0 / v.sqrt());
    Ok(SymMatrix::new(&spec.vectors * Matrix::from_diagonal(&inv_roots) * spec.vectors.transpose()))
}

/// Inverse of a positive-definite matrix.
pub fn sym_inverse(m: &SymMatrix, context: &'static str) -> Result<SymMatrix> {
    let spec = m.eigen();
    if let Some(&min) = spec.values.iter().next_back() {
        if min <= TOL_PD {
            return Err(Error::Singular { context, min_eig: min });
        }
    }
    let inv = spec.values.map(|v| 1.0 / v);
    Ok(SymMatrix::new(&spec.vectors * Matrix::from_diagonal(&inv) * spec.vectors.transpose()))
}

/// Inverse with eigenvalues floored at `floor` (relative to the largest
/// eigenvalue when that is bigger than one). Returns whether flooring kicked in.
pub fn sym_inverse_floored(m: &SymMatrix, floor: f64) -> (SymMatrix, bool) {
    let spec = m.eigen();
    let scale = spec.radius().max(1.0);
    let lo = floor * scale;
    let mut clamped = false;
    let inv = spec.values.map(|v| {
        if v < lo {
            clamped = true;
            1.0 / lo
        } else {
            1.0 / v
        }
    });
    (
        SymMatrix::new(&spec.vectors * Matrix::from_diagonal(&inv) * spec.vectors.transpose()),
        clamped,
    )
}

/// Eigenvectors of the at most `count` algebraically largest eigenvalues among
/// those with `|λ| > tol_zero`, in descending eigenvalue order.
pub fn top_nonzero_eigvecs(m: &SymMatrix, count: usize, tol_zero: Option<f64>) -> EigenSelection {
    let spec = m.eigen();
    let tol = tol_zero.unwrap_or_else(|| default_tol_zero(&spec));
    let keep: Vec<usize> = (0..spec.values.len())
        .filter(|&i| spec.values[i].abs() > tol)
        .take(count)
        .collect();
    EigenSelection {
        vectors: spec.vectors.select_columns(&keep),
        values: Vector::from_iterator(keep.len(), keep.iter().map(|&i| spec.values[i])),
    }
}

/// Principal generalized eigenvectors of the pencil `(a, b)`, `a v = λ b v`,
/// for the `count` largest λ. Each returned column has unit Euclidean norm.
pub fn generalized_top_eigvecs(a: &SymMatrix, b: &SymMatrix, count: usize) -> Result<EigenSelection> {
    let spec = generalized_spectrum(a, b)?;
    Ok(spec.truncate(count))
}

/// All generalized eigenpairs of `(a, b)` in descending order.
pub fn generalized_spectrum(a: &SymMatrix, b: &SymMatrix) -> Result<EigenSelection> {
    if a.dim() != b.dim() {
        return Err(Error::dims("generalized_top_eigvecs", a.dim(), b.dim()));
    }
    let b_isqrt = sym_inv_sqrt(b)?;
    let reduced = a.congruence(&b_isqrt);
    let spec = reduced.eigen();
    let n = a.dim();
    let mut vectors = Matrix::zeros(n, n);
    for j in 0..n {
        let mut v = b_isqrt.as_matrix() * spec.vectors.column(j);
        let norm = v.norm();
        if norm > 0.0 {
            v /= norm;
        }
        canonicalize_sign(&mut v);
        vectors.set_column(j, &v);
    }
    Ok(EigenSelection {
        vectors,
        values: spec.values,
    })
}

/// Counts of eigenvalues `> tol`, `< -tol`, and within `[-tol, tol]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

pub fn inertia(m: &SymMatrix, tol_zero: f64) -> Inertia {
    let spec = m.eigen();
    let mut out = Inertia {
        positive: 0,
        negative: 0,
        zero: 0,
    };
    for &v in spec.values.iter() {
        if v > tol_zero {
            out.positive += 1;
        } else if v < -tol_zero {
            out.negative += 1;
        } else {
            out.zero += 1;
        }
    }
    out
}

/// Singular values of `m` in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// True when `m` has full row rank: smallest singular value above
/// `1e-10` times the largest. Zero-row matrices count as full rank.
pub fn has_full_row_rank(m: &Matrix) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    if m.nrows() > m.ncols() {
        return false;
    }
    let sv = singular_values(m);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) => hi > 0.0 && lo > 1e-10 * hi,
        _ => false,
    }
}

/// Orthonormal basis (columns) of the orthogonal complement of `range(a)`.
pub fn complement_basis(a: &Matrix) -> Matrix {
    let n = a.nrows();
    let gram = SymMatrix::new(a * a.transpose());
    let spec = gram.eigen();
    let tol = 1e-10 * spec.radius().max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..n).filter(|&i| spec.values[i].abs() <= tol).collect();
    spec.vectors.select_columns(&keep)
}

/// Orthonormal basis (columns) of the row space of `a`, i.e. the right
/// singular vectors with non-zero singular values.
pub fn row_space_basis(a: &Matrix) -> Matrix {
    let n = a.ncols();
    if a.nrows() == 0 {
        return Matrix::zeros(n, 0);
    }
    let gram = SymMatrix::new(a.transpose() * a);
    let spec = gram.eigen();
    let tol = 1e-12 * spec.radius().max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..n).filter(|&i| spec.values[i] > tol).collect();
    spec.vectors.select_columns(&keep)
}

/// Block-diagonal assembly of the given blocks.
pub fn block_diagonal(blocks: &[Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Frobenius norm of `a - b`.
pub fn frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm()
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn construction_symmetrizes() {
        let m = SymMatrix::new(Matrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 3.0]));
        assert_eq!(m[(0, 1)], m[(1, 0)]);
        assert_eq!(m[(0, 1)], 3.0);
    }

    #[test]
    fn sqrt_of_diagonal_and_identity() {
        let s = sym_sqrt(&SymMatrix::from_diagonal(&[4.0, 9.0])).unwrap();
        assert!(max_abs_diff(&s, &Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]))) < 1e-12);
        let i = sym_sqrt(&SymMatrix::identity(3)).unwrap();
        assert!(max_abs_diff(&i, &Matrix::identity(3, 3)) < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, 5, 5);
        let m = SymMatrix::new(&x * x.transpose());
        let s = sym_sqrt(&m).unwrap();
        let rel = frobenius_diff(&(s.as_matrix() * s.as_matrix()), &m) / m.norm();
        assert!(rel < 1e-8, "{rel}");
        assert!(s.is_psd());
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let err = sym_sqrt(&SymMatrix::from_diagonal(&[1.0, -1.0])).unwrap_err();
        assert!(matches!(err, Error::NotPsd { .. }));
    }

    #[test]
    fn sqrt_clamps_tiny_negative() {
        let s = sym_sqrt(&SymMatrix::from_diagonal(&[1.0, -1e-12])).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
    }

    #[test]
    fn inv_sqrt_cases() {
        let r = sym_inv_sqrt(&SymMatrix::from_diagonal(&[4.0])).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-15);
        let r = sym_inv_sqrt(&SymMatrix::identity(2)).unwrap();
        assert!(max_abs_diff(&r, &Matrix::identity(2, 2)) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 6, 6);
        let m = SymMatrix::new(&x * x.transpose() + Matrix::identity(6, 6) * 0.1);
        let r = sym_inv_sqrt(&m).unwrap();
        let prod = r.as_matrix() * m.as_matrix() * r.as_matrix();
        assert!(frobenius_diff(&prod, &Matrix::identity(6, 6)) < 1e-8);

        let err = sym_inv_sqrt(&SymMatrix::from_diagonal(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
    }

    #[test]
    fn top_nonzero_skips_zero_eigenvalues() {
        let sel = top_nonzero_eigvecs(&SymMatrix::from_diagonal(&[3.0, 0.0, -1.0]), 2, None);
        assert_eq!(sel.values.as_slice(), &[3.0, -1.0]);
        assert!((sel.vectors.column(0) - Vector::from_vec(vec![1.0, 0.0, 0.0])).amax() < 1e-15);
        assert!((sel.vectors.column(1) - Vector::from_vec(vec![0.0, 0.0, 1.0])).amax() < 1e-15);
    }

    #[test]
    fn top_nonzero_returns_fewer_when_short() {
        let sel = top_nonzero_eigvecs(&SymMatrix::from_diagonal(&[5.0, 2.0]), 5, None);
        assert_eq!(sel.len(), 2);
        assert_eq!(sel.values.as_slice(), &[5.0, 2.0]);
    }

    #[test]
    fn top_nonzero_reconstructs_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, 8, 3);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, -1.0, 0.5]));
        let m = SymMatrix::new(&x * d * x.transpose());
        let sel = top_nonzero_eigvecs(&m, 3, None);
        assert_eq!(sel.len(), 3);
        let recon = &sel.vectors * Matrix::from_diagonal(&sel.values) * sel.vectors.transpose();
        assert!(frobenius_diff(&recon, &m) < 1e-8);
        let gram = sel.vectors.transpose() * &sel.vectors;
        assert!(max_abs_diff(&gram, &Matrix::identity(3, 3)) < TOL_ORTH);
    }

    #[test]
    fn generalized_identity_pencil_and_proportional() {
        let a = SymMatrix::from_diagonal(&[1.0, 4.0, 2.0]);
        let sel = generalized_top_eigvecs(&a, &SymMatrix::identity(3), 1).unwrap();
        assert!((sel.values[0] - 4.0).abs() < 1e-12);
        assert!((sel.vectors[(1, 0)] - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 4, 4);
        let b = SymMatrix::new(&x * x.transpose() + Matrix::identity(4, 4));
        let sel = generalized_top_eigvecs(&b.scale(2.0), &b, 1).unwrap();
        assert!((sel.values[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn generalized_residuals_are_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, 5, 5);
        let y = randn(&mut rng, 5, 5);
        let a = SymMatrix::new(&x + x.transpose());
        let b = SymMatrix::new(&y * y.transpose() + Matrix::identity(5, 5));
        let sel = generalized_top_eigvecs(&a, &b, 5).unwrap();
        for j in 0..5 {
            let v = sel.vectors.column(j);
            let res = a.as_matrix() * v - b.as_matrix() * v * sel.values[j];
            assert!(res.norm() < 1e-8, "pair {j}: {}", res.norm());
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inertia_counts() {
        assert_eq!(
            inertia(&SymMatrix::from_diagonal(&[3.0, 0.0, -1.0]), 1e-10),
            Inertia { positive: 1, negative: 1, zero: 1 }
        );
        assert_eq!(
            inertia(&SymMatrix::zeros(4), 1e-10),
            Inertia { positive: 0, negative: 0, zero: 4 }
        );
    }

    #[test]
    fn complement_and_row_space() {
        let a = Matrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let c = complement_basis(&a);
        assert_eq!(c.ncols(), 2);
        assert!((a.transpose() * &c).amax() < 1e-12);
        let rs = row_space_basis(&Matrix::from_row_slice(1, 3, &[0.0, 2.0, 0.0]));
        assert_eq!(rs.ncols(), 1);
        assert!((rs[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_row_rank_detection() {
        assert!(has_full_row_rank(&Matrix::identity(3, 3)));
        assert!(has_full_row_rank(&Matrix::zeros(0, 4)));
        assert!(!has_full_row_rank(&Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])));
    }
}
