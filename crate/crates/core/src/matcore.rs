//! Dense symmetric-matrix numerics.
//!
//! Every certificate inequality in this crate reduces to "is this symmetric
//! matrix positive semidefinite, and by how much". [`SymMatrix`] symmetrizes
//! its input on construction, [`min_eig`] runs cyclic Jacobi rotations, and
//! [`psd_check`] turns the smallest eigenvalue into a verdict with a witness
//! direction when the test fails.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the symmetric-matrix routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatError {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, MatError>;

/// Default absolute eigenvalue tolerance used by [`psd_check`].
pub const DEFAULT_PSD_TOLERANCE: f64 = 1e-10;

static PSD_TOLERANCE_BITS: AtomicU64 = AtomicU64::new(0x3DDB_7CDF_D9D7_BDBB); // 1e-10

/// Current absolute tolerance applied to eigenvalues in [`psd_check`].
pub fn psd_tolerance() -> f64 {
    f64::from_bits(PSD_TOLERANCE_BITS.load(Ordering::Relaxed))
}

/// Replace the process-wide PSD tolerance. Negative or non-finite values are ignored.
pub fn set_psd_tolerance(tol: f64) {
    if tol.is_finite() && tol >= 0.0 {
        PSD_TOLERANCE_BITS.store(tol.to_bits(), Ordering::Relaxed);
    }
}

/// A real symmetric matrix of dimension at least one.
///
/// Construction replaces the input `M` by `(M + Mᵀ)/2`, so round-off
/// asymmetry from products such as `JᵀPJ` never trips a check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SymMatrixRepr", into = "SymMatrixRepr")]
pub struct SymMatrix(DMatrix<f64>);

#[derive(Serialize, Deserialize)]
struct SymMatrixRepr {
    dim: usize,
    entries: Vec<f64>,
}

impl TryFrom<SymMatrixRepr> for SymMatrix {
    type Error = MatError;

    fn try_from(r: SymMatrixRepr) -> Result<Self> {
        SymMatrix::from_row_slice(r.dim, &r.entries)
    }
}

impl From<SymMatrix> for SymMatrixRepr {
    fn from(m: SymMatrix) -> Self {
        let dim = m.dim();
        let entries = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .map(|(i, j)| m.0[(i, j)])
            .collect();
        SymMatrixRepr { dim, entries }
    }
}

impl SymMatrix {
    /// Symmetrize and validate a square matrix.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(MatError::InvalidMatrix(format!(
                "not square: {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(MatError::InvalidMatrix("dimension must be at least 1".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(MatError::InvalidMatrix("non-finite entry".into()));
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(SymMatrix(sym))
    }

    pub fn from_row_slice(dim: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(MatError::DimensionMismatch {
                expected: format!("{} entries", dim * dim),
                found: format!("{} entries", entries.len()),
            });
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        assert!(dim >= 1, "SymMatrix dimension must be at least 1");
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "SymMatrix dimension must be at least 1");
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, value))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn scale(&self, alpha: f64) -> SymMatrix {
        SymMatrix(&self.0 * alpha)
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        self.check_same_dim(other)?;
        Ok(SymMatrix(&self.0 + &other.0))
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        self.check_same_dim(other)?;
        Ok(SymMatrix(&self.0 - &other.0))
    }

    /// `Tᵀ M T` for a rectangular `T` with `dim` rows.
    pub fn congruence(&self, t: &DMatrix<f64>) -> Result<SymMatrix> {
        if t.nrows() != self.dim() {
            return Err(MatError::DimensionMismatch {
                expected: format!("{} rows", self.dim()),
                found: format!("{} rows", t.nrows()),
            });
        }
        Self::new(t.transpose() * &self.0 * t)
    }

    /// Quadratic form `vᵀ M v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.0 * v))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn check_same_dim(&self, other: &SymMatrix) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(MatError::DimensionMismatch {
                expected: format!("{0}x{0}", self.dim()),
                found: format!("{0}x{0}", other.dim()),
            });
        }
        Ok(())
    }
}

/// Full symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns.
pub fn sym_eigen(m: &SymMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !m.is_finite() {
        return Err(MatError::InvalidMatrix("non-finite entry".into()));
    }
    let n = m.dim();
    let mut a = m.0.clone();
    let mut v = DMatrix::<f64>::identity(n, n);

    let frob = a.norm();
    if frob > 0.0 {
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[(p, q)] * a[(p, q)];
                }
            }
            if off.sqrt() <= 1e-17 * frob {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let app = a[(p, p)];
                    let aqq = a[(q, q)];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;

                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &v.column(i));
    }
    Ok((values, vectors))
}

/// Smallest eigenvalue and an associated unit eigenvector.
pub fn min_eig(m: &SymMatrix) -> Result<(f64, DVector<f64>)> {
    let (values, vectors) = sym_eigen(m)?;
    let mut v: DVector<f64> = vectors.column(0).into_owned();
    let norm = v.norm();
    if norm > 0.0 {
        v /= norm;
    }
    Ok((values[0], v))
}

/// Largest eigenvalue.
pub fn max_eig(m: &SymMatrix) -> Result<f64> {
    let (values, _) = sym_eigen(m)?;
    Ok(values[values.len() - 1])
}

/// Outcome of a semidefiniteness test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdVerdict {
    pub is_psd: bool,
    pub min_eigenvalue: f64,
    /// Unit vector `v` with `vᵀMv = min_eigenvalue`; present only when the test fails.
    pub witness_direction: Option<Vec<f64>>,
}

/// Test `M ⪰ margin·I` up to [`psd_tolerance`].
pub fn psd_check(m: &SymMatrix, margin: f64) -> Result<PsdVerdict> {
    if !margin.is_finite() || margin < 0.0 {
        return Err(MatError::InvalidMatrix(format!("margin must be finite and >= 0, got {margin}")));
    }
    let (lmin, v) = min_eig(m)?;
    let is_psd = lmin >= margin - psd_tolerance();
    Ok(PsdVerdict {
        is_psd,
        min_eigenvalue: lmin,
        witness_direction: (!is_psd).then(|| v.iter().copied().collect()),
    })
}

/// Schur complement `A − BᵀC⁻¹B` of the block matrix `[[A, Bᵀ], [B, C]]`.
///
/// `C` must be positive definite; the reduced matrix is then PSD exactly when
/// the full block matrix is.
pub fn schur_reduce(a: &SymMatrix, b: &DMatrix<f64>, c: &SymMatrix) -> Result<SymMatrix> {
    if b.nrows() != c.dim() || b.ncols() != a.dim() {
        return Err(MatError::DimensionMismatch {
            expected: format!("B of shape {}x{}", c.dim(), a.dim()),
            found: format!("{}x{}", b.nrows(), b.ncols()),
        });
    }
    let chol = cholesky(c)?;
    let cinv_b = chol.solve(b);
    SymMatrix::new(a.as_matrix() - b.transpose() * cinv_b)
}

/// Assemble `[[A, Bᵀ], [B, C]]`.
pub fn block2(a: &SymMatrix, b: &DMatrix<f64>, c: &SymMatrix) -> Result<SymMatrix> {
    let (na, nc) = (a.dim(), c.dim());
    if b.nrows() != nc || b.ncols() != na {
        return Err(MatError::DimensionMismatch {
            expected: format!("B of shape {nc}x{na}"),
            found: format!("{}x{}", b.nrows(), b.ncols()),
        });
    }
    let mut m = DMatrix::zeros(na + nc, na + nc);
    m.view_mut((0, 0), (na, na)).copy_from(a.as_matrix());
    m.view_mut((na, 0), (nc, na)).copy_from(b);
    m.view_mut((0, na), (na, nc)).copy_from(&b.transpose());
    m.view_mut((na, na), (nc, nc)).copy_from(c.as_matrix());
    SymMatrix::new(m)
}

/// Cholesky factor `L` with `M = L Lᵀ`; fails with the offending pivot.
pub fn cholesky(m: &SymMatrix) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if !m.is_finite() {
        return Err(MatError::InvalidMatrix("non-finite entry".into()));
    }
    match m.0.clone().cholesky() {
        Some(c) => Ok(c),
        None => {
            let (lmin, _) = min_eig(m)?;
            Err(MatError::NotPositiveDefinite { pivot: 0, value: lmin })
        }
    }
}

/// Diagonally pivoted Cholesky used as an independent PSD test.
///
/// Returns `true` when every pivot encountered is at least `-tol`, stopping
/// once the largest remaining diagonal falls below `tol` (rank-deficient PSD).
pub fn pivoted_cholesky_psd(m: &SymMatrix, tol: f64) -> bool {
    let n = m.dim();
    let mut a = m.0.clone();
    let mut done = vec![false; n];
    for _ in 0..n {
        let (mut best, mut best_val) = (usize::MAX, f64::NEG_INFINITY);
        for i in 0..n {
            if !done[i] && a[(i, i)] > best_val {
                best = i;
                best_val = a[(i, i)];
            }
        }
        if best_val < -tol {
            return false;
        }
        if best_val <= tol {
            // remaining block must be (numerically) zero
            for i in 0..n {
                for j in 0..n {
                    if !done[i] && !done[j] && a[(i, j)].abs() > tol.sqrt() {
                        return false;
                    }
                }
            }
            return true;
        }
        let p = best;
        done[p] = true;
        let piv = a[(p, p)];
        for i in 0..n {
            if done[i] {
                continue;
            }
            let lip = a[(i, p)] / piv;
            for j in 0..n {
                if !done[j] {
                    a[(i, j)] -= lip * a[(p, j)];
                }
            }
        }
    }
    true
}

/// Inverse of a positive-definite matrix together with its 2-norm condition number.
pub fn inverse_spd(m: &SymMatrix) -> Result<(SymMatrix, f64)> {
    let chol = cholesky(m)?;
    let inv = SymMatrix::new(chol.inverse())?;
    let (values, _) = sym_eigen(m)?;
    let cond = values[values.len() - 1] / values[0];
    Ok((inv, cond))
}

/// Principal square root of a positive-semidefinite matrix.
pub fn sqrt_psd(m: &SymMatrix) -> Result<SymMatrix> {
    let (values, vectors) = sym_eigen(m)?;
    if values[0] < -psd_tolerance() {
        return Err(MatError::NotPositiveDefinite { pivot: 0, value: values[0] });
    }
    let d = DMatrix::from_diagonal(&values.map(|v| v.max(0.0).sqrt()));
    SymMatrix::new(&vectors * d * vectors.transpose())
}

/// Extremal generalized eigenvalues of the pencil `(M, B)` with `B ≻ 0`:
/// the largest `a` and smallest `b` such that `a·B ⪯ M ⪯ b·B`.
pub fn relative_bounds(m: &SymMatrix, base: &SymMatrix) -> Result<(f64, f64)> {
    let root = sqrt_psd(base)?;
    let (root_inv, _) = inverse_spd(&root)?;
    let w = m.congruence(root_inv.as_matrix())?;
    let (values, _) = sym_eigen(&w)?;
    Ok((values[0], values[values.len() - 1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> SymMatrix {
        SymMatrix::from_diagonal(v).unwrap()
    }

    #[test]
    fn identity_min_eig_is_one() {
        let (l, v) = min_eig(&SymMatrix::identity(3)).unwrap();
        assert!((l - 1.0).abs() < 1e-14);
        assert!((v.norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn diagonal_min_eig_picks_second_axis() {
        let (l, v) = min_eig(&diag(&[2.0, -1.0])).unwrap();
        assert!((l + 1.0).abs() < 1e-14);
        assert!((v[1].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn construction_symmetrizes() {
        let m = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0])).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(1, 0), 1.0);
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(SymMatrix::new(DMatrix::from_element(1, 1, f64::NAN)).is_err());
        assert!(SymMatrix::new(DMatrix::zeros(0, 0)).is_err());
        assert!(SymMatrix::new(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn psd_check_examples() {
        let v = psd_check(&SymMatrix::identity(3), 0.5).unwrap();
        assert!(v.is_psd);
        assert!(v.witness_direction.is_none());

        let v = psd_check(&diag(&[1.0, -1e-3]), 0.0).unwrap();
        assert!(!v.is_psd);
        let w = v.witness_direction.unwrap();
        assert!((w[1].abs() - 1.0).abs() < 1e-12);
        assert!((v.min_eigenvalue + 1e-3).abs() < 1e-15);
    }

    #[test]
    fn schur_reduce_identity_blocks() {
        let a = SymMatrix::identity(2).scale(2.0);
        let b = DMatrix::identity(2, 2);
        let c = SymMatrix::identity(2);
        let r = schur_reduce(&a, &b, &c).unwrap();
        assert!((r.as_matrix() - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
        let full = block2(&a, &b, &c).unwrap();
        assert!(psd_check(&full, 0.0).unwrap().is_psd);
        assert!(psd_check(&r, 0.0).unwrap().is_psd);
    }

    #[test]
    fn schur_reduce_scalar_indefinite() {
        let a = SymMatrix::scalar(1.0).unwrap();
        let b = DMatrix::from_element(1, 1, 2.0);
        let c = SymMatrix::scalar(1.0).unwrap();
        let r = schur_reduce(&a, &b, &c).unwrap();
        assert!((r.get(0, 0) + 3.0).abs() < 1e-14);
        assert!(!psd_check(&block2(&a, &b, &c).unwrap(), 0.0).unwrap().is_psd);
    }

    #[test]
    fn schur_reduce_rejects_indefinite_lower_block() {
        let a = SymMatrix::scalar(1.0).unwrap();
        let b = DMatrix::from_element(1, 1, 0.0);
        let c = SymMatrix::scalar(-1.0).unwrap();
        assert!(matches!(
            schur_reduce(&a, &b, &c),
            Err(MatError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn relative_bounds_diagonal() {
        let (lo, hi) = relative_bounds(&diag(&[4.0, 1.0]), &diag(&[2.0, 1.0])).unwrap();
        assert!((lo - 1.0).abs() < 1e-12);
        assert!((hi - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tolerance_knob_round_trips() {
        assert_eq!(psd_tolerance(), DEFAULT_PSD_TOLERANCE);
    }

    #[test]
    fn serde_round_trip() {
        let m = SymMatrix::from_row_slice(2, &[1.0, 0.5, 0.5, 3.0]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: SymMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
    }
}
