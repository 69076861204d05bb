//! Small dense helpers shared by the model and likelihood code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Reciprocal-condition floor below which a factorization counts as singular.
pub const RCOND_MIN: f64 = 1e-12;

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// Construction fails on a non-positive pivot, on non-finite entries, or when
/// the pivot-ratio estimate of the reciprocal condition number falls below
/// [`RCOND_MIN`].
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let chol = Cholesky::new(m.clone())?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        if !(lo > 0.0) || (lo / hi).powi(2) < RCOND_MIN {
            return None;
        }
        Some(Self { chol })
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.chol.inverse())
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Factor `F` with `F Fᵀ = m` for a symmetric positive semidefinite `m`, via its
/// eigendecomposition; negative round-off eigenvalues are clamped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Max-abs relative difference `‖a − b‖_max / max(‖b‖_max, tiny)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(&(a - b)) / max_abs(b).max(f64::MIN_POSITIVE)
}
