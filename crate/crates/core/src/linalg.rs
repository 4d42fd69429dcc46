//! Small dense linear-algebra helpers shared by the model, planner and objectives.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter ladder applied to the mean diagonal when a plain Cholesky fails.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Eigenvalues below this are treated as a genuine loss of positive semi-definiteness.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// A Cholesky factor together with the absolute jitter that made it succeed.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn log_det(&self) -> f64 {
        let l = self.factor.l_dirty();
        (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }
}

/// Cholesky factorization with the jitter ladder: plain first, then
/// `JITTER_LADDER[k] * mean(diag)` added to the diagonal.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<JitteredCholesky> {
    if let Some(factor) = Cholesky::new(m.clone()) {
        if factor_is_finite(&factor) {
            return Ok(JitteredCholesky { factor, jitter: 0.0 });
        }
    }
    let n = m.nrows();
    let mean_diag = if n == 0 { 1.0 } else { m.trace().abs() / n as f64 };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut tried = Vec::with_capacity(JITTER_LADDER.len());
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        tried.push(jitter);
        let mut jittered = m.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(jittered) {
            if factor_is_finite(&factor) {
                return Ok(JitteredCholesky { factor, jitter });
            }
        }
    }
    Err(Error::IllConditioned { jitters: tried })
}

fn factor_is_finite(f: &Cholesky<f64, Dyn>) -> bool {
    f.l_dirty().iter().all(|v| v.is_finite())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetrizes and, when the smallest eigenvalue is a small negative rounding
/// artifact, clips it to zero. Larger violations are reported as errors.
pub fn project_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok(sym);
    }
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    Ok(symmetrize(&rebuilt))
}

/// Extracts the sub-matrix for the given row/column indices.
pub fn sub_matrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

pub fn sub_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Log-determinant of a general square matrix through LU.
pub fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    let lu = m.clone().lu();
    let u = lu.u();
    (0..u.nrows()).map(|i| u[(i, i)].abs().ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_cholesky_uses_no_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = cholesky_with_jitter(&m).unwrap();
        assert_eq!(c.jitter, 0.0);
        assert!((c.log_det() - (2.0 * 1.0 - 0.25_f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_needs_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = cholesky_with_jitter(&m).unwrap();
        assert!(c.jitter > 0.0);
        assert!(c.jitter <= 1e-6);
    }

    #[test]
    fn indefinite_matrix_reports_ladder() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match cholesky_with_jitter(&m) {
            Err(Error::IllConditioned { jitters }) => assert_eq!(jitters.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn psd_projection_clips_rounding_only() {
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let p = project_psd(&tiny).unwrap();
        assert!(min_eigenvalue(&p) >= -1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(project_psd(&bad).is_err());
    }
}
