use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Mean and covariance of a Gaussian over the state (or any stacked vector).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "belief covariance",
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        Ok(GaussianBelief { mean, cov })
    }

    pub fn point(mean: DVector<f64>) -> Self {
        let n = mean.len();
        GaussianBelief {
            mean,
            cov: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks symmetry within 1e-10 and eigenvalues above -1e-9.
    pub fn check_invariants(&self) -> Result<()> {
        let asym = linalg::max_asymmetry(&self.cov);
        if asym > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "covariance asymmetric by {asym:e}"
            )));
        }
        let min = linalg::min_eigenvalue(&self.cov);
        if min < -linalg::PSD_TOLERANCE {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
            });
        }
        Ok(())
    }
}
