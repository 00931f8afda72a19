//! Gaussian maximum-likelihood potentials and principal component analysis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::repr;
use crate::error::{Error, Result};

/// Multivariate normal with a regularized covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPotential {
    #[serde(with = "repr::dvector")]
    pub mean: DVector<f64>,
    #[serde(with = "repr::dmatrix")]
    pub covariance: DMatrix<f64>,
}

/// Absolute ridge used when the samples have no spread at all.
const RIDGE_FLOOR: f64 = 1e-12;

impl GaussianPotential {
    /// Biased (1/n) MLE plus a ridge of `ridge * trace / dim` on the diagonal. The flag is
    /// true when the unregularized covariance was singular.
    pub fn fit(samples: &[DVector<f64>], ridge: f64) -> Result<(Self, bool)> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidArgument("Gaussian fit needs at least one sample".into()));
        };
        let dim = first.len();
        if dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(Error::InvalidArgument("Gaussian samples have inconsistent dimension".into()));
        }
        if samples.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("Gaussian sample".into()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().fold(DVector::zeros(dim), |acc, s| acc + s) / n;
        let mut cov = DMatrix::zeros(dim, dim);
        for s in samples {
            let d = s - &mean;
            cov += &d * d.transpose();
        }
        cov /= n;
        let trace = cov.trace();
        let singular = {
            let ev = cov.clone().symmetric_eigenvalues();
            ev.min() <= 1e-12 * trace.max(0.0) || trace <= 0.0
        };
        let lambda = (ridge * trace / dim as f64).max(RIDGE_FLOOR);
        for k in 0..dim {
            cov[(k, k)] += lambda;
        }
        Ok((
            Self {
                mean,
                covariance: cov,
            },
            singular,
        ))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Precomputed evaluator of the log density.
    pub fn log_density(&self) -> Result<LogDensity> {
        let chol = self
            .covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Schema("covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let dim = self.dim() as f64;
        Ok(LogDensity {
            mean: self.mean.clone(),
            precision,
            log_norm: -0.5 * (log_det + dim * (2.0 * std::f64::consts::PI).ln()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LogDensity {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl LogDensity {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = self.mean.len();
        let mut q = 0.0;
        for i in 0..n {
            let di = x[i] - self.mean[i];
            let mut row = 0.0;
            for j in 0..n {
                row += self.precision[(i, j)] * (x[j] - self.mean[j]);
            }
            q += di * row;
        }
        self.log_norm - 0.5 * q
    }
}

/// Principal subspace of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pca {
    #[serde(with = "repr::dvector")]
    pub mean: DVector<f64>,
    /// `D x S`, one orthonormal principal direction per row, by decreasing variance.
    #[serde(with = "repr::dmatrix")]
    pub components: DMatrix<f64>,
    /// Fraction of total variance carried by each retained direction.
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    /// Fits `d` principal directions. Fails when there are fewer than `d + 1` samples or no
    /// variance at all; a numerically lower rank is accepted with near-zero trailing ratios.
    pub fn fit(samples: &[DVector<f64>], d: usize) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::RankDeficient {
                achieved: 0,
                required: d,
            });
        };
        let s = first.len();
        if d == 0 || d > s {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {d} components of {s}-dimensional data"
            )));
        }
        if samples.iter().any(|x| x.len() != s) {
            return Err(Error::InvalidArgument("PCA samples have inconsistent dimension".into()));
        }
        if samples.len() < d + 1 {
            return Err(Error::RankDeficient {
                achieved: samples.len().saturating_sub(1),
                required: d,
            });
        }
        let n = samples.len() as f64;
        let mean = samples.iter().fold(DVector::zeros(s), |acc, x| acc + x) / n;
        let mut cov = DMatrix::zeros(s, s);
        for x in samples {
            let c = x - &mean;
            cov += &c * c.transpose();
        }
        cov /= n;
        let total = cov.trace();
        if !(total > 0.0) {
            return Err(Error::RankDeficient {
                achieved: 0,
                required: d,
            });
        }
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let rank = order
            .iter()
            .filter(|&&k| eig.eigenvalues[k] > 1e-12 * total)
            .count();
        if rank < d {
            log::warn!("PCA input has numerical rank {rank} < {d}");
        }
        let mut components = DMatrix::zeros(d, s);
        let mut explained_ratio = Vec::with_capacity(d);
        for (row, &k) in order.iter().take(d).enumerate() {
            let mut v = eig.eigenvectors.column(k).into_owned();
            // sign convention: largest-magnitude entry positive
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v = -v;
            }
            components.row_mut(row).copy_from(&v.transpose());
            explained_ratio.push(eig.eigenvalues[k].max(0.0) / total);
        }
        Ok(Self {
            mean,
            components,
            explained_ratio,
        })
    }

    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.components * (x - &self.mean)
    }
}
