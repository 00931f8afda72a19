//! Medoid-centred outlier pruning ("M-clusters") and minimum-volume enclosing ellipsoids.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::repr;
use crate::error::{Error, Result};

pub const MVEE_TOL: f64 = 1e-4;
pub const MVEE_MAX_ITER: usize = 10_000;
/// Half-width given to an ellipsoid along directions in which its points have no extent.
pub const MVEE_INFLATE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MCluster {
    pub medoid: usize,
    /// Population standard deviation of the distances to the medoid.
    pub sigma: f64,
    /// Retained point indices, ascending. Always contains the medoid.
    pub members: Vec<usize>,
}

/// Index minimizing the summed distance to all other points (lowest index on ties).
pub fn medoid(points: &[DVector<f64>]) -> Option<usize> {
    let sums: Vec<f64> = points
        .iter()
        .map(|p| points.iter().map(|q| (p - q).norm()).sum())
        .collect();
    (0..points.len()).min_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(a.cmp(&b)))
}

/// Keeps the points within `m * sigma` of the medoid.
pub fn m_cluster(points: &[DVector<f64>], m: f64) -> Result<MCluster> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("M-cluster of an empty set".into()));
    }
    if !(m > 0.0) {
        return Err(Error::InvalidArgument(format!("M must be positive, got {m}")));
    }
    let med = medoid(points).unwrap();
    let dist: Vec<f64> = points.iter().map(|p| (p - &points[med]).norm()).collect();
    let n = dist.len() as f64;
    // Root-mean-square deviation about the medoid.
    let sigma = (dist.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let members = (0..points.len())
        .filter(|&i| i == med || dist[i] <= m * sigma)
        .collect();
    Ok(MCluster {
        medoid: med,
        sigma,
        members,
    })
}

/// `{p : (p - center)^T shape (p - center) <= 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    #[serde(with = "repr::dvector")]
    pub center: DVector<f64>,
    #[serde(with = "repr::dmatrix")]
    pub shape: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn membership(&self, p: &DVector<f64>) -> f64 {
        let d = p - &self.center;
        (d.transpose() * &self.shape * &d)[0]
    }

    pub fn contains(&self, p: &DVector<f64>) -> bool {
        self.membership(p) <= 1.0
    }

    /// Semi-axis lengths, ascending.
    pub fn semi_axes(&self) -> Vec<f64> {
        let mut ax: Vec<f64> = self
            .shape
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .map(|&l| 1.0 / l.sqrt())
            .collect();
        ax.sort_by(f64::total_cmp);
        ax
    }
}

/// Khachiyan's algorithm for the minimum-volume ellipsoid enclosing `points`.
///
/// Iterates until the largest lifted leverage is within `(d + 1)(1 + tol)`, then scales the
/// shape so every input has membership at most 1. Directions without extent are padded by
/// [`MVEE_INFLATE`] on both sides of the centroid first.
pub fn mvee(points: &[DVector<f64>], tol: f64, max_iter: usize) -> Result<Ellipsoid> {
    let Some(first) = points.first() else {
        return Err(Error::InvalidArgument("MVEE of an empty set".into()));
    };
    let d = first.len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidArgument("MVEE points have inconsistent dimension".into()));
    }
    let n0 = points.len() as f64;
    let centroid = points.iter().fold(DVector::zeros(d), |a, p| a + p) / n0;
    let mut scatter = DMatrix::zeros(d, d);
    for p in points {
        let c = p - &centroid;
        scatter += &c * c.transpose();
    }
    scatter /= n0;
    let eig = scatter.symmetric_eigen();
    let emax = eig.eigenvalues.max().max(0.0);
    let mut pts: Vec<DVector<f64>> = points.to_vec();
    for k in 0..d {
        if eig.eigenvalues[k] <= 1e-12 * emax || emax == 0.0 {
            let u = eig.eigenvectors.column(k).into_owned();
            pts.push(&centroid + &u * MVEE_INFLATE);
            pts.push(&centroid - &u * MVEE_INFLATE);
        }
    }

    // whiten for conditioning; the MVEE is affine-equivariant
    let n = pts.len();
    let mean = pts.iter().fold(DVector::zeros(d), |a, p| a + p) / n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for p in &pts {
        let c = p - &mean;
        cov += &c * c.transpose();
    }
    cov /= n as f64;
    let ce = cov.symmetric_eigen();
    let mut w = DMatrix::zeros(d, d);
    let mut w_inv = DMatrix::zeros(d, d);
    for k in 0..d {
        let l = ce.eigenvalues[k].max(f64::MIN_POSITIVE).sqrt();
        let v = ce.eigenvectors.column(k);
        w.row_mut(k).copy_from(&(v.transpose() / l));
        w_inv.column_mut(k).copy_from(&(v * l));
    }
    let white: Vec<DVector<f64>> = pts.iter().map(|p| &w * (p - &mean)).collect();

    let mut q = DMatrix::from_element(d + 1, n, 1.0);
    for (j, p) in white.iter().enumerate() {
        q.view_mut((0, j), (d, 1)).copy_from(p);
    }
    let mut u = DVector::from_element(n, 1.0 / n as f64);
    let dd = d as f64;
    for _ in 0..max_iter {
        let mut x = DMatrix::zeros(d + 1, d + 1);
        for j in 0..n {
            let c = q.column(j);
            x += c * c.transpose() * u[j];
        }
        let x_inv = x
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("MVEE moment matrix is singular".into()))?;
        let mut jmax = 0;
        let mut mmax = f64::NEG_INFINITY;
        for j in 0..n {
            let c = q.column(j);
            let mj = (c.transpose() * &x_inv * c)[0];
            if mj > mmax {
                mmax = mj;
                jmax = j;
            }
        }
        if mmax <= (dd + 1.0) * (1.0 + tol) {
            break;
        }
        let step = (mmax - dd - 1.0) / ((dd + 1.0) * (mmax - 1.0));
        u *= 1.0 - step;
        u[jmax] += step;
    }
    let c = white.iter().zip(u.iter()).fold(DVector::zeros(d), |a, (p, &uj)| a + p * uj);
    let mut spread = DMatrix::zeros(d, d);
    for (p, &uj) in white.iter().zip(u.iter()) {
        spread += p * p.transpose() * uj;
    }
    spread -= &c * c.transpose();
    let a_white = spread
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("MVEE shape is singular".into()))?
        / dd;
    let mut shape = w.transpose() * a_white * &w;
    shape = (&shape + shape.transpose()) * 0.5;
    let center = &mean + &w_inv * c;
    let mut e = Ellipsoid { center, shape };
    let worst = pts.iter().map(|p| e.membership(p)).fold(0.0, f64::max);
    if worst > 1.0 {
        e.shape /= worst;
    }
    Ok(e)
}
