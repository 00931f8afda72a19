//! Isometry-invariant descriptors: geodesic-disk area distortion ("finger prints") and
//! canonical forms by least-squares multidimensional scaling.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{fast_marching, fast_marching_bounded, geodesic_disk_areas, TriangleMesh};
use crate::transform::umeyama;

pub const DEFAULT_RADII: [f64; 8] = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0];

/// Area distortions `d(r) = A(r) / (pi r^2)` of geodesic disks around one vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerPrint {
    pub radii: Vec<f64>,
    pub distortions: Vec<f64>,
    /// The disk of that radius was cut by the mesh boundary.
    pub truncated: Vec<bool>,
}

impl FingerPrint {
    pub fn is_truncated(&self) -> bool {
        self.truncated.iter().any(|&t| t)
    }

    pub fn len(&self) -> usize {
        self.distortions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distortions.is_empty()
    }
}

pub fn validate_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() {
        return Err(Error::InvalidArgument("descriptor radii are empty".into()));
    }
    if !radii.iter().all(|&r| r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument("descriptor radii must be positive".into()));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("descriptor radii must be strictly increasing".into()));
    }
    Ok(())
}

pub fn finger_print(mesh: &TriangleMesh, vertex: usize, radii: &[f64]) -> Result<FingerPrint> {
    validate_radii(radii)?;
    let rmax = *radii.last().unwrap();
    let field = fast_marching_bounded(mesh, vertex, rmax)?;
    let areas = geodesic_disk_areas(mesh, &field, radii)?;
    let mut distortions = Vec::with_capacity(radii.len());
    for (a, &r) in areas.iter().zip(radii) {
        if !(a.area > 0.0) {
            return Err(Error::Degenerate(format!(
                "vertex {vertex} has an empty geodesic disk of radius {r}"
            )));
        }
        distortions.push(a.area / (PI * r * r));
    }
    Ok(FingerPrint {
        radii: radii.to_vec(),
        distortions,
        truncated: areas.iter().map(|a| a.truncated()).collect(),
    })
}

/// [`finger_print`] for many vertices, computed in parallel. Output follows `vertices`.
pub fn finger_prints(mesh: &TriangleMesh, vertices: &[usize], radii: &[f64]) -> Result<Vec<FingerPrint>> {
    validate_radii(radii)?;
    vertices
        .par_iter()
        .map(|&v| finger_print(mesh, v, radii))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdsOptions {
    pub samples: usize,
    pub max_iter: usize,
    /// Relative stress change below which majorization stops.
    pub tol: f64,
}

impl Default for MdsOptions {
    fn default() -> Self {
        Self {
            samples: 500,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Embedding of sampled vertices in R^3 whose Euclidean distances approximate geodesic ones.
///
/// Coordinates are centered, oriented so that the first four samples span a positive
/// tetrahedron, then rotated (possibly reflected) to best match the mesh's own centered
/// sample positions. Reflection-sensitive consumers therefore see the mesh's handedness.
#[derive(Debug, Clone)]
pub struct CanonicalForm {
    pub samples: Vec<usize>,
    pub coords: Vec<Point3<f64>>,
    /// Normalized stress `sum (d - delta)^2 / sum delta^2` after the last iteration.
    pub stress: f64,
    pub stress_history: Vec<f64>,
    /// Geodesic distances from every sample to every vertex.
    fields: Vec<Vec<f64>>,
}

impl CanonicalForm {
    /// Geodesic distances from vertex `v` to each sample.
    pub fn sample_distances(&self, v: usize) -> Vec<f64> {
        self.fields.iter().map(|f| f[v]).collect()
    }

    /// Canonical coordinates of any vertex: samples map to their embedded position, other
    /// vertices are placed by majorizing their stress against the fixed sample embedding.
    pub fn embed_vertex(&self, v: usize) -> Result<Point3<f64>> {
        let n = self.fields.first().map_or(0, |f| f.len());
        if v >= n {
            return Err(Error::OutOfRange { index: v, len: n });
        }
        if let Some(k) = self.samples.iter().position(|&s| s == v) {
            return Ok(self.coords[k]);
        }
        let delta = self.sample_distances(v);
        if let Some(k) = delta.iter().position(|d| !d.is_finite()) {
            return Err(Error::Disconnected {
                a: v,
                b: self.samples[k],
            });
        }
        let (nearest, _) = delta
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let mut x = self.coords[nearest].coords;
        let scale = delta.iter().sum::<f64>() / delta.len() as f64;
        let m = self.coords.len() as f64;
        for _ in 0..200 {
            let mut next = Vector3::zeros();
            for (c, &d) in self.coords.iter().zip(&delta) {
                let diff = x - c.coords;
                let len = diff.norm();
                next += c.coords;
                if len > 1e-12 {
                    next += diff * (d / len);
                }
            }
            next /= m;
            let step = (next - x).norm();
            x = next;
            if step < 1e-10 * scale.max(1.0) {
                break;
            }
        }
        Ok(Point3::from(x))
    }
}

/// Geodesic farthest-point sampling. The first sample is the vertex farthest from vertex 0.
/// Returns the samples and each sample's full distance field.
pub fn farthest_point_sampling(mesh: &TriangleMesh, count: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let n = mesh.vertex_count();
    let count = count.min(n);
    if count == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let f0 = fast_marching(mesh, 0)?;
    let first = argmax_dist(&f0.dist, 0)?;
    let mut samples = vec![first];
    let mut fields = vec![fast_marching(mesh, first)?.dist];
    let mut nearest = fields[0].clone();
    while samples.len() < count {
        let next = argmax_dist(&nearest, samples[0])?;
        if nearest[next] == 0.0 {
            break;
        }
        let f = fast_marching(mesh, next)?.dist;
        for (m, d) in nearest.iter_mut().zip(&f) {
            *m = m.min(*d);
        }
        samples.push(next);
        fields.push(f);
    }
    Ok((samples, fields))
}

/// Index of the largest distance. Values within a relative 1e-9 of the maximum count as
/// ties and resolve to the lowest index, so round-off from a rigid motion cannot change
/// the choice on symmetric meshes.
fn argmax_dist(dist: &[f64], from: usize) -> Result<usize> {
    if let Some(v) = dist.iter().position(|d| d.is_infinite()) {
        return Err(Error::Disconnected { a: from, b: v });
    }
    let max = dist.iter().copied().fold(0.0, f64::max);
    Ok(dist.iter().position(|&d| d >= max * (1.0 - 1e-9)).unwrap_or(0))
}

/// Canonical form over `samples`, using geodesic distances as dissimilarities.
pub fn canonical_form(mesh: &TriangleMesh, samples: &[usize], opts: &MdsOptions) -> Result<CanonicalForm> {
    if samples.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "canonical form needs >= 4 samples, got {}",
            samples.len()
        )));
    }
    let fields: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|&s| fast_marching(mesh, s).map(|f| f.dist))
        .collect::<Result<_>>()?;
    build_form(mesh, samples.to_vec(), fields, opts)
}

/// Canonical form over a farthest-point subsample of `opts.samples` vertices.
pub fn canonical_form_sampled(mesh: &TriangleMesh, opts: &MdsOptions) -> Result<CanonicalForm> {
    let (samples, fields) = farthest_point_sampling(mesh, opts.samples)?;
    if samples.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "mesh yields only {} distinct samples",
            samples.len()
        )));
    }
    build_form(mesh, samples, fields, opts)
}

fn build_form(
    mesh: &TriangleMesh,
    samples: Vec<usize>,
    fields: Vec<Vec<f64>>,
    opts: &MdsOptions,
) -> Result<CanonicalForm> {
    let m = samples.len();
    let mut delta = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let d = 0.5 * (fields[i][samples[j]] + fields[j][samples[i]]);
            if !d.is_finite() {
                return Err(Error::Disconnected {
                    a: samples[i],
                    b: samples[j],
                });
            }
            delta[(i, j)] = d;
        }
    }
    let positions: Vec<Point3<f64>> = samples.iter().map(|&s| mesh.vertex(s)).collect();
    let centroid = positions.iter().map(|p| p.coords).sum::<Vector3<f64>>() / m as f64;
    let centered: Vec<Point3<f64>> = positions.iter().map(|p| Point3::from(p.coords - centroid)).collect();
    let (mut coords, history) = smacof(&delta, classical_mds(&delta), opts)?;

    if signed_volume(&coords[..4]) < 0.0 {
        for c in &mut coords {
            c.x = -c.x;
        }
    }
    if let Ok(t) = umeyama(&coords, &centered, false, true) {
        for c in &mut coords {
            *c = Point3::from(t.rotation * c.coords);
        }
    }
    let stress = *history.last().unwrap();
    Ok(CanonicalForm {
        samples,
        coords,
        stress,
        stress_history: history,
        fields,
    })
}

/// Classical (Torgerson) scaling to three dimensions. Depends on the dissimilarities only;
/// each axis is signed so that its largest-magnitude coordinate is positive.
fn classical_mds(delta: &DMatrix<f64>) -> Vec<Point3<f64>> {
    let m = delta.nrows();
    let sq = delta.map(|d| d * d);
    let row_mean = DVector::from_fn(m, |i, _| sq.row(i).mean());
    let total = row_mean.mean();
    let b = DMatrix::from_fn(m, m, |i, j| -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + total));
    let eig = nalgebra::SymmetricEigen::new(b);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = vec![[0.0; 3]; m];
    for (k, &e) in idx.iter().take(3).enumerate() {
        let scale = eig.eigenvalues[e].max(0.0).sqrt();
        let col = eig.eigenvectors.column(e);
        let pivot = col.iter().copied().fold(0.0, |best: f64, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, a) in axes.iter_mut().enumerate() {
            a[k] = sign * scale * col[i];
        }
    }
    axes.into_iter().map(|a| Point3::new(a[0], a[1], a[2])).collect()
}

fn signed_volume(p: &[Point3<f64>]) -> f64 {
    (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[3] - p[0]))
}

fn normalized_stress(delta: &DMatrix<f64>, x: &[Point3<f64>], norm: f64) -> f64 {
    let m = x.len();
    let mut s = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let e = (x[i] - x[j]).norm() - delta[(i, j)];
            s += e * e;
        }
    }
    s / norm
}

/// SMACOF majorization with unit weights. Returns centered coordinates and the normalized
/// stress after each iteration (the first entry is the stress of `init`).
pub fn smacof(
    delta: &DMatrix<f64>,
    init: Vec<Point3<f64>>,
    opts: &MdsOptions,
) -> Result<(Vec<Point3<f64>>, Vec<f64>)> {
    let m = init.len();
    if delta.nrows() != m || delta.ncols() != m {
        return Err(Error::InvalidArgument("dissimilarity matrix does not match the points".into()));
    }
    if delta.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::InvalidArgument("dissimilarities must be finite and non-negative".into()));
    }
    let norm: f64 = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .map(|(i, j)| delta[(i, j)].powi(2))
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let centroid = init.iter().map(|p| p.coords).sum::<Vector3<f64>>() / m as f64;
    let mut x: Vec<Point3<f64>> = init.iter().map(|p| Point3::from(p.coords - centroid)).collect();
    let mut history = vec![normalized_stress(delta, &x, norm)];
    for _ in 0..opts.max_iter {
        // Guttman transform: X <- B(X) X / m
        let next: Vec<Point3<f64>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut acc = Vector3::zeros();
                for j in 0..m {
                    if i == j {
                        continue;
                    }
                    let diff = x[i] - x[j];
                    let d = diff.norm();
                    if d > 1e-12 {
                        acc += diff * (delta[(i, j)] / d);
                    }
                }
                Point3::from(acc / m as f64)
            })
            .collect();
        x = next;
        let s = normalized_stress(delta, &x, norm);
        let prev = *history.last().unwrap();
        history.push(s);
        if s <= 1e-16 || (prev - s) <= opts.tol * prev {
            break;
        }
    }
    Ok((x, history))
}
