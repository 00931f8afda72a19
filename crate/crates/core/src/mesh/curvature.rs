//! Principal curvatures by local quadric fitting, and umbilic detection.

use nalgebra::{DMatrix, DVector, Matrix2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TriangleMesh;

/// Per-vertex principal curvatures in 1/mm, `k1 >= k2`. Positive curvature means the
/// surface bends away from its outer normal (a sphere with outward normals has `1/R`).
#[derive(Debug, Clone)]
pub struct PrincipalCurvatures {
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    /// False on boundary vertices and where the quadric fit is underdetermined.
    pub reliable: Vec<bool>,
}

impl PrincipalCurvatures {
    pub fn anisotropy(&self, v: usize) -> f64 {
        (self.k1[v] - self.k2[v]).abs()
    }
}

fn two_ring(mesh: &TriangleMesh, v: usize) -> Vec<usize> {
    let mut ring: Vec<usize> = mesh.neighbors(v).to_vec();
    for &n in mesh.neighbors(v) {
        ring.extend_from_slice(mesh.neighbors(n));
    }
    ring.sort_unstable();
    ring.dedup();
    ring.retain(|&u| u != v);
    ring
}

fn tangent_frame(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = (helper - n * n.dot(&helper)).normalize();
    let w = n.cross(&u);
    (u, w)
}

/// Fits `z = a x^2 + b xy + c y^2 + d x + e y` in the normal-aligned frame and returns
/// `(k1, k2)`, or `None` when fewer than five distinct neighbors are available.
fn fit_vertex(mesh: &TriangleMesh, v: usize) -> Option<(f64, f64)> {
    let ring = two_ring(mesh, v);
    if ring.len() < 5 {
        return None;
    }
    let p = mesh.vertex(v);
    let n = mesh.normal(v);
    let (u, w) = tangent_frame(&n);
    let rows = ring.len();
    let mut a = DMatrix::zeros(rows, 5);
    let mut b = DVector::zeros(rows);
    // scale by the mean neighbor distance to keep the system well conditioned
    let scale = ring
        .iter()
        .map(|&q| (mesh.vertex(q) - p).norm())
        .sum::<f64>()
        / rows as f64;
    if scale <= 0.0 {
        return None;
    }
    for (r, &q) in ring.iter().enumerate() {
        let d = (mesh.vertex(q) - p) / scale;
        let (x, y, z) = (d.dot(&u), d.dot(&w), d.dot(&n));
        a[(r, 0)] = x * x;
        a[(r, 1)] = x * y;
        a[(r, 2)] = y * y;
        a[(r, 3)] = x;
        a[(r, 4)] = y;
        b[r] = z;
    }
    let svd = a.svd(true, true);
    let s = &svd.singular_values;
    let smax = s.max();
    if smax <= 0.0 || s.min() < smax * 1e-10 {
        return None;
    }
    let c = svd.solve(&b, 1e-14).ok()?;
    // undo the coordinate scaling: second-order terms carry 1/scale
    let (fxx, fxy, fyy) = (2.0 * c[0] / scale, c[1] / scale, 2.0 * c[2] / scale);
    let (fx, fy) = (c[3], c[4]);
    let wlen = (1.0 + fx * fx + fy * fy).sqrt();
    let first = Matrix2::new(1.0 + fx * fx, fx * fy, fx * fy, 1.0 + fy * fy);
    let second = Matrix2::new(fxx, fxy, fxy, fyy) / wlen;
    let shape = first.try_inverse()? * second;
    // eigenvalues of a 2x2 matrix similar to a symmetric one are real
    let tr = shape.trace();
    let det = shape.determinant();
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (e1, e2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    // the frame's z axis is the outer normal, so convex surfaces have negative fxx
    let (k1, k2) = (-e2, -e1);
    Some((k1, k2))
}

pub fn principal_curvatures(mesh: &TriangleMesh) -> PrincipalCurvatures {
    let fits: Vec<Option<(f64, f64)>> = (0..mesh.vertex_count())
        .into_par_iter()
        .map(|v| fit_vertex(mesh, v))
        .collect();
    let mut k1 = Vec::with_capacity(fits.len());
    let mut k2 = Vec::with_capacity(fits.len());
    let mut reliable = Vec::with_capacity(fits.len());
    for (v, f) in fits.into_iter().enumerate() {
        let (a, b) = f.unwrap_or((0.0, 0.0));
        k1.push(a);
        k2.push(b);
        reliable.push(f.is_some() && !mesh.is_boundary(v));
    }
    PrincipalCurvatures { k1, k2, reliable }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UmbilicParams {
    /// Relative threshold on `|k1 - k2|`.
    pub eps: f64,
    /// Curvature floor in 1/mm used in the relative criterion.
    pub k_floor: f64,
    /// Number of lowest-anisotropy vertices returned when the strict set is empty.
    pub fallback: usize,
}

impl Default for UmbilicParams {
    fn default() -> Self {
        Self {
            eps: 0.2,
            k_floor: 1e-4,
            fallback: 200,
        }
    }
}

/// Vertices where the principal curvatures (nearly) coincide. Boundary and unreliable
/// vertices are never returned. Output is sorted by vertex id.
pub fn detect_umbilics(
    mesh: &TriangleMesh,
    curv: &PrincipalCurvatures,
    params: &UmbilicParams,
) -> Vec<usize> {
    let candidates: Vec<usize> = (0..mesh.vertex_count())
        .filter(|&v| curv.reliable[v])
        .collect();
    let strict: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&v| {
            let scale = curv.k1[v].abs().max(curv.k2[v].abs()).max(params.k_floor);
            curv.anisotropy(v) <= params.eps * scale
        })
        .collect();
    if !strict.is_empty() {
        return strict;
    }
    let mut ranked = candidates;
    ranked.sort_by(|&a, &b| {
        curv.anisotropy(a)
            .total_cmp(&curv.anisotropy(b))
            .then(a.cmp(&b))
    });
    ranked.truncate(params.fallback);
    ranked.sort_unstable();
    ranked
}
