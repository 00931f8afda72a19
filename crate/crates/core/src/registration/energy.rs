//! Registration energies with analytic gradients.
//!
//! Per-vertex transforms are stored as 12 parameters per vertex: the columns `a1, a2, a3`
//! of the linear block followed by the translation.

use nalgebra::{DVector, Matrix3x4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::{BlendshapeRig, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::optim::Evaluation;

/// One 3x4 affine transform per template vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexTransforms {
    params: DVector<f64>,
}

impl VertexTransforms {
    pub fn identity(n: usize) -> Self {
        let mut params = DVector::zeros(12 * n);
        for i in 0..n {
            params[12 * i] = 1.0;
            params[12 * i + 4] = 1.0;
            params[12 * i + 8] = 1.0;
        }
        Self { params }
    }

    pub fn from_params(params: DVector<f64>) -> Result<Self> {
        if params.len() % 12 != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} transform parameters is not a multiple of 12",
                params.len()
            )));
        }
        if !params.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("vertex transform".into()));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &DVector<f64> {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len() / 12
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn matrix(&self, i: usize) -> Matrix3x4<f64> {
        Matrix3x4::from_column_slice(&self.params.as_slice()[12 * i..12 * i + 12])
    }

    pub fn apply(&self, i: usize, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(apply(self.params.as_slice(), i, p))
    }
}

fn apply(x: &[f64], i: usize, p: &Point3<f64>) -> Vector3<f64> {
    let t = &x[12 * i..12 * i + 12];
    Vector3::new(
        t[0] * p.x + t[3] * p.y + t[6] * p.z + t[9],
        t[1] * p.x + t[4] * p.y + t[7] * p.z + t[10],
        t[2] * p.x + t[5] * p.y + t[8] * p.z + t[11],
    )
}

fn check_len(x: &DVector<f64>, n: usize) {
    assert_eq!(x.len(), 12 * n, "parameter vector does not match the vertex count");
}

/// `sum_i w_i <q_i - T_i p_i, n_i>^2` with correspondences frozen.
pub fn energy_data(points: &[Point3<f64>], x: &DVector<f64>, corr: &CorrespondenceSet) -> Evaluation {
    check_len(x, points.len());
    let xs = x.as_slice();
    let mut value = 0.0;
    let mut grad = DVector::zeros(x.len());
    for (i, p) in points.iter().enumerate() {
        let w = corr.weights[i];
        if w == 0.0 {
            continue;
        }
        let n = corr.normals[i];
        let r = (corr.points[i].coords - apply(xs, i, p)).dot(&n);
        value += w * r * r;
        // d r / d T = -n [p; 1]^T
        let c = -2.0 * w * r;
        let h = [p.x, p.y, p.z, 1.0];
        for (col, hc) in h.iter().enumerate() {
            for row in 0..3 {
                grad[12 * i + 3 * col + row] += c * n[row] * hc;
            }
        }
    }
    Evaluation::new(value, grad)
}

/// `sum_(i,j) |T_i - T_j|_F^2` over the given edges.
pub fn energy_smooth(x: &DVector<f64>, edges: &[[usize; 2]]) -> Evaluation {
    let mut value = 0.0;
    let mut grad = DVector::zeros(x.len());
    for &[i, j] in edges {
        for k in 0..12 {
            let d = x[12 * i + k] - x[12 * j + k];
            value += d * d;
            grad[12 * i + k] += 2.0 * d;
            grad[12 * j + k] -= 2.0 * d;
        }
    }
    Evaluation::new(value, grad)
}

/// Deviation of every linear block's columns from orthonormality.
pub fn energy_rigid(x: &DVector<f64>) -> Evaluation {
    let mut value = 0.0;
    let mut grad = DVector::zeros(x.len());
    for i in 0..x.len() / 12 {
        let col = |c: usize| Vector3::new(x[12 * i + 3 * c], x[12 * i + 3 * c + 1], x[12 * i + 3 * c + 2]);
        let a = [col(0), col(1), col(2)];
        let mut g = [Vector3::zeros(); 3];
        for (u, v) in [(0, 1), (0, 2), (1, 2)] {
            let d = a[u].dot(&a[v]);
            value += d * d;
            g[u] += a[v] * (2.0 * d);
            g[v] += a[u] * (2.0 * d);
        }
        for u in 0..3 {
            let e = 1.0 - a[u].norm_squared();
            value += e * e;
            g[u] -= a[u] * (4.0 * e);
        }
        for u in 0..3 {
            for r in 0..3 {
                grad[12 * i + 3 * u + r] = g[u][r];
            }
        }
    }
    Evaluation::new(value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeWeights {
    pub data: f64,
    pub smooth: f64,
    pub rigid: f64,
}

impl Default for ShapeWeights {
    fn default() -> Self {
        Self {
            data: 1.0,
            smooth: 20000.0,
            rigid: 10.0,
        }
    }
}

/// Weighted sum of the data, smoothness and rigidity terms.
pub fn energy_shape(
    points: &[Point3<f64>],
    x: &DVector<f64>,
    corr: &CorrespondenceSet,
    edges: &[[usize; 2]],
    w: &ShapeWeights,
) -> Evaluation {
    let d = energy_data(points, x, corr);
    let s = energy_smooth(x, edges);
    let r = energy_rigid(x);
    Evaluation::new(
        w.data * d.value + w.smooth * s.value + w.rigid * r.value,
        d.gradient * w.data + s.gradient * w.smooth + r.gradient * w.rigid,
    )
}

/// `sum_r w_r <q_r - p_r(alpha), n_r>^2` over the rig vertices with correspondences frozen.
pub fn energy_expr(rig: &BlendshapeRig, alpha: &DVector<f64>, corr: &CorrespondenceSet) -> Evaluation {
    let shapes = rig.blendshapes();
    assert_eq!(alpha.len(), shapes.len(), "one weight per blendshape");
    let mut value = 0.0;
    let mut grad = DVector::zeros(alpha.len());
    for (i, p0) in rig.neutral().vertices().iter().enumerate() {
        let w = corr.weights[i];
        if w == 0.0 {
            continue;
        }
        let n = corr.normals[i];
        let mut p = p0.coords;
        for (a, s) in alpha.iter().zip(shapes) {
            p += s[i] * *a;
        }
        let r = (corr.points[i].coords - p).dot(&n);
        value += w * r * r;
        for (k, s) in shapes.iter().enumerate() {
            grad[k] -= 2.0 * w * r * s[i].dot(&n);
        }
    }
    Evaluation::new(value, grad)
}
