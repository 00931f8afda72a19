//! Similarity transforms and least-squares absolute orientation.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords * self.scale + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v * self.scale
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

/// Least-squares similarity (Umeyama) mapping `src[i]` onto `dst[i]`.
///
/// With `allow_reflection` the orthogonal part may have determinant -1. Fails when the
/// source points are (nearly) collinear.
pub fn umeyama(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
    with_scale: bool,
    allow_reflection: bool,
) -> Result<Similarity> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "absolute orientation needs >= 3 paired points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = s.coords - mu_s;
        let b = d.coords - mu_d;
        cov += b * a.transpose();
        src_cov += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let spread = src_cov.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] < 1e-10 * ev[0] {
        return Err(Error::Degenerate(
            "source points are collinear; orientation is undetermined".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut sign = Matrix3::identity();
    if !allow_reflection && (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the axis of the smallest singular value
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        sign[(imin, imin)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = if with_scale {
        let d = svd.singular_values;
        (0..3).map(|k| d[k] * sign[(k, k)]).sum::<f64>() / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Uniformly random rotation from three uniform samples in [0, 1) (Shoemake).
pub fn random_rotation(u1: f64, u2: f64, u3: f64) -> Matrix3<f64> {
    use std::f64::consts::PI;
    let q = nalgebra::Quaternion::new(
        (1.0 - u1).sqrt() * (2.0 * PI * u2).cos(),
        (1.0 - u1).sqrt() * (2.0 * PI * u2).sin(),
        u1.sqrt() * (2.0 * PI * u3).sin(),
        u1.sqrt() * (2.0 * PI * u3).cos(),
    );
    *nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
}
