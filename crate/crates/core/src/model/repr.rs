//! Serde helpers: matrices as `{rows, cols, data}` with row-major data, vectors and points
//! as plain arrays.

use nalgebra::{DMatrix, DVector, Point3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub mod dmatrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatrixRepr {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = MatrixRepr::deserialize(d)?;
        if r.rows.checked_mul(r.cols) != Some(r.data.len()) {
            return Err(serde::de::Error::custom(format!(
                "matrix shape {}x{} does not match {} entries",
                r.rows,
                r.cols,
                r.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}

pub mod dvector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod points {
    use super::*;

    pub fn serialize<S: Serializer>(p: &[Point3<f64>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<[f64; 3]> = p.iter().map(|q| [q.x, q.y, q.z]).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Point3<f64>>, D::Error> {
        let raw = Vec::<[f64; 3]>::deserialize(d)?;
        Ok(raw.into_iter().map(|[x, y, z]| Point3::new(x, y, z)).collect())
    }
}
