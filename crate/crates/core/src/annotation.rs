//! Landmark annotation files: a JSON object mapping labels to vertex ids.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::model::{AnnotatedMesh, LANDMARK_COUNT};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    /// Label (1-based) to vertex id.
    pub landmarks: BTreeMap<usize, usize>,
    /// Expression weights the mesh was generated with, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

impl Annotation {
    pub fn from_ids(ids: &[usize]) -> Self {
        Self {
            landmarks: ids.iter().enumerate().map(|(k, &v)| (k + 1, v)).collect(),
            alpha: None,
        }
    }

    /// Vertex ids indexed by label - 1; every label 1..=8 must be present.
    pub fn landmark_array(&self) -> Result<[usize; LANDMARK_COUNT]> {
        let mut out = [0; LANDMARK_COUNT];
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = *self
                .landmarks
                .get(&(k + 1))
                .ok_or_else(|| Error::Schema(format!("annotation lacks label {}", k + 1)))?;
        }
        if let Some(&extra) = self.landmarks.keys().find(|&&l| l == 0 || l > LANDMARK_COUNT) {
            return Err(Error::Schema(format!("annotation has unknown label {extra}")));
        }
        Ok(out)
    }

    /// Positions of the annotated vertices on `mesh`.
    pub fn positions(&self, mesh: &TriangleMesh) -> Result<BTreeMap<usize, Point3<f64>>> {
        self.landmarks
            .iter()
            .map(|(&l, &v)| {
                if v >= mesh.vertex_count() {
                    return Err(Error::OutOfRange {
                        index: v,
                        len: mesh.vertex_count(),
                    });
                }
                Ok((l, mesh.vertex(v)))
            })
            .collect()
    }

    pub fn annotate(&self, mesh: TriangleMesh) -> Result<AnnotatedMesh> {
        let landmarks = self.landmark_array()?;
        if let Some(&v) = landmarks.iter().find(|&&v| v >= mesh.vertex_count()) {
            return Err(Error::OutOfRange {
                index: v,
                len: mesh.vertex_count(),
            });
        }
        Ok(AnnotatedMesh { mesh, landmarks })
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read(std::io::BufReader::new(f)).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        self.write(std::io::BufWriter::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::test_shapes::grid;

    #[test]
    fn json_layout() {
        let a = Annotation::from_ids(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"1\": 1"));
        assert_eq!(Annotation::read(text.as_bytes()).unwrap(), a);
        assert_eq!(a.landmark_array().unwrap(), [1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn missing_or_unknown_labels_are_rejected() {
        let mut a = Annotation::from_ids(&[1, 2, 3, 4, 5, 6, 7]);
        assert!(matches!(a.landmark_array(), Err(Error::Schema(_))));
        a.landmarks.insert(8, 0);
        a.landmarks.insert(9, 0);
        assert!(matches!(a.landmark_array(), Err(Error::Schema(_))));
        assert!(Annotation::read(&b"{\"landmarks\": {}, \"extra\": 1}"[..]).is_err());
    }

    #[test]
    fn ids_are_checked_against_the_mesh() {
        let g = grid(3, 3, 1.0);
        let a = Annotation::from_ids(&[0, 1, 2, 3, 4, 5, 6, 9]);
        assert!(matches!(a.annotate(g.clone()), Err(Error::OutOfRange { index: 9, .. })));
        assert!(a.positions(&g).is_err());
        let ok = Annotation::from_ids(&[0, 1, 2, 3, 4, 5, 6, 8]);
        assert_eq!(ok.positions(&g).unwrap()[&8], g.vertex(8));
    }
}
