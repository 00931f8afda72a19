//! Indexed triangle meshes and the differential-geometry routines built on them.

mod curvature;
mod geodesic;
mod io;
mod spatial;

pub use curvature::{detect_umbilics, principal_curvatures, PrincipalCurvatures, UmbilicParams};
pub use geodesic::{fast_marching, fast_marching_bounded, geodesic_disk_area, geodesic_disk_areas, DiskArea, GeodesicField};
pub use io::{load_mesh, load_mesh_file, save_mesh, save_mesh_file, MeshFormat};
pub use spatial::{SurfacePoint, TriangleIndex};

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

/// Indexed triangle surface. Positions are in millimeters.
///
/// Construction validates indices, rejects degenerate (repeated-vertex) faces and
/// computes adjacency, boundary flags and area-weighted vertex normals.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    normals: Vec<Vector3<f64>>,
    boundary: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
    vertex_faces: Vec<Vec<usize>>,
    edge_faces: HashMap<(usize, usize), Vec<usize>>,
    edges: Vec<[usize; 2]>,
}

#[inline]
pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        Self::build(vertices, faces, None)
    }

    /// Like [`TriangleMesh::new`] but uses the supplied per-vertex normals (renormalized)
    /// instead of recomputing them.
    pub fn with_normals(
        vertices: Vec<Point3<f64>>,
        faces: Vec<[usize; 3]>,
        normals: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        if normals.len() != vertices.len() {
            return Err(Error::InvalidMesh(format!(
                "{} normals for {} vertices",
                normals.len(),
                vertices.len()
            )));
        }
        Self::build(vertices, faces, Some(normals))
    }

    fn build(
        vertices: Vec<Point3<f64>>,
        faces: Vec<[usize; 3]>,
        normals: Option<Vec<Vector3<f64>>>,
    ) -> Result<Self> {
        if vertices.is_empty() || faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let n = vertices.len();
        if let Some(p) = vertices.iter().find(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("non-finite vertex {p:?}")));
        }
        let mut vertex_faces = vec![Vec::new(); n];
        let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(Error::OutOfRange { index: v, len: n });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} repeats a vertex: {f:?}")));
            }
            for k in 0..3 {
                vertex_faces[f[k]].push(fi);
                edge_faces
                    .entry(edge_key(f[k], f[(k + 1) % 3]))
                    .or_default()
                    .push(fi);
            }
        }

        let mut boundary = vec![false; n];
        let mut neighbors = vec![Vec::new(); n];
        let mut edges: Vec<[usize; 2]> = Vec::with_capacity(edge_faces.len());
        for (&(a, b), fs) in &edge_faces {
            if fs.len() == 1 {
                boundary[a] = true;
                boundary[b] = true;
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
            edges.push([a, b]);
        }
        edges.sort_unstable();
        for nb in &mut neighbors {
            nb.sort_unstable();
        }

        let normals = match normals {
            Some(ns) => ns
                .into_iter()
                .map(|nrm| {
                    let len = nrm.norm();
                    if len > 0.0 && len.is_finite() {
                        nrm / len
                    } else {
                        Vector3::z()
                    }
                })
                .collect(),
            None => area_weighted_normals(&vertices, &faces),
        };

        Ok(Self {
            vertices,
            faces,
            normals,
            boundary,
            neighbors,
            vertex_faces,
            edge_faces,
            edges,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> Point3<f64> {
        self.vertices[v]
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn normal(&self, v: usize) -> Vector3<f64> {
        self.normals[v]
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    /// Sorted one-ring vertex neighbors.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn vertex_faces(&self, v: usize) -> &[usize] {
        &self.vertex_faces[v]
    }

    /// Unique undirected edges `[a, b]` with `a < b`, sorted.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn is_boundary_edge(&self, a: usize, b: usize) -> bool {
        self.edge_faces
            .get(&edge_key(a, b))
            .is_some_and(|fs| fs.len() == 1)
    }

    /// Faces incident to the edge `(a, b)`.
    pub fn edge_faces(&self, a: usize, b: usize) -> &[usize] {
        self.edge_faces
            .get(&edge_key(a, b))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn face_points(&self, f: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.face_points(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn face_normal(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.face_points(f);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::z()
        }
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let sum: f64 = self
            .edges
            .iter()
            .map(|&[a, b]| (self.vertices[a] - self.vertices[b]).norm())
            .sum();
        sum / self.edges.len() as f64
    }

    pub fn max_edge_length(&self) -> f64 {
        self.edges
            .iter()
            .map(|&[a, b]| (self.vertices[a] - self.vertices[b]).norm())
            .fold(0.0, f64::max)
    }

    pub fn centroid(&self) -> Point3<f64> {
        let sum = self
            .vertices
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / self.vertices.len() as f64)
    }

    /// Same connectivity with new positions; normals are recomputed.
    pub fn with_positions(&self, vertices: Vec<Point3<f64>>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::InvalidArgument(format!(
                "{} positions for a mesh with {} vertices",
                vertices.len(),
                self.vertices.len()
            )));
        }
        if let Some(p) = vertices.iter().find(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("non-finite vertex {p:?}")));
        }
        let normals = area_weighted_normals(&vertices, &self.faces);
        Ok(Self {
            vertices,
            normals,
            ..self.clone()
        })
    }

    /// Applies `f` to every position, keeping connectivity.
    pub fn map_positions(&self, f: impl Fn(&Point3<f64>) -> Point3<f64>) -> Result<Self> {
        self.with_positions(self.vertices.iter().map(f).collect())
    }

    /// Sub-mesh made of the faces for which `keep` returns true. Unreferenced vertices
    /// are dropped; the returned map gives the old index of every new vertex.
    pub fn filter_faces(&self, keep: impl Fn(usize) -> bool) -> Result<(Self, Vec<usize>)> {
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut old_of_new = Vec::new();
        let mut faces = Vec::new();
        for (fi, f) in self.faces.iter().enumerate() {
            if !keep(fi) {
                continue;
            }
            let mut nf = [0usize; 3];
            for k in 0..3 {
                let v = f[k];
                if remap[v] == usize::MAX {
                    remap[v] = old_of_new.len();
                    old_of_new.push(v);
                }
                nf[k] = remap[v];
            }
            faces.push(nf);
        }
        let vertices = old_of_new.iter().map(|&v| self.vertices[v]).collect();
        Ok((Self::new(vertices, faces)?, old_of_new))
    }

    /// Index of the vertex closest to `p` (brute force).
    pub fn nearest_vertex(&self, p: &Point3<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, v) in self.vertices.iter().enumerate() {
            let d = (v - p).norm_squared();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

fn area_weighted_normals(vertices: &[Point3<f64>], faces: &[[usize; 3]]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for f in faces {
        let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        // cross product length is twice the area, so this is area weighting
        let n = (b - a).cross(&(c - a));
        for &v in f {
            acc[v] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vector3::z()
            }
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod test_shapes {
    //! Analytic test surfaces shared by unit tests.
    use super::*;

    /// Regular grid on the XY plane with `nx * ny` vertices and spacing `h`.
    pub fn grid(nx: usize, ny: usize, h: f64) -> TriangleMesh {
        let mut v = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                v.push(Point3::new(i as f64 * h, j as f64 * h, 0.0));
            }
        }
        let mut f = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                f.push([a, a + 1, a + nx + 1]);
                f.push([a, a + nx + 1, a + nx]);
            }
        }
        TriangleMesh::new(v, f).unwrap()
    }

    pub fn icosahedron() -> (Vec<Point3<f64>>, Vec<[usize; 3]>) {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let v = vec![
            Point3::new(-1.0, t, 0.0),
            Point3::new(1.0, t, 0.0),
            Point3::new(-1.0, -t, 0.0),
            Point3::new(1.0, -t, 0.0),
            Point3::new(0.0, -1.0, t),
            Point3::new(0.0, 1.0, t),
            Point3::new(0.0, -1.0, -t),
            Point3::new(0.0, 1.0, -t),
            Point3::new(t, 0.0, -1.0),
            Point3::new(t, 0.0, 1.0),
            Point3::new(-t, 0.0, -1.0),
            Point3::new(-t, 0.0, 1.0),
        ];
        let f = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        (v, f)
    }

    /// Subdivided icosahedron projected on a sphere of radius `r`.
    pub fn icosphere(level: usize, r: f64) -> TriangleMesh {
        let (mut v, mut f) = icosahedron();
        for p in &mut v {
            *p = Point3::from(p.coords.normalize());
        }
        for _ in 0..level {
            let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
            let mut nf = Vec::with_capacity(f.len() * 4);
            for t in &f {
                let mut m = [0usize; 3];
                for k in 0..3 {
                    let key = edge_key(t[k], t[(k + 1) % 3]);
                    m[k] = *mid.entry(key).or_insert_with(|| {
                        let p = (v[key.0].coords + v[key.1].coords).normalize();
                        v.push(Point3::from(p));
                        v.len() - 1
                    });
                }
                nf.push([t[0], m[0], m[2]]);
                nf.push([t[1], m[1], m[0]]);
                nf.push([t[2], m[2], m[1]]);
                nf.push([m[0], m[1], m[2]]);
            }
            f = nf;
        }
        let v = v.into_iter().map(|p| Point3::from(p.coords * r)).collect();
        TriangleMesh::new(v, f).unwrap()
    }

    /// Open cylinder of radius `r` around the z axis, `nt` vertices around and `nz` rings.
    pub fn cylinder(r: f64, height: f64, nt: usize, nz: usize) -> TriangleMesh {
        let mut v = Vec::new();
        for j in 0..nz {
            let z = height * j as f64 / (nz - 1) as f64;
            for i in 0..nt {
                let t = std::f64::consts::TAU * i as f64 / nt as f64;
                v.push(Point3::new(r * t.cos(), r * t.sin(), z));
            }
        }
        let mut f = Vec::new();
        for j in 0..nz - 1 {
            for i in 0..nt {
                let a = j * nt + i;
                let b = j * nt + (i + 1) % nt;
                f.push([a, b, b + nt]);
                f.push([a, b + nt, a + nt]);
            }
        }
        TriangleMesh::new(v, f).unwrap()
    }
}
