//! Axis-aligned bounding-volume tree for closest-point-on-surface queries.

use nalgebra::{Point3, Vector3};

use super::TriangleMesh;

/// Closest point on a triangle surface.
#[derive(Debug, Clone, Copy)]
pub struct SurfacePoint {
    pub point: Point3<f64>,
    pub face: usize,
    /// Barycentric coordinates of `point` in `face`.
    pub bary: [f64; 3],
    pub distance: f64,
    /// The point lies on a boundary edge or boundary vertex of the surface.
    pub on_boundary: bool,
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Point3<f64>,
    max: Point3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Point3::from(Vector3::repeat(f64::INFINITY)),
            max: Point3::from(Vector3::repeat(f64::NEG_INFINITY)),
        }
    }

    fn grow(&mut self, p: &Point3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.min = self.min.inf(&o.min);
        self.max = self.max.sup(&o.max);
    }

    fn dist2(&self, p: &Point3<f64>) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let e = (self.min[k] - p[k]).max(0.0).max(p[k] - self.max[k]);
            d += e * e;
        }
        d
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bbox: Aabb, start: usize, end: usize },
    Inner { bbox: Aabb, left: usize, right: usize },
}

impl Node {
    fn bbox(&self) -> &Aabb {
        match self {
            Node::Leaf { bbox, .. } | Node::Inner { bbox, .. } => bbox,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// Bounding-volume hierarchy over the faces of a mesh. Holds its own copy of the geometry
/// needed for queries, so it does not borrow the mesh.
#[derive(Debug, Clone)]
pub struct TriangleIndex {
    tris: Vec<[Point3<f64>; 3]>,
    corners: Vec<[usize; 3]>,
    vertex_normals: Vec<Vector3<f64>>,
    /// Per face: boundary flag of edges (0-1, 1-2, 2-0) and of the three corners.
    edge_boundary: Vec<[bool; 3]>,
    vertex_boundary: Vec<[bool; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl TriangleIndex {
    pub fn new(mesh: &TriangleMesh) -> Self {
        let tris: Vec<[Point3<f64>; 3]> = (0..mesh.face_count()).map(|f| mesh.face_points(f)).collect();
        let corners = mesh.faces().to_vec();
        let edge_boundary = corners
            .iter()
            .map(|f| {
                [
                    mesh.is_boundary_edge(f[0], f[1]),
                    mesh.is_boundary_edge(f[1], f[2]),
                    mesh.is_boundary_edge(f[2], f[0]),
                ]
            })
            .collect();
        let vertex_boundary = corners
            .iter()
            .map(|f| [mesh.is_boundary(f[0]), mesh.is_boundary(f[1]), mesh.is_boundary(f[2])])
            .collect();
        let centroids: Vec<Point3<f64>> = tris
            .iter()
            .map(|t| Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0))
            .collect();
        let mut index = Self {
            tris,
            corners,
            vertex_normals: mesh.normals().to_vec(),
            edge_boundary,
            vertex_boundary,
            order: (0..mesh.face_count()).collect(),
            nodes: Vec::new(),
        };
        let n = index.order.len();
        index.build(&centroids, 0, n);
        index
    }

    fn build(&mut self, centroids: &[Point3<f64>], start: usize, end: usize) -> usize {
        let mut bbox = Aabb::empty();
        let mut cbox = Aabb::empty();
        for &f in &self.order[start..end] {
            for p in &self.tris[f] {
                bbox.grow(p);
            }
            cbox.grow(&centroids[f]);
        }
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { bbox, start, end });
            return self.nodes.len() - 1;
        }
        let ext = cbox.max - cbox.min;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis])
        });
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { bbox, start, end });
        let left = self.build(centroids, start, mid);
        let right = self.build(centroids, mid, end);
        let mut merged = *self.nodes[left].bbox();
        merged.merge(self.nodes[right].bbox());
        self.nodes[slot] = Node::Inner {
            bbox: merged,
            left,
            right,
        };
        slot
    }

    /// Closest point on the surface to `p`. Ties resolve to the lowest face index.
    pub fn closest_point(&self, p: &Point3<f64>) -> SurfacePoint {
        let mut best: Option<(f64, usize, Point3<f64>, [f64; 3], Region)> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if let Some((bd, ..)) = best {
                if node.bbox().dist2(p) > bd {
                    continue;
                }
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[*start..*end] {
                        let (q, bary, region) = closest_on_triangle(p, &self.tris[f]);
                        let d = (q - p).norm_squared();
                        let better = match best {
                            None => true,
                            Some((bd, bf, ..)) => d < bd || (d == bd && f < bf),
                        };
                        if better {
                            best = Some((d, f, q, bary, region));
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bbox().dist2(p);
                    let dr = self.nodes[*right].bbox().dist2(p);
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        let (d2, face, point, bary, region) = best.expect("index over a non-empty mesh");
        let on_boundary = match region {
            Region::Vertex(k) => self.vertex_boundary[face][k],
            Region::Edge(k) => self.edge_boundary[face][k],
            Region::Interior => false,
        };
        SurfacePoint {
            point,
            face,
            bary,
            distance: d2.sqrt(),
            on_boundary,
        }
    }

    /// Unit normal at a surface point, interpolated from vertex normals.
    pub fn normal_at(&self, sp: &SurfacePoint) -> Vector3<f64> {
        let c = self.corners[sp.face];
        let n = self.vertex_normals[c[0]] * sp.bary[0]
            + self.vertex_normals[c[1]] * sp.bary[1]
            + self.vertex_normals[c[2]] * sp.bary[2];
        let len = n.norm();
        if len > 1e-12 {
            n / len
        } else {
            let t = &self.tris[sp.face];
            (t[1] - t[0]).cross(&(t[2] - t[0])).normalize()
        }
    }

    pub fn face_count(&self) -> usize {
        self.tris.len()
    }
}

#[derive(Debug, Clone, Copy)]
enum Region {
    Vertex(usize),
    /// Edge k joins corner k and corner (k + 1) % 3.
    Edge(usize),
    Interior,
}

/// Closest point on triangle `t` to `p` (Ericson, Real-Time Collision Detection 5.1.5).
fn closest_on_triangle(p: &Point3<f64>, t: &[Point3<f64>; 3]) -> (Point3<f64>, [f64; 3], Region) {
    let (a, b, c) = (t[0], t[1], t[2]);
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0], Region::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0], Region::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0], Region::Edge(0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0], Region::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w], Region::Edge(2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w], Region::Edge(1));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w], Region::Interior)
}

#[cfg(test)]
mod tests {
    use super::super::test_shapes::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(mesh: &TriangleMesh, p: &Point3<f64>) -> f64 {
        (0..mesh.face_count())
            .map(|f| (closest_on_triangle(p, &mesh.face_points(f)).0 - p).norm())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn matches_brute_force() {
        let s = icosphere(3, 10.0);
        let idx = TriangleIndex::new(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let p = Point3::new(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
            );
            let sp = idx.closest_point(&p);
            assert!((sp.distance - brute(&s, &p)).abs() < 1e-9);
            let recon = s.face_points(sp.face);
            let q = recon[0].coords * sp.bary[0] + recon[1].coords * sp.bary[1] + recon[2].coords * sp.bary[2];
            assert!((q - sp.point.coords).norm() < 1e-9);
            assert!(!sp.on_boundary);
        }
    }

    #[test]
    fn boundary_classification_on_grid() {
        let g = grid(5, 5, 1.0);
        let idx = TriangleIndex::new(&g);
        let inside = idx.closest_point(&Point3::new(2.3, 2.6, 1.0));
        assert!(!inside.on_boundary);
        assert!((inside.distance - 1.0).abs() < 1e-12);
        let outside = idx.closest_point(&Point3::new(-3.0, 2.5, 0.0));
        assert!(outside.on_boundary);
        assert!((outside.point - Point3::new(0.0, 2.5, 0.0)).norm() < 1e-12);
        let corner = idx.closest_point(&Point3::new(-1.0, -1.0, 0.0));
        assert!(corner.on_boundary);
        assert!((idx.normal_at(&inside) - Vector3::z()).norm() < 1e-12);
    }
}
