//! Fast marching geodesic distances and geodesic disk areas.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use nalgebra::{Matrix2, Point3, Vector2};

use super::TriangleMesh;
use crate::error::{Error, Result};

/// Geodesic distances from one source vertex, in mm.
///
/// Unreached vertices hold `f64::INFINITY`. A field produced by
/// [`fast_marching_bounded`] is only exact up to `valid_radius`.
#[derive(Debug, Clone)]
pub struct GeodesicField {
    pub source: usize,
    pub dist: Vec<f64>,
    /// Vertices in the order they were accepted (non-decreasing distance).
    pub order: Vec<usize>,
    pub valid_radius: f64,
}

impl GeodesicField {
    pub fn get(&self, v: usize) -> f64 {
        self.dist[v]
    }

    pub fn is_reachable(&self, v: usize) -> bool {
        self.dist[v].is_finite()
    }

    pub fn max_finite(&self) -> f64 {
        self.order
            .last()
            .map(|&v| self.dist[v])
            .unwrap_or(0.0)
    }

    /// Accepted vertices with distance `<= r`.
    pub fn within(&self, r: f64) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().copied().take_while(move |&v| self.dist[v] <= r)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Distances from `source` to every vertex.
pub fn fast_marching(mesh: &TriangleMesh, source: usize) -> Result<GeodesicField> {
    march(mesh, source, f64::INFINITY)
}

/// Distances from `source`, exact for every vertex within `radius`. Marching stops once
/// the front passes `radius` plus the longest edge, so triangles straddling the disk of
/// radius `radius` have all three corners accepted.
pub fn fast_marching_bounded(
    mesh: &TriangleMesh,
    source: usize,
    radius: f64,
) -> Result<GeodesicField> {
    march(mesh, source, radius)
}

fn march(mesh: &TriangleMesh, source: usize, radius: f64) -> Result<GeodesicField> {
    let n = mesh.vertex_count();
    if source >= n {
        return Err(Error::OutOfRange {
            index: source,
            len: n,
        });
    }
    let stop = if radius.is_finite() {
        radius + mesh.max_edge_length() * 1.0001
    } else {
        f64::INFINITY
    };
    let mut dist = vec![f64::INFINITY; n];
    let mut accepted = vec![false; n];
    let mut order = Vec::new();
    let mut heap = BinaryHeap::new();

    dist[source] = 0.0;
    heap.push(Reverse((Key(0.0), source)));
    // exact Euclidean seeding of the one-ring removes the point-source start-up error
    let ps = mesh.vertex(source);
    for &nb in mesh.neighbors(source) {
        dist[nb] = (mesh.vertex(nb) - ps).norm();
        heap.push(Reverse((Key(dist[nb]), nb)));
    }

    while let Some(Reverse((Key(d), v))) = heap.pop() {
        if accepted[v] || d > dist[v] {
            continue;
        }
        if d > stop {
            break;
        }
        accepted[v] = true;
        order.push(v);
        for &f in mesh.vertex_faces(v) {
            let face = mesh.faces()[f];
            for &c in &face {
                if c == v || accepted[c] {
                    continue;
                }
                let w = face.iter().copied().find(|&x| x != v && x != c).unwrap();
                let mut cand = dist[v] + (mesh.vertex(c) - mesh.vertex(v)).norm();
                if accepted[w] {
                    if let Some(t) = triangle_update(mesh, &dist, &accepted, f, c, v, w) {
                        cand = cand.min(t);
                    }
                }
                if cand < dist[c] {
                    dist[c] = cand;
                    heap.push(Reverse((Key(cand), c)));
                }
            }
        }
    }
    for (d, &a) in dist.iter_mut().zip(&accepted) {
        if !a {
            *d = f64::INFINITY;
        }
    }
    Ok(GeodesicField {
        source,
        dist,
        order,
        valid_radius: radius,
    })
}

/// Planar first-order update of `c` from the accepted pair `(a, b)` with `c` at the origin.
/// Returns `None` when the upwind direction does not pass through segment `ab`.
fn planar_update(pa: Vector2<f64>, ta: f64, pb: Vector2<f64>, tb: f64) -> Option<f64> {
    let m = Matrix2::new(pa.x, pa.y, pb.x, pb.y);
    let inv = m.try_inverse()?;
    let p = inv * Vector2::new(ta, tb);
    let q = inv * Vector2::new(1.0, 1.0);
    // T(x) = t + g.x with g = p - t q and |g| = 1
    let qa = q.norm_squared();
    let qb = -2.0 * p.dot(&q);
    let qc = p.norm_squared() - 1.0;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 || qa <= 0.0 {
        return None;
    }
    let t = (-qb + disc.sqrt()) / (2.0 * qa);
    if t < ta.max(tb) {
        return None;
    }
    let g = p - q * t;
    // information must arrive from inside the wedge spanned by a and b: -g = alpha a + beta b
    let coeff = m.transpose().try_inverse()? * (-g);
    if coeff.x < -1e-12 || coeff.y < -1e-12 {
        return None;
    }
    Some(t)
}

/// Update of `c` (at the origin) from a virtual point source placed at distances `ta`, `tb`
/// from `a` and `b`. Exact on developable patches; `None` when the straight ray from the
/// source to `c` misses segment `ab` or the distances are inconsistent.
fn point_source_update(pa: Vector2<f64>, ta: f64, pb: Vector2<f64>, tb: f64) -> Option<f64> {
    let l = (pb - pa).norm();
    if l <= 0.0 || ta + tb < l * (1.0 - 1e-12) || (ta - tb).abs() > l * (1.0 + 1e-12) {
        return None;
    }
    let s = place(pa, pb, ta, tb, true);
    let to_c = -s;
    if cross2(pa - s, to_c) * cross2(pb - s, to_c) > 0.0 {
        return None;
    }
    let t = to_c.norm();
    if t < ta.max(tb) {
        return None;
    }
    Some(t)
}

fn update2d(pa: Vector2<f64>, ta: f64, pb: Vector2<f64>, tb: f64) -> Option<f64> {
    point_source_update(pa, ta, pb, tb).or_else(|| planar_update(pa, ta, pb, tb))
}

/// 2D coordinates of the third point of a triangle given its distances to `a` and `b`,
/// on the side of line `ab` opposite to (or same as) the origin.
fn place(a: Vector2<f64>, b: Vector2<f64>, da: f64, db: f64, away_from_origin: bool) -> Vector2<f64> {
    let ab = b - a;
    let l = ab.norm();
    let x = (da * da - db * db + l * l) / (2.0 * l);
    let h = (da * da - x * x).max(0.0).sqrt();
    let ex = ab / l;
    let ey = Vector2::new(-ex.y, ex.x);
    let origin_side = (-a).dot(&ey);
    let sign = if (origin_side > 0.0) == away_from_origin {
        -1.0
    } else {
        1.0
    };
    a + ex * x + ey * (h * sign)
}

fn cross2(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

#[allow(clippy::too_many_arguments)]
fn triangle_update(
    mesh: &TriangleMesh,
    dist: &[f64],
    accepted: &[bool],
    face: usize,
    c: usize,
    a: usize,
    b: usize,
) -> Option<f64> {
    let pc = mesh.vertex(c);
    let (va, vb) = (mesh.vertex(a) - pc, mesh.vertex(b) - pc);
    let (la, lb) = (va.norm(), vb.norm());
    let cos = va.dot(&vb) / (la * lb);
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let a2 = Vector2::new(la, 0.0);
    let b2 = Vector2::new(lb * cos, lb * sin);
    if let Some(t) = point_source_update(a2, dist[a], b2, dist[b]) {
        return Some(t);
    }
    // right angles (common on regular grids) must not flip into the unfolding branch
    if cos >= -1e-9 {
        return planar_update(a2, dist[a], b2, dist[b]);
    }
    unfold_obtuse(mesh, dist, accepted, face, (a, a2), (b, b2))
}

/// Obtuse angle at the origin vertex: unfold neighbouring triangles across the far edge
/// until a vertex falls inside the wedge, then update from the two acute halves.
fn unfold_obtuse(
    mesh: &TriangleMesh,
    dist: &[f64],
    accepted: &[bool],
    face: usize,
    a: (usize, Vector2<f64>),
    b: (usize, Vector2<f64>),
) -> Option<f64> {
    let (wedge_a, wedge_b) = (a.1, b.1);
    let (mut e0, mut e1) = (a, b);
    let mut prev_face = face;
    for _ in 0..8 {
        let across = mesh
            .edge_faces(e0.0, e1.0)
            .iter()
            .copied()
            .find(|&f| f != prev_face)?;
        let fv = mesh.faces()[across];
        let d = fv.iter().copied().find(|&x| x != e0.0 && x != e1.0)?;
        let pd = mesh.vertex(d);
        let dd0 = (pd - mesh.vertex(e0.0)).norm();
        let dd1 = (pd - mesh.vertex(e1.0)).norm();
        let d2 = place(e0.1, e1.1, dd0, dd1, true);
        let in_a = cross2(wedge_a, d2) > 0.0;
        let in_b = cross2(d2, wedge_b) > 0.0;
        if in_a && in_b {
            if !accepted[d] {
                return None;
            }
            // the virtual edge to the unfolded vertex is itself a straight path in the strip
            let edge = dist[d] + d2.norm();
            let t1 = update2d(wedge_a, dist[a.0], d2, dist[d]);
            let t2 = update2d(d2, dist[d], wedge_b, dist[b.0]);
            return Some([t1, t2].into_iter().flatten().fold(edge, f64::min));
        }
        prev_face = across;
        if !in_b {
            // d lies beyond the b ray: the wedge crosses edge (e0, d)
            e1 = (d, d2);
        } else {
            e0 = (d, d2);
        }
    }
    None
}

/// Area of a geodesic disk and whether it was cut short.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskArea {
    pub area: f64,
    /// The disk reaches a boundary vertex.
    pub touches_boundary: bool,
    /// The radius exceeds the largest finite distance: the whole reachable surface.
    pub covers_all: bool,
}

impl DiskArea {
    pub fn truncated(&self) -> bool {
        self.touches_boundary || self.covers_all
    }
}

/// Area of `{x : dist(x) <= r}` with the distance linearly interpolated over each triangle.
pub fn geodesic_disk_area(mesh: &TriangleMesh, field: &GeodesicField, r: f64) -> Result<DiskArea> {
    Ok(geodesic_disk_areas(mesh, field, &[r])?[0])
}

/// [`geodesic_disk_area`] for several radii in one pass over the reached triangles.
pub fn geodesic_disk_areas(
    mesh: &TriangleMesh,
    field: &GeodesicField,
    radii: &[f64],
) -> Result<Vec<DiskArea>> {
    for &r in radii {
        if !(r > 0.0) {
            return Err(Error::InvalidArgument(format!("disk radius must be positive, got {r}")));
        }
        if r > field.valid_radius {
            return Err(Error::InvalidArgument(format!(
                "disk radius {r} exceeds the field's valid radius {}",
                field.valid_radius
            )));
        }
    }
    let mut faces: Vec<usize> = field
        .order
        .iter()
        .flat_map(|&v| mesh.vertex_faces(v).iter().copied())
        .collect();
    faces.sort_unstable();
    faces.dedup();

    let max_finite = field.max_finite();
    let mut out: Vec<DiskArea> = radii
        .iter()
        .map(|&r| DiskArea {
            area: 0.0,
            touches_boundary: field
                .within(r)
                .any(|v| mesh.is_boundary(v)),
            covers_all: r >= max_finite,
        })
        .collect();
    for f in faces {
        let tri = mesh.faces()[f];
        let d = [field.dist[tri[0]], field.dist[tri[1]], field.dist[tri[2]]];
        let p = mesh.face_points(f);
        let dmin = d[0].min(d[1]).min(d[2]);
        let dmax = d[0].max(d[1]).max(d[2]);
        for (slot, &r) in out.iter_mut().zip(radii) {
            if dmin > r {
                continue;
            }
            slot.area += if dmax <= r {
                mesh.face_area(f)
            } else {
                clipped_area(&p, &d, r)
            };
        }
    }
    Ok(out)
}

fn clipped_area(p: &[Point3<f64>; 3], d: &[f64; 3], r: f64) -> f64 {
    let mut poly: Vec<Point3<f64>> = Vec::with_capacity(4);
    for i in 0..3 {
        let j = (i + 1) % 3;
        let (pi, pj, di, dj) = (p[i], p[j], d[i], d[j]);
        if di <= r {
            poly.push(pi);
        }
        if (di <= r) != (dj <= r) {
            let t = if dj.is_finite() { (r - di) / (dj - di) } else { 0.0 };
            poly.push(pi + (pj - pi) * t);
        }
    }
    if poly.len() < 3 {
        return 0.0;
    }
    let o = poly[0];
    let mut acc = nalgebra::Vector3::zeros();
    for k in 1..poly.len() - 1 {
        acc += (poly[k] - o).cross(&(poly[k + 1] - o));
    }
    0.5 * acc.norm()
}

#[cfg(test)]
mod tests {
    use super::super::test_shapes::*;
    use super::*;
    use nalgebra::{Rotation3, Vector3};
    use std::f64::consts::PI;

    #[test]
    fn source_is_zero() {
        let g = grid(10, 10, 1.0);
        let f = fast_marching(&g, 37).unwrap();
        assert_eq!(f.get(37), 0.0);
        assert!(f.dist.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn out_of_range_source() {
        let g = grid(3, 3, 1.0);
        assert!(matches!(fast_marching(&g, 9), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn flat_grid_matches_euclidean() {
        let g = grid(61, 61, 1.0);
        let src = 30 * 61 + 30;
        let f = fast_marching(&g, src).unwrap();
        let ps = g.vertex(src);
        let mut worst: f64 = 0.0;
        for v in 0..g.vertex_count() {
            let e = (g.vertex(v) - ps).norm();
            if e > 0.0 {
                worst = worst.max((f.get(v) - e).abs() / e);
            }
        }
        assert!(worst < 0.01, "worst relative error {worst}");
    }

    #[test]
    fn accepted_order_is_monotone_and_triangle_inequality_holds() {
        let s = icosphere(3, 10.0);
        let f = fast_marching(&s, 0).unwrap();
        for w in f.order.windows(2) {
            assert!(f.get(w[0]) <= f.get(w[1]));
        }
        for &[a, b] in s.edges() {
            let e = (s.vertex(a) - s.vertex(b)).norm();
            assert!(f.get(a) <= f.get(b) + e + 1e-9);
        }
    }

    #[test]
    fn sphere_antipode_is_pi() {
        let s = icosphere(4, 1.0);
        let src = 0;
        let anti = s.nearest_vertex(&Point3::from(-s.vertex(src).coords));
        let f = fast_marching(&s, src).unwrap();
        let err = (f.get(anti) - PI).abs() / PI;
        assert!(err < 0.02, "antipodal distance {} (err {err})", f.get(anti));
        // great-circle oracle on every vertex
        let p0 = s.vertex(src).coords;
        for v in 0..s.vertex_count() {
            let arc = p0.dot(&s.vertex(v).coords).clamp(-1.0, 1.0).acos();
            assert!((f.get(v) - arc).abs() < 0.03 * PI);
        }
    }

    #[test]
    fn rigid_motion_invariance() {
        let s = icosphere(3, 20.0);
        let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let moved = s
            .map_positions(|p| rot * p + Vector3::new(5.0, -7.0, 11.0))
            .unwrap();
        let a = fast_marching(&s, 5).unwrap();
        let b = fast_marching(&moved, 5).unwrap();
        for v in 0..s.vertex_count() {
            let scale = a.get(v).max(1e-12);
            assert!((a.get(v) - b.get(v)).abs() / scale < 1e-9);
        }
    }

    #[test]
    fn rigid_motion_invariance_on_a_curved_grid() {
        // Symmetric pits put the unfolded source exactly on wedge boundaries.
        let face = crate::synth::generate_face(&crate::synth::FaceSpec::neutral(3.0)).unwrap();
        let rot = Rotation3::from_euler_angles(0.7, 0.2, -1.3);
        let moved = face
            .mesh
            .map_positions(|p| rot * p + Vector3::new(50.0, -20.0, 80.0))
            .unwrap();
        for &src in &face.landmarks {
            let a = fast_marching_bounded(&face.mesh, src, 40.0).unwrap();
            let b = fast_marching_bounded(&moved, src, 40.0).unwrap();
            for v in a.within(40.0) {
                assert!((a.get(v) - b.get(v)).abs() < 1e-9, "source {src}, vertex {v}");
            }
        }
    }

    #[test]
    fn disconnected_component_is_infinite() {
        let mut v: Vec<_> = grid(3, 3, 1.0).vertices().to_vec();
        let mut f: Vec<_> = grid(3, 3, 1.0).faces().to_vec();
        v.extend([
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(11.0, 0.0, 0.0),
            Point3::new(10.0, 1.0, 0.0),
        ]);
        f.push([9, 10, 11]);
        let m = TriangleMesh::new(v, f).unwrap();
        let field = fast_marching(&m, 0).unwrap();
        assert!(!field.is_reachable(10));
        assert!(field.is_reachable(8));
    }

    #[test]
    fn bounded_marching_agrees_inside_radius() {
        let g = grid(41, 41, 1.0);
        let src = 20 * 41 + 20;
        let full = fast_marching(&g, src).unwrap();
        let part = fast_marching_bounded(&g, src, 8.0).unwrap();
        for v in 0..g.vertex_count() {
            if full.get(v) <= 8.0 {
                assert_eq!(full.get(v), part.get(v));
            }
        }
        assert!(part.order.len() < full.order.len());
        let a = geodesic_disk_area(&g, &part, 8.0).unwrap().area;
        let b = geodesic_disk_area(&g, &full, 8.0).unwrap().area;
        assert!((a - b).abs() < 1e-9);
        assert!(geodesic_disk_area(&g, &part, 20.0).is_err());
    }

    #[test]
    fn plane_disk_area() {
        let g = grid(61, 61, 0.5);
        let src = 30 * 61 + 30;
        let f = fast_marching(&g, src).unwrap();
        let a = geodesic_disk_area(&g, &f, 10.0).unwrap();
        let exact = PI * 100.0;
        assert!((a.area - exact).abs() / exact < 0.02, "area {}", a.area);
        assert!(!a.truncated());
    }

    #[test]
    fn sphere_cap_area() {
        let r_sphere = 50.0;
        let s = icosphere(5, r_sphere);
        let f = fast_marching_bounded(&s, 0, 40.0).unwrap();
        for r in [5.0, 10.0, 20.0, 30.0, 40.0] {
            let a = geodesic_disk_area(&s, &f, r).unwrap().area;
            let cap = 2.0 * PI * r_sphere * r_sphere * (1.0 - (r / r_sphere).cos());
            assert!((a - cap).abs() / cap < 0.03, "r={r}: {a} vs {cap}");
        }
    }

    #[test]
    fn tiny_radius_still_has_area() {
        let g = grid(5, 5, 1.0);
        let f = fast_marching(&g, 12).unwrap();
        let a = geodesic_disk_area(&g, &f, 0.1).unwrap();
        assert!(a.area > 0.0);
        assert!(geodesic_disk_area(&g, &f, 0.0).is_err());
    }

    #[test]
    fn truncation_flags() {
        let g = grid(11, 11, 1.0);
        let f = fast_marching(&g, 60).unwrap();
        let small = geodesic_disk_area(&g, &f, 2.0).unwrap();
        assert!(!small.truncated());
        let edge = geodesic_disk_area(&g, &f, 5.5).unwrap();
        assert!(edge.touches_boundary && !edge.covers_all);
        let all = geodesic_disk_area(&g, &f, 100.0).unwrap();
        assert!(all.covers_all);
        assert!((all.area - 100.0).abs() < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn disk_area_monotone_in_radius(src in 0usize..642, r1 in 0.5f64..30.0, dr in 0.0f64..10.0) {
                let s = icosphere(3, 20.0);
                let f = fast_marching(&s, src).unwrap();
                let a = geodesic_disk_area(&s, &f, r1).unwrap().area;
                let b = geodesic_disk_area(&s, &f, r1 + dr).unwrap().area;
                prop_assert!(b >= a - 1e-9);
            }
        }
    }
}
