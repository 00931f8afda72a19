//! Procedural face surfaces with known landmarks, expressions and warps for testing.
//!
//! Faces are height fields `z(x, y)` over an elliptical domain, looking towards +z with
//! +y up. The person's right side is at -x.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::model::{AnnotatedMesh, LANDMARK_COUNT};
use crate::registration::{BlendshapeRig, Region};
use crate::transform::{random_rotation, Similarity};

const DOMAIN_CENTER_Y: f64 = 10.0;
const DOMAIN_HALF_WIDTH: f64 = 92.0;
const DOMAIN_HALF_HEIGHT: f64 = 115.0;

/// Anisotropic Gaussian bump added to the height field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feature {
    pub center: [f64; 2],
    pub sigma: [f64; 2],
    pub amplitude: f64,
}

impl Feature {
    const fn new(cx: f64, cy: f64, sx: f64, sy: f64, amplitude: f64) -> Self {
        Self {
            center: [cx, cy],
            sigma: [sx, sy],
            amplitude,
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        self.amplitude * gauss(x, y, self.center, self.sigma)
    }
}

fn gauss(x: f64, y: f64, c: [f64; 2], s: [f64; 2]) -> f64 {
    let dx = (x - c[0]) / s[0];
    let dy = (y - c[1]) / s[1];
    (-0.5 * (dx * dx + dy * dy)).exp()
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

// Indices into the mean feature table that carry landmarks, in label order.
const LANDMARK_FEATURES: [usize; LANDMARK_COUNT] = [0, 1, 2, 3, 4, 5, 6, 7];

const MEAN_FEATURES: [Feature; 24] = [
    Feature::new(-19.0, 35.0, 3.5, 3.5, -3.0), // right inner eye corner
    Feature::new(-45.0, 36.0, 3.5, 3.5, -3.0), // right outer eye corner
    Feature::new(19.0, 35.0, 3.5, 3.5, -3.0),  // left inner eye corner
    Feature::new(45.0, 36.0, 3.5, 3.5, -3.0),  // left outer eye corner
    Feature::new(-17.0, -11.0, 4.0, 4.0, -5.0), // right subalare
    Feature::new(17.0, -11.0, 4.0, 4.0, -5.0),  // left subalare
    Feature::new(0.0, 0.0, 11.0, 11.0, 22.0),  // nose tip
    Feature::new(0.0, -14.0, 9.0, 3.0, -8.0),  // subnasal
    Feature::new(-14.0, -6.0, 4.5, 4.0, 6.0),  // alae
    Feature::new(14.0, -6.0, 4.5, 4.0, 6.0),
    Feature::new(-32.0, 36.0, 13.0, 8.0, -10.0), // eye sockets
    Feature::new(32.0, 36.0, 13.0, 8.0, -10.0),
    Feature::new(-32.0, 36.0, 7.0, 5.0, 5.0), // eyeballs
    Feature::new(32.0, 36.0, 7.0, 5.0, 5.0),
    Feature::new(-30.0, 52.0, 18.0, 5.0, 5.0), // brows
    Feature::new(30.0, 52.0, 18.0, 5.0, 5.0),
    Feature::new(-45.0, 0.0, 16.0, 16.0, 6.0), // cheeks
    Feature::new(45.0, 0.0, 16.0, 16.0, 6.0),
    Feature::new(0.0, -27.0, 16.0, 5.0, 4.0),  // upper lip
    Feature::new(0.0, -42.0, 14.0, 5.0, 4.0),  // lower lip
    Feature::new(0.0, -35.0, 22.0, 1.8, -2.5), // mouth line
    Feature::new(0.0, -70.0, 16.0, 12.0, 8.0), // chin
    Feature::new(0.0, 75.0, 40.0, 20.0, 4.0),  // forehead
    Feature::new(0.0, -12.0, 3.0, 4.0, 4.0),   // columella
];

/// Identity (shape) parameters of one synthetic person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceParams {
    /// Uniform scale applied to the whole face.
    pub scale: f64,
    pub dome_depth: f64,
    pub features: Vec<Feature>,
}

impl Default for FaceParams {
    fn default() -> Self {
        Self {
            scale: 1.0,
            dome_depth: 60.0,
            features: MEAN_FEATURES.to_vec(),
        }
    }
}

impl FaceParams {
    /// Random identity around the mean face.
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut features = MEAN_FEATURES.to_vec();
        for f in &mut features {
            f.amplitude *= rng.gen_range(0.9..1.1);
            f.center[0] += rng.gen_range(-0.75..0.75);
            f.center[1] += rng.gen_range(-0.75..0.75);
            let k = rng.gen_range(0.95..1.05);
            f.sigma[0] *= k;
            f.sigma[1] *= k;
        }
        Self {
            scale: rng.gen_range(0.93..1.07),
            dome_depth: rng.gen_range(54.0..66.0),
            features,
        }
    }

    /// Height of the unscaled surface.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let u = x / 110.0;
        let v = (y - DOMAIN_CENTER_Y) / 140.0;
        let dome = self.dome_depth * (1.0 - u * u - v * v).max(0.0).sqrt();
        dome + self.features.iter().map(|f| f.eval(x, y)).sum::<f64>()
    }

    /// Landmark locations in the parameter plane, indexed by label - 1.
    pub fn landmark_uv(&self) -> [[f64; 2]; LANDMARK_COUNT] {
        LANDMARK_FEATURES.map(|k| self.features[k].center)
    }
}

pub const EXPRESSION_NAMES: [&str; 6] = [
    "jaw open",
    "smile",
    "frown",
    "pucker",
    "left lip corner raise",
    "right lip corner raise",
];

/// Displacement (mm, unscaled face frame) of expression `k` at parameter point `(x, y)`.
pub fn expression_displacement(k: usize, x: f64, y: f64) -> Vector3<f64> {
    let corner = |side: f64| gauss(x, y, [24.0 * side, -35.0], [9.0, 7.0]);
    match k {
        0 => {
            let w = smoothstep((-30.0 - y) / 15.0) * (1.0 - smoothstep((x.abs() - 35.0) / 30.0));
            Vector3::new(0.0, -10.0, -3.0) * w
        }
        1 => {
            let cheeks = gauss(x, y, [-40.0, -12.0], [12.0, 10.0]) + gauss(x, y, [40.0, -12.0], [12.0, 10.0]);
            Vector3::new(3.0, 4.0, -1.0) * corner(1.0)
                + Vector3::new(-3.0, 4.0, -1.0) * corner(-1.0)
                + Vector3::new(0.0, 2.0, 2.5) * cheeks
        }
        2 => {
            let brow = |side: f64| gauss(x, y, [25.0 * side, 50.0], [12.0, 6.0]);
            Vector3::new(0.0, -4.0, 0.0) * (corner(1.0) + corner(-1.0))
                + Vector3::new(-2.0, -2.5, 0.0) * brow(1.0)
                + Vector3::new(2.0, -2.5, 0.0) * brow(-1.0)
        }
        3 => {
            let g = gauss(x, y, [0.0, -35.0], [16.0, 9.0]);
            Vector3::new(-0.35 * x, 0.0, 5.0) * g
        }
        4 => Vector3::new(2.0, 5.0, 0.0) * corner(1.0),
        5 => Vector3::new(-2.0, 5.0, 0.0) * corner(-1.0),
        _ => Vector3::zeros(),
    }
}

/// Smooth bump displacing the surface along +z of the face frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Warp {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
}

impl Warp {
    pub fn random(rng: &mut impl Rng, amplitude: f64) -> Self {
        Self {
            center: [rng.gen_range(-40.0..40.0), rng.gen_range(-50.0..50.0)],
            sigma: 20.0,
            amplitude,
        }
    }

    pub fn displacement(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.amplitude * gauss(x, y, self.center, [self.sigma, self.sigma]))
    }

    /// Applies the bump to a mesh expressed in the face frame, using its x/y as parameters.
    pub fn apply(&self, mesh: &TriangleMesh) -> Result<TriangleMesh> {
        mesh.map_positions(|p| p + self.displacement(p.x, p.y))
    }
}

/// Region of a parameter point for expression fitting.
pub fn region_of(x: f64, y: f64) -> Region {
    let m = (x / 32.0).powi(2) + ((y + 35.0) / 14.0).powi(2);
    if m <= 1.0 {
        Region::Mouth
    } else if y < -25.0 {
        Region::Chin
    } else {
        Region::Upper
    }
}

/// Regular grid triangulation of the elliptical domain with spacing `h`. Returns the
/// parameter coordinates and faces.
pub fn face_grid(h: f64) -> Result<(Vec<[f64; 2]>, Vec<[usize; 3]>)> {
    if !(h > 0.5 && h < 20.0) {
        return Err(Error::InvalidArgument(format!("grid spacing {h} mm is out of range")));
    }
    let nx = (2.0 * DOMAIN_HALF_WIDTH / h).floor() as usize + 1;
    let ny = (2.0 * DOMAIN_HALF_HEIGHT / h).floor() as usize + 1;
    let x0 = -h * (nx - 1) as f64 / 2.0;
    let y0 = DOMAIN_CENTER_Y - h * (ny - 1) as f64 / 2.0;
    let at = |i: usize, j: usize| [x0 + i as f64 * h, y0 + j as f64 * h];
    let inside = |p: [f64; 2]| {
        (p[0] / DOMAIN_HALF_WIDTH).powi(2) + ((p[1] - DOMAIN_CENTER_Y) / DOMAIN_HALF_HEIGHT).powi(2) <= 1.0
    };
    let mut index = vec![usize::MAX; nx * ny];
    let mut uv = Vec::new();
    let mut faces = Vec::new();
    let mut id = |i: usize, j: usize, uv: &mut Vec<[f64; 2]>| {
        let k = j * nx + i;
        if index[k] == usize::MAX {
            index[k] = uv.len();
            uv.push(at(i, j));
        }
        index[k]
    };
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            if [at(i, j), at(i + 1, j), at(i, j + 1), at(i + 1, j + 1)].iter().all(|&p| inside(p)) {
                let a = id(i, j, &mut uv);
                let b = id(i + 1, j, &mut uv);
                let c = id(i + 1, j + 1, &mut uv);
                let d = id(i, j + 1, &mut uv);
                // alternate diagonals to avoid a preferred direction
                if (i + j) % 2 == 0 {
                    faces.push([a, b, c]);
                    faces.push([a, c, d]);
                } else {
                    faces.push([a, b, d]);
                    faces.push([b, c, d]);
                }
            }
        }
    }
    Ok((uv, faces))
}

/// Vertex whose parameter point is closest to `target` (lowest index on ties).
pub fn nearest_uv(uv: &[[f64; 2]], target: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in uv.iter().enumerate() {
        let d = (p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Everything needed to regenerate one synthetic face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceSpec {
    pub params: FaceParams,
    /// Expression weights, one per entry of [`EXPRESSION_NAMES`].
    pub alpha: Vec<f64>,
    pub warp: Option<Warp>,
    /// Rigid placement of the face frame in the output mesh.
    pub pose: Similarity,
    pub spacing: f64,
    /// Remove the triangles around the mouth.
    pub occlude_mouth: bool,
}

impl FaceSpec {
    pub fn neutral(spacing: f64) -> Self {
        Self {
            params: FaceParams::default(),
            alpha: vec![0.0; EXPRESSION_NAMES.len()],
            warp: None,
            pose: Similarity::identity(),
            spacing,
            occlude_mouth: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFace {
    pub spec: FaceSpec,
    pub mesh: TriangleMesh,
    /// Landmark vertex ids, indexed by label - 1.
    pub landmarks: [usize; LANDMARK_COUNT],
    /// Parameter point of every vertex.
    pub uv: Vec<[f64; 2]>,
}

impl SyntheticFace {
    pub fn landmark_positions(&self) -> Vec<Point3<f64>> {
        self.landmarks.iter().map(|&v| self.mesh.vertex(v)).collect()
    }

    pub fn annotated(&self) -> AnnotatedMesh {
        AnnotatedMesh {
            mesh: self.mesh.clone(),
            landmarks: self.landmarks,
        }
    }
}

/// Surface point of the unposed, unscaled face at parameter `(x, y)`, including expression
/// and warp.
fn surface_point(spec: &FaceSpec, x: f64, y: f64) -> Vector3<f64> {
    let mut p = Vector3::new(x, y, spec.params.height(x, y));
    for (k, &a) in spec.alpha.iter().enumerate() {
        if a != 0.0 {
            p += expression_displacement(k, x, y) * a;
        }
    }
    if let Some(w) = &spec.warp {
        p += w.displacement(x, y);
    }
    p
}

pub fn generate_face(spec: &FaceSpec) -> Result<SyntheticFace> {
    if spec.alpha.len() != EXPRESSION_NAMES.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} expression weights, got {}",
            EXPRESSION_NAMES.len(),
            spec.alpha.len()
        )));
    }
    let (uv, faces) = face_grid(spec.spacing)?;
    let s = spec.params.scale;
    let vertices: Vec<Point3<f64>> = uv
        .iter()
        .map(|&[x, y]| spec.pose.apply(&Point3::from(surface_point(spec, x, y) * s)))
        .collect();
    let targets = spec.params.landmark_uv();
    let mesh = TriangleMesh::new(vertices, faces)?;
    if !spec.occlude_mouth {
        let landmarks = targets.map(|t| nearest_uv(&uv, t));
        return Ok(SyntheticFace {
            spec: spec.clone(),
            mesh,
            landmarks,
            uv,
        });
    }
    let hole = |f: usize| {
        let [a, b, c] = mesh.faces()[f];
        let x = (uv[a][0] + uv[b][0] + uv[c][0]) / 3.0;
        let y = (uv[a][1] + uv[b][1] + uv[c][1]) / 3.0;
        (x / 28.0).powi(2) + ((y + 36.0) / 10.0).powi(2) <= 1.0
    };
    let (mesh, old) = mesh.filter_faces(|f| !hole(f))?;
    let uv: Vec<[f64; 2]> = old.iter().map(|&v| uv[v]).collect();
    let landmarks = targets.map(|t| nearest_uv(&uv, t));
    Ok(SyntheticFace {
        spec: spec.clone(),
        mesh,
        landmarks,
        uv,
    })
}

/// Rigid pose with rotation angle up to `max_angle_deg` about a random axis and a
/// translation of up to `max_shift` mm per axis.
pub fn random_pose(rng: &mut impl Rng, max_angle_deg: f64, max_shift: f64) -> Similarity {
    let axis = random_rotation(rng.gen(), rng.gen(), rng.gen()) * Vector3::z();
    let angle = rng.gen_range(-max_angle_deg..=max_angle_deg).to_radians();
    let rotation: Matrix3<f64> = *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix();
    let shift = if max_shift > 0.0 { max_shift } else { f64::MIN_POSITIVE };
    Similarity {
        scale: 1.0,
        rotation,
        translation: Vector3::new(
            rng.gen_range(-shift..shift),
            rng.gen_range(-shift..shift),
            rng.gen_range(-shift..shift),
        ),
    }
}

/// Random expression weights in `[0, max]`.
pub fn random_alpha(rng: &mut impl Rng, max: f64) -> Vec<f64> {
    (0..EXPRESSION_NAMES.len()).map(|_| rng.gen_range(0.0..=max)).collect()
}

/// Blendshape rig built on the mean face at grid spacing `spacing`, in the face frame.
pub fn build_rig(spacing: f64) -> Result<BlendshapeRig> {
    let spec = FaceSpec::neutral(spacing);
    let face = generate_face(&spec)?;
    let blendshapes = (0..EXPRESSION_NAMES.len())
        .map(|k| face.uv.iter().map(|&[x, y]| expression_displacement(k, x, y)).collect())
        .collect();
    let regions = face.uv.iter().map(|&[x, y]| region_of(x, y)).collect();
    BlendshapeRig::new(
        face.mesh,
        EXPRESSION_NAMES.iter().map(|s| s.to_string()).collect(),
        blendshapes,
        regions,
        face.landmarks,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetOptions {
    pub train: usize,
    pub test: usize,
    pub scan_spacing: f64,
    pub rig_spacing: f64,
    pub max_alpha: f64,
    pub max_angle_deg: f64,
    pub max_shift: f64,
    pub warp_amplitude: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            train: 10,
            test: 10,
            scan_spacing: 2.0,
            rig_spacing: 4.0,
            max_alpha: 0.6,
            max_angle_deg: 15.0,
            max_shift: 30.0,
            warp_amplitude: 3.0,
        }
    }
}

/// Training faces (random identity, expression and pose) and held-out test faces (which
/// additionally carry a warp bump).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SyntheticFace>,
    pub test: Vec<SyntheticFace>,
}

/// Face spec number `index` of a dataset stream; independent of the other indices.
pub fn dataset_spec(seed: u64, index: usize, warped: bool, opts: &DatasetOptions) -> FaceSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let params = FaceParams::random(&mut rng);
    let alpha = random_alpha(&mut rng, opts.max_alpha);
    let pose = random_pose(&mut rng, opts.max_angle_deg, opts.max_shift);
    let warp = warped.then(|| Warp::random(&mut rng, opts.warp_amplitude));
    FaceSpec {
        params,
        alpha,
        warp,
        pose,
        spacing: opts.scan_spacing,
        occlude_mouth: false,
    }
}

pub fn generate_dataset(seed: u64, opts: &DatasetOptions) -> Result<Dataset> {
    let gen = |range: std::ops::Range<usize>, warped: bool| -> Result<Vec<SyntheticFace>> {
        range
            .into_par_iter()
            .map(|i| generate_face(&dataset_spec(seed, i, warped, opts)))
            .collect()
    };
    Ok(Dataset {
        train: gen(0..opts.train, false)?,
        test: gen(opts.train..opts.train + opts.test, true)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fast_marching;

    #[test]
    fn mean_face_is_a_connected_open_surface() {
        let face = generate_face(&FaceSpec::neutral(3.0)).unwrap();
        let n = face.mesh.vertex_count();
        assert!((3000..4500).contains(&n), "{n} vertices");
        let f = fast_marching(&face.mesh, 0).unwrap();
        assert!((0..n).all(|v| f.is_reachable(v)));
        assert!(face.mesh.boundary_flags().iter().any(|&b| b));
        let rig_face = generate_face(&FaceSpec::neutral(4.0)).unwrap();
        assert!((1700..2600).contains(&rig_face.mesh.vertex_count()));
    }

    #[test]
    fn landmarks_sit_on_their_features() {
        let face = generate_face(&FaceSpec::neutral(3.0)).unwrap();
        for (k, &v) in face.landmarks.iter().enumerate() {
            let c = MEAN_FEATURES[k].center;
            let d = ((face.uv[v][0] - c[0]).powi(2) + (face.uv[v][1] - c[1]).powi(2)).sqrt();
            assert!(d <= 3.0 * std::f64::consts::SQRT_2 / 2.0 + 1e-9);
        }
        // right side at -x
        assert!(face.landmark_positions()[0].x < face.landmark_positions()[2].x);
        // nose tip protrudes the most among the landmarks
        let z: Vec<f64> = face.landmark_positions().iter().map(|p| p.z).collect();
        assert!(z.iter().all(|&h| h <= z[6]));
    }

    #[test]
    fn outward_normals_point_to_the_viewer() {
        let face = generate_face(&FaceSpec::neutral(3.0)).unwrap();
        let mean = face.mesh.normals().iter().sum::<Vector3<f64>>() / face.mesh.vertex_count() as f64;
        assert!(mean.z > 0.8, "{mean:?}");
        assert!(face.mesh.normal(face.landmarks[6]).z > 0.8);
    }

    #[test]
    fn generation_is_deterministic() {
        let opts = DatasetOptions {
            train: 2,
            test: 1,
            ..Default::default()
        };
        let a = generate_dataset(7, &opts).unwrap();
        let b = generate_dataset(7, &opts).unwrap();
        assert_eq!(a.test[0].mesh.vertices(), b.test[0].mesh.vertices());
        assert_eq!(a.train[1].spec, b.train[1].spec);
        let c = generate_dataset(8, &opts).unwrap();
        assert_ne!(a.train[0].spec, c.train[0].spec);
    }

    #[test]
    fn pose_moves_landmarks_rigidly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut spec = FaceSpec::neutral(4.0);
        let base = generate_face(&spec).unwrap();
        spec.pose = random_pose(&mut rng, 30.0, 20.0);
        let moved = generate_face(&spec).unwrap();
        assert_eq!(base.landmarks, moved.landmarks);
        for (a, b) in base.landmark_positions().iter().zip(moved.landmark_positions()) {
            assert!((spec.pose.apply(a) - b).norm() < 1e-9);
        }
    }

    #[test]
    fn occlusion_removes_the_mouth() {
        let mut spec = FaceSpec::neutral(3.0);
        let full = generate_face(&spec).unwrap();
        spec.occlude_mouth = true;
        let holed = generate_face(&spec).unwrap();
        assert!(holed.mesh.vertex_count() < full.mesh.vertex_count());
        assert!(!holed.uv.iter().any(|&[x, y]| (x / 20.0).powi(2) + ((y + 36.0) / 6.0).powi(2) < 1.0));
        assert_eq!(holed.mesh.vertex(holed.landmarks[6]), full.mesh.vertex(full.landmarks[6]));
    }

    #[test]
    fn rig_blendshapes_match_the_expression_functions() {
        let rig = build_rig(4.0).unwrap();
        let mut spec = FaceSpec::neutral(4.0);
        spec.alpha = vec![0.3, 0.0, 0.2, 0.0, 0.5, 0.1];
        let face = generate_face(&spec).unwrap();
        let blended = rig.blend(&spec.alpha).unwrap();
        for (p, q) in blended.vertices().iter().zip(face.mesh.vertices()) {
            assert!((p - q).norm() < 1e-9);
        }
        for r in [Region::Upper, Region::Chin, Region::Mouth] {
            assert!(rig.regions().iter().filter(|&&x| x == r).count() > 30);
        }
    }
}
