//! Template-to-scan registration: affine landmark alignment, blendshape expression fitting
//! and per-vertex affine shape fitting.

mod energy;
mod fit;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Matrix3, Matrix3x4, Matrix4, Point3, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use energy::{energy_data, energy_expr, energy_rigid, energy_shape, energy_smooth, ShapeWeights, VertexTransforms};
pub use fit::{fit_expression, fit_shape, ExpressionFit, ExpressionOptions, ShapeFit, ShapeOptions};

use crate::error::{Error, Result};
use crate::mesh::{load_mesh_file, save_mesh_file, TriangleIndex, TriangleMesh};
use crate::model::{TrainedModel, LANDMARK_COUNT};
use crate::optim::{minimize, Evaluation, MinimizeOptions};
use crate::predict::{predict_landmarks, LandmarkPrediction, PredictOptions};

pub const RIG_VERSION: u32 = 1;

/// Expression-fitting region of a template vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Upper,
    Chin,
    Mouth,
}

/// Rest pose, blendshape displacement fields, region masks and landmark vertices.
#[derive(Debug, Clone)]
pub struct BlendshapeRig {
    neutral: TriangleMesh,
    names: Vec<String>,
    blendshapes: Vec<Vec<Vector3<f64>>>,
    regions: Vec<Region>,
    landmarks: [usize; LANDMARK_COUNT],
}

impl BlendshapeRig {
    pub fn new(
        neutral: TriangleMesh,
        names: Vec<String>,
        blendshapes: Vec<Vec<Vector3<f64>>>,
        regions: Vec<Region>,
        landmarks: [usize; LANDMARK_COUNT],
    ) -> Result<Self> {
        let n = neutral.vertex_count();
        if names.len() != blendshapes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} blendshape names for {} blendshapes",
                names.len(),
                blendshapes.len()
            )));
        }
        if let Some(k) = blendshapes.iter().position(|b| b.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "blendshape {k} has {} displacements for {n} vertices",
                blendshapes[k].len()
            )));
        }
        if blendshapes.iter().flatten().any(|d| !d.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("blendshape displacement".into()));
        }
        if regions.len() != n {
            return Err(Error::InvalidArgument(format!("{} region labels for {n} vertices", regions.len())));
        }
        if let Some(&v) = landmarks.iter().find(|&&v| v >= n) {
            return Err(Error::OutOfRange { index: v, len: n });
        }
        Ok(Self {
            neutral,
            names,
            blendshapes,
            regions,
            landmarks,
        })
    }

    pub fn neutral(&self) -> &TriangleMesh {
        &self.neutral
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn blendshapes(&self) -> &[Vec<Vector3<f64>>] {
        &self.blendshapes
    }

    pub fn blendshape_count(&self) -> usize {
        self.blendshapes.len()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn landmarks(&self) -> &[usize; LANDMARK_COUNT] {
        &self.landmarks
    }

    pub fn landmark_positions(&self) -> Vec<Point3<f64>> {
        self.landmarks.iter().map(|&v| self.neutral.vertex(v)).collect()
    }

    /// Vertex positions of `A_0 + sum alpha_k A_k`.
    pub fn blend_positions(&self, alpha: &[f64]) -> Result<Vec<Point3<f64>>> {
        if alpha.len() != self.blendshapes.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} blend weights, got {}",
                self.blendshapes.len(),
                alpha.len()
            )));
        }
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument("blend weights must lie in [0, 1]".into()));
        }
        let mut p = self.neutral.vertices().to_vec();
        for (a, shape) in alpha.iter().zip(&self.blendshapes) {
            if *a != 0.0 {
                for (q, d) in p.iter_mut().zip(shape) {
                    *q += d * *a;
                }
            }
        }
        Ok(p)
    }

    pub fn blend(&self, alpha: &[f64]) -> Result<TriangleMesh> {
        self.neutral.with_positions(self.blend_positions(alpha)?)
    }

    /// Rig mapped by `t`: rest-pose vertices as points, displacements by the linear block.
    pub fn transformed(&self, t: &AffineTransform) -> Result<Self> {
        let lin = t.linear();
        Ok(Self {
            neutral: self.neutral.map_positions(|p| t.apply(p))?,
            names: self.names.clone(),
            blendshapes: self
                .blendshapes
                .iter()
                .map(|b| b.iter().map(|d| lin * d).collect())
                .collect(),
            regions: self.regions.clone(),
            landmarks: self.landmarks,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    version: u32,
    /// Rest-pose mesh, relative to the rig file's directory.
    mesh: PathBuf,
    names: Vec<String>,
    blendshapes: Vec<Vec<[f64; 3]>>,
    regions: Vec<Region>,
    landmarks: [usize; LANDMARK_COUNT],
}

/// Writes the rig JSON to `path` and the rest pose to `mesh_name` beside it.
pub fn save_rig_file(rig: &BlendshapeRig, path: &Path, mesh_name: &str) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(""));
    save_mesh_file(dir.join(mesh_name), &rig.neutral, None)?;
    let file = RigFile {
        version: RIG_VERSION,
        mesh: PathBuf::from(mesh_name),
        names: rig.names.clone(),
        blendshapes: rig
            .blendshapes
            .iter()
            .map(|b| b.iter().map(|d| [d.x, d.y, d.z]).collect())
            .collect(),
        regions: rig.regions.clone(),
        landmarks: rig.landmarks,
    };
    let w = std::fs::File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    write_json(&file, w)
}

fn write_json<T: Serialize, W: Write>(value: &T, w: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn load_rig_file(path: &Path) -> Result<BlendshapeRig> {
    let r = std::fs::File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    let mut text = String::new();
    std::io::BufReader::new(r).read_to_string(&mut text)?;
    let file: RigFile = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if file.version != RIG_VERSION {
        return Err(Error::VersionMismatch {
            found: file.version,
            expected: RIG_VERSION,
        });
    }
    let dir = path.parent().unwrap_or(Path::new(""));
    let neutral = load_mesh_file(&dir.join(&file.mesh))?;
    BlendshapeRig::new(
        neutral,
        file.names,
        file.blendshapes
            .into_iter()
            .map(|b| b.into_iter().map(Vector3::from).collect())
            .collect(),
        file.regions,
        file.landmarks,
    )
}

/// `x -> M [x; 1]` with a 3x4 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: Matrix3x4<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3x4::identity(),
        }
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.column(3).into_owned()
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.linear() * p.coords + self.translation())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub transform: AffineTransform,
    /// Final `sum |T l_i - l'_i|^2` in mm^2.
    pub energy: f64,
    pub iterations: usize,
}

fn landmark_energy(t: &AffineTransform, src: &[Point3<f64>], dst: &[Point3<f64>]) -> f64 {
    src.iter().zip(dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum()
}

/// Least-squares affine map of `template` onto `scan` found by quasi-Newton descent from
/// the identity. Coordinates are centered and scaled internally for conditioning.
pub fn affine_align(template: &[Point3<f64>], scan: &[Point3<f64>]) -> Result<AffineFit> {
    if template.len() != scan.len() || template.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "affine alignment needs >= 4 paired landmarks, got {} and {}",
            template.len(),
            scan.len()
        )));
    }
    if template.iter().chain(scan).any(|p| !p.coords.iter().all(|x| x.is_finite())) {
        return Err(Error::NonFinite("landmark coordinates".into()));
    }
    let n = template.len() as f64;
    let c = template.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let s = (template.iter().map(|p| (p.coords - c).norm_squared()).sum::<f64>() / n).sqrt();
    if !(s > 0.0) {
        return Err(Error::Degenerate("template landmarks coincide".into()));
    }
    let h: Vec<Vector4<f64>> = template
        .iter()
        .map(|p| {
            let q = (p.coords - c) / s;
            Vector4::new(q.x, q.y, q.z, 1.0)
        })
        .collect();
    let normal: Matrix4<f64> = h.iter().map(|v| v * v.transpose()).sum();
    let ev = normal.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if !(lo > 1e-10 * hi) {
        return Err(Error::Degenerate(format!(
            "landmark configuration is (nearly) coplanar: normal-system condition {:.3e}",
            hi / lo.max(f64::MIN_POSITIVE)
        )));
    }
    // parameters: 3x4 matrix B acting on the normalized homogeneous coordinates, column-major
    let targets: Vec<Vector3<f64>> = scan.iter().map(|p| p.coords).collect();
    let objective = |x: &DVector<f64>| {
        let b = Matrix3x4::from_column_slice(x.as_slice());
        let mut value = 0.0;
        let mut grad = Matrix3x4::zeros();
        for (hv, t) in h.iter().zip(&targets) {
            let r = b * hv - t;
            value += r.norm_squared();
            grad += r * hv.transpose() * 2.0;
        }
        Evaluation::new(value, DVector::from_column_slice(grad.as_slice()))
    };
    // the identity map expressed in normalized coordinates
    let mut b0 = Matrix3x4::zeros();
    b0.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * s));
    b0.set_column(3, &c);
    let opts = MinimizeOptions {
        tol: 1e-15,
        ..Default::default()
    };
    let m = minimize(objective, DVector::from_column_slice(b0.as_slice()), None, &opts)?;
    let b = Matrix3x4::from_column_slice(m.x.as_slice());
    let lin = b.fixed_view::<3, 3>(0, 0) / s;
    let trans = b.column(3) - lin * c;
    let mut matrix = Matrix3x4::zeros();
    matrix.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
    matrix.set_column(3, &trans);
    let transform = AffineTransform { matrix };
    if !matrix.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("affine alignment".into()));
    }
    if !(lin.determinant() > 0.0) {
        return Err(Error::Degenerate("affine alignment reverses orientation".into()));
    }
    Ok(AffineFit {
        transform,
        energy: landmark_energy(&transform, template, scan),
        iterations: m.iterations,
    })
}

/// Nearest scan surface points of a set of source vertices.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub points: Vec<Point3<f64>>,
    /// Unit outer normals of the scan at `points`.
    pub normals: Vec<Vector3<f64>>,
    /// Zero for rejected correspondences.
    pub weights: Vec<f64>,
    pub valid: Vec<bool>,
    /// The nearest point lies on the scan boundary.
    pub on_boundary: Vec<bool>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Same matches with different weights (zero wherever invalid).
    pub fn reweighted(&self, weight: impl Fn(usize) -> f64) -> Self {
        let mut out = self.clone();
        for i in 0..out.len() {
            out.weights[i] = if out.valid[i] { weight(i) } else { 0.0 };
        }
        out
    }
}

/// For each source vertex, the closest point on the scan surface. `limit(i)` returns the
/// normal-angle limit (degrees) and weight of vertex `i`; matches on the scan boundary or
/// beyond the angle limit get weight zero.
pub fn correspondences<F>(source: &TriangleMesh, scan: &TriangleIndex, limit: F) -> CorrespondenceSet
where
    F: Fn(usize) -> (f64, f64) + Sync,
{
    let rows: Vec<(Point3<f64>, Vector3<f64>, bool, bool, f64)> = (0..source.vertex_count())
        .into_par_iter()
        .map(|i| {
            let sp = scan.closest_point(&source.vertex(i));
            let n = scan.normal_at(&sp);
            let (angle, weight) = limit(i);
            let cos = source.normal(i).dot(&n).clamp(-1.0, 1.0);
            let ok = !sp.on_boundary && cos >= angle.to_radians().cos();
            (sp.point, n, ok, sp.on_boundary, if ok { weight } else { 0.0 })
        })
        .collect();
    let mut set = CorrespondenceSet {
        points: Vec::with_capacity(rows.len()),
        normals: Vec::with_capacity(rows.len()),
        weights: Vec::with_capacity(rows.len()),
        valid: Vec::with_capacity(rows.len()),
        on_boundary: Vec::with_capacity(rows.len()),
    };
    for (p, n, ok, b, w) in rows {
        set.points.push(p);
        set.normals.push(n);
        set.valid.push(ok);
        set.on_boundary.push(b);
        set.weights.push(w);
    }
    set
}

/// Signed point-to-plane distance `<p - NN(p), n(NN(p))>` of every vertex of `mesh`
/// against the indexed surface; positive on the outer side. The flag marks vertices whose
/// nearest point lies on the surface boundary.
pub fn point_to_plane(mesh: &TriangleMesh, surface: &TriangleIndex) -> Vec<(f64, bool)> {
    mesh.vertices()
        .par_iter()
        .map(|p| {
            let sp = surface.closest_point(p);
            ((p - sp.point).dot(&surface.normal_at(&sp)), sp.on_boundary)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    /// Vertices whose nearest scan point is off the scan boundary.
    pub count: usize,
    pub mean_abs: f64,
    pub rms: f64,
    pub max_abs: f64,
}

impl ResidualStats {
    pub fn from_residuals(residuals: &[f64], interior: &[bool]) -> Self {
        let vals: Vec<f64> = residuals
            .iter()
            .zip(interior)
            .filter(|(_, &ok)| ok)
            .map(|(r, _)| r.abs())
            .collect();
        let count = vals.len();
        let denom = count.max(1) as f64;
        Self {
            count,
            mean_abs: vals.iter().sum::<f64>() / denom,
            rms: (vals.iter().map(|v| v * v).sum::<f64>() / denom).sqrt(),
            max_abs: vals.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegisterOptions {
    pub predict: PredictOptions,
    pub expression: ExpressionOptions,
    pub shape: ShapeOptions,
}

/// Where the scan landmarks come from.
pub enum LandmarkSource<'a> {
    Predict(&'a TrainedModel),
    Given(Vec<Point3<f64>>),
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Scan landmarks used for the affine alignment, indexed by label - 1.
    pub landmarks: Vec<Point3<f64>>,
    pub prediction: Option<LandmarkPrediction>,
    pub affine: AffineFit,
    pub expression: ExpressionFit,
    pub shape: ShapeFit,
    /// Deformed template; same connectivity as the rig.
    pub mesh: TriangleMesh,
    /// Signed point-to-plane residual of every deformed vertex (mm).
    pub residuals: Vec<f64>,
    /// Residual is measured against an interior scan point.
    pub interior: Vec<bool>,
    pub stats: ResidualStats,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub alpha: Vec<f64>,
    pub blendshapes: Vec<String>,
    pub landmarks: Vec<[f64; 3]>,
    pub affine: AffineTransform,
    pub affine_energy: f64,
    pub expression_energy: Vec<f64>,
    pub shape_energy: Vec<f64>,
    pub residuals: ResidualStats,
    pub warnings: Vec<String>,
}

impl RegistrationResult {
    pub fn report(&self, rig: &BlendshapeRig) -> RegistrationReport {
        RegistrationReport {
            alpha: self.expression.alpha.clone(),
            blendshapes: rig.names().to_vec(),
            landmarks: self.landmarks.iter().map(|p| [p.x, p.y, p.z]).collect(),
            affine: self.affine.transform,
            affine_energy: self.affine.energy,
            expression_energy: self.expression.energy_trace.clone(),
            shape_energy: self.shape.energy_trace.clone(),
            residuals: self.stats,
            warnings: self.warnings.clone(),
        }
    }
}

pub fn save_report<W: Write>(report: &RegistrationReport, w: W) -> Result<()> {
    write_json(report, w)
}

/// Landmarks, affine alignment, expression fit and shape fit.
pub fn register(
    rig: &BlendshapeRig,
    scan: &TriangleMesh,
    landmarks: LandmarkSource,
    opts: &RegisterOptions,
) -> Result<RegistrationResult> {
    let (landmarks, prediction) = match landmarks {
        LandmarkSource::Predict(model) => {
            let p = predict_landmarks(scan, model, &opts.predict).map_err(Error::stage("predict_landmarks"))?;
            (p.positions(), Some(p))
        }
        LandmarkSource::Given(l) => {
            if l.len() != LANDMARK_COUNT {
                return Err(Error::InvalidArgument(format!(
                    "expected {LANDMARK_COUNT} landmarks, got {}",
                    l.len()
                )));
            }
            (l, None)
        }
    };
    let affine = affine_align(&rig.landmark_positions(), &landmarks).map_err(Error::stage("affine_align"))?;
    let aligned = rig.transformed(&affine.transform)?;
    let index = TriangleIndex::new(scan);
    let expression = fit_expression(&aligned, &index, &opts.expression).map_err(Error::stage("fit_expression"))?;
    let shape = fit_shape(&expression.mesh, &index, &opts.shape).map_err(Error::stage("fit_shape"))?;
    let (residuals, interior): (Vec<f64>, Vec<bool>) = point_to_plane(&shape.mesh, &index)
        .into_iter()
        .map(|(r, b)| (r, !b))
        .unzip();
    let stats = ResidualStats::from_residuals(&residuals, &interior);
    let mut warnings = Vec::new();
    if let Some(w) = &expression.warning {
        warnings.push(w.clone());
    }
    Ok(RegistrationResult {
        landmarks,
        prediction,
        affine,
        mesh: shape.mesh.clone(),
        expression,
        shape,
        residuals,
        interior,
        stats,
        warnings,
    })
}
