//! Landmark model: Markov-network potentials, descriptor PCA and per-class decision
//! ellipsoids, learned from annotated meshes.

mod cluster;
pub(crate) mod repr;
mod stats;

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DVector, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cluster::{m_cluster, medoid, mvee, Ellipsoid, MCluster, MVEE_INFLATE, MVEE_MAX_ITER, MVEE_TOL};
pub use stats::{GaussianPotential, LogDensity, Pca};

use crate::descriptor::{canonical_form_sampled, finger_prints, validate_radii, FingerPrint, MdsOptions, DEFAULT_RADII};
use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::transform::{umeyama, Similarity};

pub const MODEL_VERSION: u32 = 1;
pub const LANDMARK_COUNT: usize = 8;

pub const LANDMARK_NAMES: [&str; LANDMARK_COUNT] = [
    "right inner eye corner",
    "right outer eye corner",
    "left inner eye corner",
    "left outer eye corner",
    "right subalare",
    "left subalare",
    "nose tip",
    "subnasal",
];

/// Landmark labels are 1-based.
pub const NOSE_TIP: usize = 7;
pub const SUBNASAL: usize = 8;
pub const RIGHT_SUBALARE: usize = 5;
pub const LEFT_SUBALARE: usize = 6;

pub const DEFAULT_EDGES: [(usize, usize); 10] = [
    (1, 2),
    (3, 4),
    (1, 3),
    (1, 7),
    (3, 7),
    (5, 7),
    (6, 7),
    (7, 8),
    (5, 8),
    (6, 8),
];

/// Node labels and undirected edges of the landmark network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkGraph {
    pub labels: Vec<usize>,
    pub names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

impl Default for LandmarkGraph {
    fn default() -> Self {
        Self {
            labels: (1..=LANDMARK_COUNT).collect(),
            names: LANDMARK_NAMES.iter().map(|s| s.to_string()).collect(),
            edges: DEFAULT_EDGES.to_vec(),
        }
    }
}

impl LandmarkGraph {
    pub fn validate(&self) -> Result<()> {
        if self.labels != (1..=LANDMARK_COUNT).collect::<Vec<_>>() {
            return Err(Error::Schema(format!("graph labels must be 1..={LANDMARK_COUNT}")));
        }
        if self.names.len() != LANDMARK_COUNT {
            return Err(Error::Schema("graph needs one name per label".into()));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.edges {
            if a == b || !(1..=LANDMARK_COUNT).contains(&a) || !(1..=LANDMARK_COUNT).contains(&b) {
                return Err(Error::Schema(format!("invalid edge ({a}, {b})")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Schema(format!("duplicate edge ({a}, {b})")));
            }
        }
        // connectivity by flood fill
        let mut reached = vec![false; LANDMARK_COUNT + 1];
        let mut stack = vec![1];
        reached[1] = true;
        while let Some(v) = stack.pop() {
            for &(a, b) in &self.edges {
                let other = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                if !reached[other] {
                    reached[other] = true;
                    stack.push(other);
                }
            }
        }
        if reached[1..].iter().any(|r| !r) {
            return Err(Error::Schema("landmark graph is not connected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodePotential {
    pub label: usize,
    pub gaussian: GaussianPotential,
}

/// Potential over the canonical displacement `c(b) - c(a)` expressed in the template frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgePotential {
    pub a: usize,
    pub b: usize,
    pub gaussian: GaussianPotential,
}

/// Decision region of one landmark class in PCA space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRegion {
    pub label: usize,
    pub ellipsoid: Ellipsoid,
    /// Medoid of the class's projected training samples.
    #[serde(with = "repr::dvector")]
    pub medoid: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePositions {
    /// Mean landmark positions, indexed by label - 1.
    #[serde(with = "repr::points")]
    pub landmarks: Vec<Point3<f64>>,
    /// Alignment template: the landmarks followed by surrounding surface points.
    #[serde(with = "repr::points")]
    pub alignment: Vec<Point3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub version: u32,
    pub radii: Vec<f64>,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "D")]
    pub d: usize,
    pub graph: LandmarkGraph,
    pub node_potentials: Vec<NodePotential>,
    pub edge_potentials: Vec<EdgePotential>,
    pub pca: Pca,
    pub ellipsoids: Vec<ClassRegion>,
    pub template_positions: TemplatePositions,
}

impl TrainedModel {
    /// Checks shapes and numeric invariants of a deserialized or freshly trained model.
    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: MODEL_VERSION,
            });
        }
        validate_radii(&self.radii).map_err(|e| Error::Schema(e.to_string()))?;
        let s = self.radii.len();
        if self.d != 3 {
            return Err(Error::Schema(format!("D must be 3, got {}", self.d)));
        }
        if !(self.m > 0.0) {
            return Err(Error::Schema("M must be positive".into()));
        }
        self.graph.validate()?;
        if self.node_potentials.len() != LANDMARK_COUNT {
            return Err(Error::Schema("need one node potential per landmark".into()));
        }
        for (k, n) in self.node_potentials.iter().enumerate() {
            if n.label != k + 1 {
                return Err(Error::Schema("node potentials must be ordered by label".into()));
            }
            check_gaussian(&n.gaussian, s)?;
        }
        if self.edge_potentials.len() != self.graph.edges.len() {
            return Err(Error::Schema("need one edge potential per graph edge".into()));
        }
        for (e, &(a, b)) in self.edge_potentials.iter().zip(&self.graph.edges) {
            if (e.a, e.b) != (a, b) {
                return Err(Error::Schema("edge potentials must follow the graph's edge list".into()));
            }
            check_gaussian(&e.gaussian, 3)?;
        }
        if self.pca.mean.len() != s
            || self.pca.components.nrows() != self.d
            || self.pca.components.ncols() != s
            || self.pca.explained_ratio.len() != self.d
        {
            return Err(Error::Schema("PCA shapes do not match radii and D".into()));
        }
        if self.ellipsoids.len() != LANDMARK_COUNT {
            return Err(Error::Schema("need one ellipsoid per landmark".into()));
        }
        for (k, r) in self.ellipsoids.iter().enumerate() {
            let e = &r.ellipsoid;
            if r.label != k + 1
                || e.center.len() != self.d
                || e.shape.nrows() != self.d
                || e.shape.ncols() != self.d
                || r.medoid.len() != self.d
            {
                return Err(Error::Schema(format!("malformed ellipsoid for label {}", k + 1)));
            }
            if e.shape.clone().cholesky().is_none() {
                return Err(Error::Schema(format!("ellipsoid {} is not positive definite", k + 1)));
            }
        }
        let t = &self.template_positions;
        if t.landmarks.len() != LANDMARK_COUNT || t.alignment.len() < LANDMARK_COUNT {
            return Err(Error::Schema("template positions are incomplete".into()));
        }
        if t.landmarks.iter().chain(&t.alignment).any(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(Error::Schema("template positions must be finite".into()));
        }
        Ok(())
    }

    /// Projects a finger print into PCA space.
    pub fn project(&self, fp: &FingerPrint) -> Result<DVector<f64>> {
        if fp.radii != self.radii {
            return Err(Error::Incompatible(
                "finger print radii differ from the model's radii".into(),
            ));
        }
        Ok(self.pca.project(&DVector::from_vec(fp.distortions.clone())))
    }

    pub fn region(&self, label: usize) -> &ClassRegion {
        &self.ellipsoids[label - 1]
    }
}

fn check_gaussian(g: &GaussianPotential, dim: usize) -> Result<()> {
    if g.mean.len() != dim || g.covariance.nrows() != dim || g.covariance.ncols() != dim {
        return Err(Error::Schema(format!("Gaussian must have dimension {dim}")));
    }
    if (g.covariance.clone() - g.covariance.transpose()).amax() > 1e-9 * g.covariance.amax().max(1.0) {
        return Err(Error::Schema("covariance is not symmetric".into()));
    }
    if g.covariance.clone().cholesky().is_none() {
        return Err(Error::Schema("covariance is not positive definite".into()));
    }
    Ok(())
}

/// All labels whose ellipsoid contains `projection` (possibly none).
pub fn classify_vertex(projection: &DVector<f64>, model: &TrainedModel) -> Vec<usize> {
    model
        .ellipsoids
        .iter()
        .filter(|r| r.ellipsoid.contains(projection))
        .map(|r| r.label)
        .collect()
}

pub fn save_model<W: Write>(model: &TrainedModel, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, model)?;
    Ok(())
}

pub fn load_model<R: Read>(r: R) -> Result<TrainedModel> {
    let value: serde_json::Value = serde_json::from_reader(r)?;
    if let Some(v) = value.get("version").and_then(|v| v.as_u64()) {
        if v != MODEL_VERSION as u64 {
            return Err(Error::VersionMismatch {
                found: v as u32,
                expected: MODEL_VERSION,
            });
        }
    }
    let model: TrainedModel = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    model.validate()?;
    Ok(model)
}

pub fn save_model_file(model: &TrainedModel, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    save_model(model, std::io::BufWriter::new(f))
}

pub fn load_model_file(path: &Path) -> Result<TrainedModel> {
    let f = std::fs::File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    load_model(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub radii: Vec<f64>,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "D")]
    pub d: usize,
    /// Ridge added to covariances, relative to trace / dim.
    pub ridge: f64,
    pub mds: MdsOptions,
    /// Smallest M-cluster used for an ellipsoid.
    pub min_cluster: usize,
    /// Surface points added to the alignment template.
    pub alignment_points: usize,
    /// Only surface points this close to a landmark join the alignment template (mm).
    pub alignment_radius: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            radii: DEFAULT_RADII.to_vec(),
            m: 1.5,
            d: 3,
            ridge: 1e-3,
            mds: MdsOptions::default(),
            min_cluster: 4,
            alignment_points: 200,
            alignment_radius: 25.0,
        }
    }
}

/// One training mesh with its landmark vertex ids, indexed by label - 1.
#[derive(Debug, Clone)]
pub struct AnnotatedMesh {
    pub mesh: TriangleMesh,
    pub landmarks: [usize; LANDMARK_COUNT],
}

struct MeshFeatures {
    prints: Vec<FingerPrint>,
    canonical: Vec<Point3<f64>>,
    positions: Vec<Point3<f64>>,
}

fn extract(sample: &AnnotatedMesh, opts: &TrainOptions) -> Result<MeshFeatures> {
    let n = sample.mesh.vertex_count();
    for &v in &sample.landmarks {
        if v >= n {
            return Err(Error::OutOfRange { index: v, len: n });
        }
    }
    let prints = finger_prints(&sample.mesh, &sample.landmarks, &opts.radii)?;
    let form = canonical_form_sampled(&sample.mesh, &opts.mds)?;
    let canonical = sample
        .landmarks
        .iter()
        .map(|&v| form.embed_vertex(v))
        .collect::<Result<Vec<_>>>()?;
    let positions = sample.landmarks.iter().map(|&v| sample.mesh.vertex(v)).collect();
    Ok(MeshFeatures {
        prints,
        canonical,
        positions,
    })
}

/// Generalized Procrustes mean of landmark sets, in the frame and scale of the first set.
/// Returns the mean and the similarity taking each set onto it.
pub fn procrustes_mean(sets: &[Vec<Point3<f64>>]) -> Result<(Vec<Point3<f64>>, Vec<Similarity>)> {
    let reference = sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("Procrustes mean of no shapes".into()))?;
    let size = |s: &[Point3<f64>]| {
        let c = s.iter().map(|p| p.coords).sum::<Vector3<f64>>() / s.len() as f64;
        s.iter().map(|p| (p.coords - c).norm_squared()).sum::<f64>().sqrt()
    };
    let ref_size = size(reference);
    let mut mean = reference.clone();
    for _ in 0..100 {
        let aligned: Vec<Vec<Point3<f64>>> = sets
            .iter()
            .map(|s| {
                let t = umeyama(s, &mean, true, false)?;
                Ok(s.iter().map(|p| t.apply(p)).collect())
            })
            .collect::<Result<_>>()?;
        let mut next: Vec<Point3<f64>> = (0..mean.len())
            .map(|k| Point3::from(aligned.iter().map(|a| a[k].coords).sum::<Vector3<f64>>() / aligned.len() as f64))
            .collect();
        // pin the mean to the reference's frame and size to stop drift
        let pin = umeyama(&next, reference, true, false)?;
        next = next.iter().map(|p| pin.apply(p)).collect();
        let s = size(&next);
        let c = next.iter().map(|p| p.coords).sum::<Vector3<f64>>() / next.len() as f64;
        next = next.iter().map(|p| Point3::from(c + (p.coords - c) * (ref_size / s))).collect();
        let change = next.iter().zip(&mean).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        mean = next;
        if change < 1e-10 * ref_size.max(1.0) {
            break;
        }
    }
    let transforms = sets
        .iter()
        .map(|s| umeyama(s, &mean, true, false))
        .collect::<Result<_>>()?;
    Ok((mean, transforms))
}

/// Learns a model from annotated meshes.
pub fn train(dataset: &[AnnotatedMesh], opts: &TrainOptions) -> Result<TrainedModel> {
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 annotated meshes, got {}",
            dataset.len()
        )));
    }
    validate_radii(&opts.radii)?;
    if opts.d != 3 {
        return Err(Error::InvalidArgument("only D = 3 is supported".into()));
    }
    let features: Vec<MeshFeatures> = dataset
        .par_iter()
        .map(|s| extract(s, opts))
        .collect::<Result<_>>()?;

    let sets: Vec<Vec<Point3<f64>>> = features.iter().map(|f| f.positions.clone()).collect();
    let (mean_landmarks, to_mean) = procrustes_mean(&sets)?;

    let graph = LandmarkGraph::default();
    let mut node_potentials = Vec::with_capacity(LANDMARK_COUNT);
    for k in 0..LANDMARK_COUNT {
        let all: Vec<&FingerPrint> = features.iter().map(|f| &f.prints[k]).collect();
        let clean: Vec<&FingerPrint> = all.iter().copied().filter(|p| !p.is_truncated()).collect();
        let used = if clean.len() >= 2 {
            clean
        } else {
            log::warn!(
                "label {}: only {} untruncated finger prints, using all {}",
                k + 1,
                clean.len(),
                all.len()
            );
            all
        };
        let samples: Vec<DVector<f64>> = used
            .iter()
            .map(|p| DVector::from_vec(p.distortions.clone()))
            .collect();
        let (gaussian, singular) = GaussianPotential::fit(&samples, opts.ridge)?;
        if singular {
            log::warn!("label {}: singular descriptor covariance regularized", k + 1);
        }
        node_potentials.push(NodePotential {
            label: k + 1,
            gaussian,
        });
    }

    let mut edge_potentials = Vec::with_capacity(graph.edges.len());
    for &(a, b) in &graph.edges {
        let samples: Vec<DVector<f64>> = features
            .iter()
            .zip(&to_mean)
            .map(|(f, t)| {
                let d = t.apply_vector(&(f.canonical[b - 1] - f.canonical[a - 1]));
                DVector::from_column_slice(d.as_slice())
            })
            .collect();
        let (gaussian, singular) = GaussianPotential::fit(&samples, opts.ridge)?;
        if singular {
            log::warn!("edge ({a}, {b}): singular displacement covariance regularized");
        }
        edge_potentials.push(EdgePotential { a, b, gaussian });
    }

    let pooled: Vec<DVector<f64>> = features
        .iter()
        .flat_map(|f| f.prints.iter().map(|p| DVector::from_vec(p.distortions.clone())))
        .collect();
    let pca = Pca::fit(&pooled, opts.d)?;

    let mut ellipsoids = Vec::with_capacity(LANDMARK_COUNT);
    for k in 0..LANDMARK_COUNT {
        let proj: Vec<DVector<f64>> = features
            .iter()
            .map(|f| pca.project(&DVector::from_vec(f.prints[k].distortions.clone())))
            .collect();
        let cluster = m_cluster(&proj, opts.m)?;
        let mut members = cluster.members.clone();
        if members.len() < opts.min_cluster {
            let mut by_dist: Vec<usize> = (0..proj.len()).collect();
            by_dist.sort_by(|&a, &b| {
                (&proj[a] - &proj[cluster.medoid])
                    .norm()
                    .total_cmp(&(&proj[b] - &proj[cluster.medoid]).norm())
                    .then(a.cmp(&b))
            });
            members = by_dist.into_iter().take(opts.min_cluster).collect();
            members.sort_unstable();
        }
        let pts: Vec<DVector<f64>> = members.iter().map(|&i| proj[i].clone()).collect();
        let ellipsoid = mvee(&pts, MVEE_TOL, MVEE_MAX_ITER)?;
        ellipsoids.push(ClassRegion {
            label: k + 1,
            ellipsoid,
            medoid: proj[cluster.medoid].clone(),
        });
    }

    let alignment = alignment_template(&dataset[0], &to_mean[0], &mean_landmarks, opts);
    let model = TrainedModel {
        version: MODEL_VERSION,
        radii: opts.radii.clone(),
        m: opts.m,
        d: opts.d,
        graph,
        node_potentials,
        edge_potentials,
        pca,
        ellipsoids,
        template_positions: TemplatePositions {
            landmarks: mean_landmarks,
            alignment,
        },
    };
    model.validate()?;
    Ok(model)
}

/// Mean landmarks plus an evenly strided subset of the first mesh's vertices near its
/// landmarks, mapped into the mean frame.
fn alignment_template(
    sample: &AnnotatedMesh,
    to_mean: &Similarity,
    mean_landmarks: &[Point3<f64>],
    opts: &TrainOptions,
) -> Vec<Point3<f64>> {
    let mesh = &sample.mesh;
    let lm: Vec<Point3<f64>> = sample.landmarks.iter().map(|&v| mesh.vertex(v)).collect();
    let near: Vec<usize> = (0..mesh.vertex_count())
        .filter(|&v| !sample.landmarks.contains(&v))
        .filter(|&v| lm.iter().any(|p| (mesh.vertex(v) - p).norm() <= opts.alignment_radius))
        .collect();
    let mut out = mean_landmarks.to_vec();
    if opts.alignment_points > 0 && !near.is_empty() {
        let stride = near.len().div_ceil(opts.alignment_points);
        out.extend(near.iter().step_by(stride).map(|&v| to_mean.apply(&mesh.vertex(v))));
    }
    out
}
