//! Landmark prediction on an unannotated scan.

mod bp;
mod kmeans;

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Point3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bp::{brute_force_map, max_product, BpOptions, BpOutcome, PairwiseMrf};
pub use kmeans::{kmeans2, TwoMeans};

use crate::descriptor::{canonical_form_sampled, finger_print, CanonicalForm, FingerPrint, MdsOptions};
use crate::error::{Error, Result};
use crate::mesh::{detect_umbilics, fast_marching_bounded, principal_curvatures, TriangleMesh, UmbilicParams};
use crate::model::{
    classify_vertex, TrainedModel, LANDMARK_COUNT, LEFT_SUBALARE, NOSE_TIP, RIGHT_SUBALARE, SUBNASAL,
};
use crate::transform::{umeyama, Similarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictOptions {
    pub umbilic: UmbilicParams,
    /// Geodesic radius of the nose refinement neighbourhood (mm).
    pub r_search: f64,
    /// Geodesic radius searched for subalare candidates around the subnasal point (mm).
    pub r_subalare: f64,
    /// Euclidean candidate radius around each aligned template landmark (mm).
    pub restrict_radius: f64,
    pub expand_factor: f64,
    pub max_expansions: usize,
    pub max_candidates: usize,
    pub bp: BpOptions,
    pub mds: MdsOptions,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            umbilic: UmbilicParams::default(),
            r_search: 40.0,
            r_subalare: 30.0,
            restrict_radius: 20.0,
            expand_factor: 1.5,
            max_expansions: 3,
            max_candidates: 300,
            bp: BpOptions::default(),
            mds: MdsOptions::default(),
        }
    }
}

/// Finger print, PCA projection and ellipsoid labels of one vertex.
#[derive(Debug, Clone)]
pub struct Fppca {
    pub print: FingerPrint,
    pub projection: DVector<f64>,
    pub labels: Vec<usize>,
}

pub fn fppca(mesh: &TriangleMesh, vertex: usize, model: &TrainedModel) -> Result<Fppca> {
    let print = finger_print(mesh, vertex, &model.radii)?;
    let projection = model.project(&print)?;
    let labels = classify_vertex(&projection, model);
    Ok(Fppca {
        print,
        projection,
        labels,
    })
}

/// Lazily filled per-vertex [`Fppca`] results shared by the pipeline stages.
pub struct FppcaCache<'a> {
    mesh: &'a TriangleMesh,
    model: &'a TrainedModel,
    slots: Vec<OnceLock<Fppca>>,
}

impl<'a> FppcaCache<'a> {
    pub fn new(mesh: &'a TriangleMesh, model: &'a TrainedModel) -> Self {
        Self {
            mesh,
            model,
            slots: (0..mesh.vertex_count()).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn get(&self, v: usize) -> Result<&Fppca> {
        let slot = self.slots.get(v).ok_or(Error::OutOfRange {
            index: v,
            len: self.slots.len(),
        })?;
        if let Some(f) = slot.get() {
            return Ok(f);
        }
        let f = fppca(self.mesh, v, self.model)?;
        Ok(slot.get_or_init(|| f))
    }

    /// Computes all of `vertices` in parallel.
    pub fn fill(&self, vertices: &[usize]) -> Result<()> {
        vertices.par_iter().try_for_each(|&v| self.get(v).map(|_| ()))
    }

    fn medoid_distance(&self, v: usize, label: usize) -> Result<f64> {
        Ok((&self.get(v)?.projection - &self.model.region(label).medoid).norm())
    }

    fn membership(&self, v: usize, label: usize) -> Result<f64> {
        Ok(self.model.region(label).ellipsoid.membership(&self.get(v)?.projection))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoseSearch {
    /// Umbilic seeding the search.
    pub seed: usize,
    /// True when no umbilic fell inside the nose-tip ellipsoid.
    pub seed_fallback: bool,
    pub tip: usize,
    pub subnasal: usize,
    /// Subalare pair, labels not yet resolved.
    pub ambiguous: [usize; 2],
}

fn argmin_by_medoid(cache: &FppcaCache, vertices: &[usize], label: usize) -> Result<Option<usize>> {
    let mut best: Option<(f64, usize)> = None;
    for &v in vertices {
        let d = cache.medoid_distance(v, label)?;
        if best.is_none_or(|(bd, bv)| d < bd || (d == bd && v < bv)) {
            best = Some((d, v));
        }
    }
    Ok(best.map(|(_, v)| v))
}

/// Vertex closest to the label's ellipsoid in its own metric; used when none lies inside.
fn argmin_by_membership(cache: &FppcaCache, vertices: &[usize], label: usize) -> Result<Option<usize>> {
    let mut best: Option<(f64, usize)> = None;
    for &v in vertices {
        let d = cache.membership(v, label)?;
        if best.is_none_or(|(bd, bv)| d < bd || (d == bd && v < bv)) {
            best = Some((d, v));
        }
    }
    Ok(best.map(|(_, v)| v))
}

fn geodesic_ball(mesh: &TriangleMesh, center: usize, r: f64) -> Result<Vec<usize>> {
    let f = fast_marching_bounded(mesh, center, r)?;
    let mut ball: Vec<usize> = f.within(r).collect();
    ball.sort_unstable();
    Ok(ball)
}

/// Locates the nose tip, subnasal point and the unlabelled subalare pair.
pub fn nose_search(
    mesh: &TriangleMesh,
    cache: &FppcaCache,
    umbilics: &[usize],
    opts: &PredictOptions,
) -> Result<NoseSearch> {
    if umbilics.is_empty() {
        return Err(Error::InvalidArgument("no umbilic vertices to seed the nose search".into()));
    }
    cache.fill(umbilics)?;
    let classified: Vec<usize> = umbilics
        .iter()
        .copied()
        .filter(|&v| cache.get(v).map(|f| f.labels.contains(&NOSE_TIP)).unwrap_or(false))
        .collect();
    let seed_fallback = classified.is_empty();
    if seed_fallback {
        log::warn!("no umbilic classified as nose tip; using all umbilics");
    }
    let seed = if seed_fallback {
        argmin_by_membership(cache, umbilics, NOSE_TIP)?
    } else {
        argmin_by_medoid(cache, &classified, NOSE_TIP)?
    }
    .unwrap();

    let ball = geodesic_ball(mesh, seed, opts.r_search)?;
    cache.fill(&ball)?;
    let with = |label: usize, set: &[usize]| -> Vec<usize> {
        set.iter()
            .copied()
            .filter(|&v| cache.get(v).map(|f| f.labels.contains(&label)).unwrap_or(false))
            .collect()
    };
    let tips = with(NOSE_TIP, &ball);
    let tip = argmin_by_medoid(cache, &tips, NOSE_TIP)?.unwrap_or(seed);
    let mut subs = with(SUBNASAL, &ball);
    subs.retain(|&v| v != tip);
    if subs.is_empty() {
        log::warn!("no vertex near the nose classified as subnasal; using the closest descriptor");
        let rest: Vec<usize> = ball.iter().copied().filter(|&v| v != tip).collect();
        subs = argmin_by_membership(cache, &rest, SUBNASAL)?.into_iter().collect();
    }
    let subnasal = argmin_by_medoid(cache, &subs, SUBNASAL)?
        .ok_or_else(|| Error::Degenerate("nose neighbourhood has a single vertex".into()))?;

    let mut radius = opts.r_subalare;
    let mut alae = Vec::new();
    for attempt in 0..2 {
        let ball = geodesic_ball(mesh, subnasal, radius)?;
        cache.fill(&ball)?;
        alae = ball
            .iter()
            .copied()
            .filter(|&v| v != tip && v != subnasal)
            .filter(|&v| {
                cache
                    .get(v)
                    .map(|f| f.labels.contains(&RIGHT_SUBALARE) || f.labels.contains(&LEFT_SUBALARE))
                    .unwrap_or(false)
            })
            .collect();
        if alae.len() >= 2 || attempt == 1 {
            break;
        }
        radius *= 1.5;
    }
    if alae.len() < 2 {
        return Err(Error::Degenerate(format!(
            "found {} subalare candidates within {radius} mm of the subnasal point",
            alae.len()
        )));
    }
    let pts: Vec<Point3<f64>> = alae.iter().map(|&v| mesh.vertex(v)).collect();
    let km = kmeans2(&pts)?;
    let mut pair = [0usize; 2];
    for (c, slot) in pair.iter_mut().enumerate() {
        let members = km.members(c);
        let best = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                (pts[a] - km.centroids[c])
                    .norm()
                    .total_cmp(&(pts[b] - km.centroids[c]).norm())
                    .then(alae[a].cmp(&alae[b]))
            })
            .ok_or_else(|| Error::Degenerate("empty subalare cluster".into()))?;
        *slot = alae[best];
    }
    Ok(NoseSearch {
        seed,
        seed_fallback,
        tip,
        subnasal,
        ambiguous: pair,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Template frame to scan frame.
    pub transform: Similarity,
    /// Labels assigned to the two ambiguous nose points, in input order.
    pub subalare_labels: [usize; 2],
    /// Sum of template-to-nearest-vertex distances for the unflipped and flipped labelling.
    pub d_f: [f64; 2],
    pub flipped: bool,
    /// Aligned template landmarks, indexed by label - 1.
    pub initial: Vec<Point3<f64>>,
}

fn check_spread(points: &[Point3<f64>]) -> Result<()> {
    let c = points.iter().map(|p| p.coords).sum::<nalgebra::Vector3<f64>>() / points.len() as f64;
    let mut cov = nalgebra::Matrix3::zeros();
    for p in points {
        let d = p.coords - c;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] < 1e-6 * ev[0] {
        return Err(Error::Degenerate("nose points are nearly collinear".into()));
    }
    Ok(())
}

fn nearest_vertex_sum(mesh: &TriangleMesh, pts: &[Point3<f64>]) -> f64 {
    pts.par_iter()
        .map(|p| {
            mesh.vertices()
                .iter()
                .map(|v| (v - p).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum()
}

/// Similarity alignment of the template to the four nose points, choosing the subalare
/// labelling whose aligned template lies closer to the scan.
///
/// `nose` holds the nose tip, the subnasal point and the two unlabelled subalare points.
pub fn align_template(nose: [Point3<f64>; 4], model: &TrainedModel, mesh: &TriangleMesh) -> Result<Alignment> {
    check_spread(&nose)?;
    let t = &model.template_positions;
    let lm = |label: usize| t.landmarks[label - 1];
    let configs = [[RIGHT_SUBALARE, LEFT_SUBALARE], [LEFT_SUBALARE, RIGHT_SUBALARE]];
    let mut fits = Vec::with_capacity(2);
    for labels in configs {
        let src = [lm(NOSE_TIP), lm(SUBNASAL), lm(labels[0]), lm(labels[1])];
        let tr = umeyama(&src, &nose, true, false)?;
        let moved: Vec<Point3<f64>> = t.alignment.iter().map(|p| tr.apply(p)).collect();
        fits.push((tr, nearest_vertex_sum(mesh, &moved)));
    }
    let flipped = fits[1].1 < fits[0].1;
    let k = usize::from(flipped);
    let transform = fits[k].0;
    Ok(Alignment {
        transform,
        subalare_labels: configs[k],
        d_f: [fits[0].1, fits[1].1],
        flipped,
        initial: t.landmarks.iter().map(|p| transform.apply(p)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Umbilic,
    GeodesicRefinement,
    RegionRestricted,
}

/// Candidate vertices per landmark (index label - 1), each list ascending by vertex id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub vertices: Vec<Vec<usize>>,
    /// Radius finally used for each landmark (mm).
    pub radii: Vec<f64>,
    pub provenance: Provenance,
}

/// Vertices within `radius` of each initial position, widening the radius by
/// `expand_factor` (up to `max_expansions` times) until non-empty, and keeping at most
/// `max_candidates` nearest ones. Subalare lists are made disjoint by giving shared vertices
/// to the closer initial position.
pub fn restrict_regions(
    initial: &[Point3<f64>],
    mesh: &TriangleMesh,
    radius: f64,
    opts: &PredictOptions,
) -> Result<CandidateSet> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("restriction radius must be positive".into()));
    }
    let mut vertices = Vec::with_capacity(initial.len());
    let mut radii = Vec::with_capacity(initial.len());
    for (k, p) in initial.iter().enumerate() {
        let dist: Vec<f64> = mesh.vertices().iter().map(|v| (v - p).norm()).collect();
        let mut r = radius;
        let mut found: Vec<usize> = Vec::new();
        for attempt in 0..=opts.max_expansions {
            found = (0..dist.len()).filter(|&v| dist[v] <= r).collect();
            if !found.is_empty() || attempt == opts.max_expansions {
                break;
            }
            r *= opts.expand_factor;
        }
        if found.is_empty() {
            return Err(Error::Degenerate(format!(
                "no vertex within {r} mm of the initial position of landmark {}",
                k + 1
            )));
        }
        if found.len() > opts.max_candidates {
            found.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
            found.truncate(opts.max_candidates);
            found.sort_unstable();
        }
        vertices.push(found);
        radii.push(r);
    }
    if initial.len() == LANDMARK_COUNT {
        let (a, b) = (RIGHT_SUBALARE - 1, LEFT_SUBALARE - 1);
        let (pa, pb) = (initial[a], initial[b]);
        let shared: Vec<usize> = vertices[a].iter().copied().filter(|v| vertices[b].contains(v)).collect();
        for v in shared {
            let q = mesh.vertex(v);
            let to_a = (q - pa).norm() <= (q - pb).norm();
            let (drop, keep) = if to_a { (b, a) } else { (a, b) };
            if vertices[drop].len() > 1 {
                vertices[drop].retain(|&x| x != v);
            } else if vertices[keep].len() > 1 {
                vertices[keep].retain(|&x| x != v);
            }
        }
    }
    Ok(CandidateSet {
        vertices,
        radii,
        provenance: Provenance::RegionRestricted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedLandmark {
    pub vertex: usize,
    pub position: [f64; 3],
    pub belief: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub umbilic_count: usize,
    pub nose: Option<NoseSearch>,
    pub flipped: bool,
    pub d_f: [f64; 2],
    pub alignment_scale: f64,
    pub candidate_counts: Vec<usize>,
    pub bp_iterations: usize,
    pub bp_converged: bool,
    pub mds_stress: f64,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPrediction {
    /// Keyed by landmark label.
    pub landmarks: BTreeMap<usize, PredictedLandmark>,
    pub diagnostics: Diagnostics,
}

impl LandmarkPrediction {
    /// Predicted vertex ids indexed by label - 1.
    pub fn vertices(&self) -> Vec<usize> {
        (1..=LANDMARK_COUNT).map(|l| self.landmarks[&l].vertex).collect()
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        (1..=LANDMARK_COUNT)
            .map(|l| Point3::from(self.landmarks[&l].position))
            .collect()
    }
}

/// Builds the landmark network over the candidates and runs max-product BP. Canonical
/// displacements are mapped into the template frame with the inverse of `frame`
/// (template to scan) before the edge potentials are evaluated.
pub fn loopy_bp(
    model: &TrainedModel,
    candidates: &CandidateSet,
    cache: &FppcaCache,
    canonical: &CanonicalForm,
    frame: &Similarity,
    opts: &BpOptions,
) -> Result<(Vec<usize>, Vec<f64>, BpOutcome)> {
    if candidates.vertices.len() != LANDMARK_COUNT || candidates.vertices.iter().any(|c| c.is_empty()) {
        return Err(Error::InvalidArgument("every landmark needs at least one candidate".into()));
    }
    let all: Vec<usize> = candidates.vertices.iter().flatten().copied().collect();
    cache.fill(&all)?;
    let inverse = frame.inverse();
    let mut unary = Vec::with_capacity(LANDMARK_COUNT);
    let mut coords = Vec::with_capacity(LANDMARK_COUNT);
    for (k, list) in candidates.vertices.iter().enumerate() {
        let density = model.node_potentials[k].gaussian.log_density()?;
        let u = list
            .iter()
            .map(|&v| Ok(density.eval(&cache.get(v)?.print.distortions)))
            .collect::<Result<Vec<f64>>>()?;
        unary.push(u);
        let c = list
            .par_iter()
            .map(|&v| canonical.embed_vertex(v))
            .collect::<Result<Vec<_>>>()?;
        coords.push(c);
    }
    let mut edges = Vec::with_capacity(model.edge_potentials.len());
    for e in &model.edge_potentials {
        let density = e.gaussian.log_density()?;
        let (ca, cb) = (&coords[e.a - 1], &coords[e.b - 1]);
        let table = DMatrix::from_fn(ca.len(), cb.len(), |i, j| {
            let d = inverse.apply_vector(&(cb[j] - ca[i]));
            density.eval(d.as_slice())
        });
        edges.push((e.a - 1, e.b - 1, table));
    }
    let mrf = PairwiseMrf { unary, edges };
    let out = max_product(&mrf, opts)?;
    let vertices: Vec<usize> = out
        .assignment
        .iter()
        .enumerate()
        .map(|(k, &s)| candidates.vertices[k][s])
        .collect();
    let beliefs = out
        .assignment
        .iter()
        .enumerate()
        .map(|(k, &s)| out.beliefs[k][s])
        .collect();
    Ok((vertices, beliefs, out))
}

/// Full pipeline: umbilics, nose search, template alignment, candidate restriction,
/// canonical form and belief propagation.
pub fn predict_landmarks(mesh: &TriangleMesh, model: &TrainedModel, opts: &PredictOptions) -> Result<LandmarkPrediction> {
    model.validate()?;
    let mut diag = Diagnostics::default();
    let mut clock = Instant::now();
    let mut lap = |diag: &mut Diagnostics, name: &str| {
        diag.timings.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let curv = principal_curvatures(mesh);
    let umbilics = detect_umbilics(mesh, &curv, &opts.umbilic);
    diag.umbilic_count = umbilics.len();
    lap(&mut diag, "umbilics");

    let cache = FppcaCache::new(mesh, model);
    let nose = nose_search(mesh, &cache, &umbilics, opts).map_err(Error::stage("nose_search"))?;
    lap(&mut diag, "nose_search");

    let pts = [
        mesh.vertex(nose.tip),
        mesh.vertex(nose.subnasal),
        mesh.vertex(nose.ambiguous[0]),
        mesh.vertex(nose.ambiguous[1]),
    ];
    let alignment = align_template(pts, model, mesh).map_err(Error::stage("align_template"))?;
    diag.nose = Some(nose);
    diag.flipped = alignment.flipped;
    diag.d_f = alignment.d_f;
    diag.alignment_scale = alignment.transform.scale;
    lap(&mut diag, "align_template");

    let candidates = restrict_regions(&alignment.initial, mesh, opts.restrict_radius, opts)
        .map_err(Error::stage("restrict_regions"))?;
    diag.candidate_counts = candidates.vertices.iter().map(|c| c.len()).collect();
    lap(&mut diag, "restrict_regions");

    let canonical = canonical_form_sampled(mesh, &opts.mds).map_err(Error::stage("canonical_form"))?;
    diag.mds_stress = canonical.stress;
    lap(&mut diag, "canonical_form");

    let (vertices, beliefs, out) = loopy_bp(model, &candidates, &cache, &canonical, &alignment.transform, &opts.bp)
        .map_err(Error::stage("loopy_bp"))?;
    diag.bp_iterations = out.iterations;
    diag.bp_converged = out.converged;
    lap(&mut diag, "loopy_bp");

    let landmarks = vertices
        .iter()
        .zip(&beliefs)
        .enumerate()
        .map(|(k, (&v, &b))| {
            let p = mesh.vertex(v);
            (
                k + 1,
                PredictedLandmark {
                    vertex: v,
                    position: [p.x, p.y, p.z],
                    belief: b,
                },
            )
        })
        .collect();
    Ok(LandmarkPrediction {
        landmarks,
        diagnostics: diag,
    })
}
