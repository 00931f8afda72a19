//! Expression (blend weight) fitting and per-vertex shape fitting.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::energy::{energy_expr, energy_shape, ShapeWeights, VertexTransforms};
use super::{correspondences, BlendshapeRig, CorrespondenceSet, Region};
use crate::error::{Error, Result};
use crate::mesh::{TriangleIndex, TriangleMesh};
use crate::optim::{minimize, Bounds, MinimizeOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpressionOptions {
    /// Normal-angle limit of the upper face (degrees); chin and mouth use half of it.
    pub phi_deg: f64,
    /// Valid-match fraction of the chin region that starts the second stage.
    pub chin_threshold: f64,
    /// Valid-match fraction of the mouth region that ends the fit.
    pub mouth_threshold: f64,
    /// Correspondence refreshes per stage.
    pub max_refresh: usize,
    /// The second stage also waits until no blend weight moves by more than this.
    pub alpha_tol: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ExpressionOptions {
    fn default() -> Self {
        Self {
            phi_deg: 80.0,
            chin_threshold: 0.8,
            mouth_threshold: 0.6,
            max_refresh: 30,
            alpha_tol: 1e-4,
            max_iter: 1000,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpressionFit {
    pub alpha: Vec<f64>,
    /// `P(alpha)` of the supplied (aligned) rig.
    pub mesh: TriangleMesh,
    /// Last stage entered (1 or 2).
    pub stage: u8,
    pub refreshes: usize,
    pub chin_valid: f64,
    pub mouth_valid: f64,
    /// Final objective value of every inner solve.
    pub energy_trace: Vec<f64>,
    /// Set when a valid-fraction threshold was not reached within the refresh cap.
    pub warning: Option<String>,
}

fn region_fraction(corr: &CorrespondenceSet, regions: &[Region], r: Region) -> f64 {
    let (mut total, mut valid) = (0usize, 0usize);
    for (i, &ri) in regions.iter().enumerate() {
        if ri == r {
            total += 1;
            if corr.valid[i] {
                valid += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        valid as f64 / total as f64
    }
}

/// Fits the blend weights of an affinely aligned rig to the indexed scan in two stages:
/// first without the mouth, then with it. Chin and mouth weights are one minus the valid
/// fraction of their region; correspondences are refreshed between inner solves.
pub fn fit_expression(rig: &BlendshapeRig, scan: &TriangleIndex, opts: &ExpressionOptions) -> Result<ExpressionFit> {
    let j = rig.blendshape_count();
    let regions = rig.regions();
    let bounds = Bounds::uniform(j, 0.0, 1.0);
    let inner = MinimizeOptions {
        max_iter: opts.max_iter,
        tol: opts.tol,
        ..Default::default()
    };
    let mut alpha = DVector::zeros(j);
    let mut stage = 1u8;
    let mut stage_solves = 0usize;
    let mut last_step = f64::INFINITY;
    let mut refreshes = 0;
    let mut trace = Vec::new();
    let mut warning = None;
    let (mut chin, mut mouth);
    let mut mesh;
    loop {
        mesh = rig.blend(alpha.as_slice())?;
        let half = opts.phi_deg / 2.0;
        let corr = correspondences(&mesh, scan, |i| match regions[i] {
            Region::Upper => (opts.phi_deg, 1.0),
            _ => (half, 1.0),
        });
        refreshes += 1;
        chin = region_fraction(&corr, regions, Region::Chin);
        mouth = region_fraction(&corr, regions, Region::Mouth);
        if stage == 1 && stage_solves > 0 && chin >= opts.chin_threshold {
            stage = 2;
            stage_solves = 0;
            last_step = f64::INFINITY;
        }
        if stage == 2 && stage_solves > 0 && mouth >= opts.mouth_threshold && last_step < opts.alpha_tol {
            break;
        }
        if stage_solves >= opts.max_refresh {
            let msg = if stage == 1 {
                format!("chin region reached only {:.0}% valid matches; the scan may be occluded", chin * 100.0)
            } else if mouth < opts.mouth_threshold {
                format!("mouth region reached only {:.0}% valid matches; the scan may be occluded", mouth * 100.0)
            } else {
                "blend weights did not settle within the refresh cap".to_string()
            };
            log::warn!("{msg}");
            warning = Some(msg);
            break;
        }
        let w_chin = 1.0 - chin;
        let w_mouth = if stage == 1 { 0.0 } else { 1.0 - mouth };
        let corr = corr.reweighted(|i| match regions[i] {
            Region::Upper => 1.0,
            Region::Chin => w_chin,
            Region::Mouth => w_mouth,
        });
        let m = minimize(|a| energy_expr(rig, a, &corr), alpha.clone(), Some(&bounds), &inner)?;
        last_step = (&m.x - &alpha).amax();
        alpha = m.x;
        trace.push(m.value);
        stage_solves += 1;
    }
    Ok(ExpressionFit {
        alpha: alpha.iter().copied().collect(),
        mesh,
        stage,
        refreshes,
        chin_valid: chin,
        mouth_valid: mouth,
        energy_trace: trace,
        warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeOptions {
    pub weights: ShapeWeights,
    /// Factor applied to the smoothness and rigidity weights on each relaxation.
    pub relax: f64,
    /// Relative energy change between weight levels that ends the fit.
    pub stop_tol: f64,
    /// Relative improvement of one refresh-and-solve round below which a weight level
    /// counts as converged.
    pub negligible: f64,
    /// Normal-angle limit (degrees).
    pub angle_deg: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub max_refresh_per_level: usize,
    pub max_levels: usize,
    /// Abort when more than this fraction of matches is invalid.
    pub max_invalid: f64,
}

impl Default for ShapeOptions {
    fn default() -> Self {
        Self {
            weights: ShapeWeights::default(),
            relax: 0.5,
            stop_tol: 1e-4,
            negligible: 1e-6,
            angle_deg: 80.0,
            max_iter: 1000,
            tol: 1e-9,
            max_refresh_per_level: 10,
            max_levels: 40,
            max_invalid: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShapeFit {
    pub transforms: VertexTransforms,
    pub mesh: TriangleMesh,
    pub levels: usize,
    pub refreshes: usize,
    /// Converged energy of each weight level.
    pub energy_trace: Vec<f64>,
    /// Accepted objective values of every inner solve.
    pub inner_traces: Vec<Vec<f64>>,
    pub final_weights: ShapeWeights,
}

/// Deforms `template` towards the indexed scan with one affine transform per vertex.
/// Each weight level alternates correspondence refreshes and quasi-Newton solves until an
/// extra round gains less than `negligible`; the smoothness and rigidity weights are then
/// relaxed. The fit ends when successive levels differ by less than `stop_tol`.
pub fn fit_shape(template: &TriangleMesh, scan: &TriangleIndex, opts: &ShapeOptions) -> Result<ShapeFit> {
    let n = template.vertex_count();
    let points = template.vertices();
    let edges = template.edges();
    let inner = MinimizeOptions {
        max_iter: opts.max_iter,
        tol: opts.tol,
        ..Default::default()
    };
    let mut x = VertexTransforms::identity(n).params().clone();
    let mut w = opts.weights;
    let mut mesh = template.clone();
    let mut energy_trace = Vec::new();
    let mut inner_traces = Vec::new();
    let mut refreshes = 0;
    let mut levels = 0;
    let floor = 1e-12 * n as f64;
    'levels: while levels < opts.max_levels {
        levels += 1;
        let mut level_energy = f64::INFINITY;
        for _ in 0..opts.max_refresh_per_level {
            let corr = correspondences(&mesh, scan, |_| (opts.angle_deg, 1.0));
            refreshes += 1;
            let invalid = n - corr.valid_count();
            if invalid as f64 > opts.max_invalid * n as f64 {
                return Err(Error::Starvation { invalid, total: n });
            }
            let before = energy_shape(points, &x, &corr, edges, &w).value;
            let m = minimize(|x| energy_shape(points, x, &corr, edges, &w), x.clone(), None, &inner)?;
            let gain = (before - m.value) / before.max(f64::MIN_POSITIVE);
            x = m.x;
            level_energy = m.value;
            inner_traces.push(m.trace);
            mesh = deform(template, &x)?;
            if gain < opts.negligible || level_energy <= floor {
                break;
            }
        }
        if let Some(&prev) = energy_trace.last() {
            let change = (prev - level_energy) / f64::max(prev, f64::MIN_POSITIVE);
            energy_trace.push(level_energy);
            if change < opts.stop_tol {
                break 'levels;
            }
        } else {
            energy_trace.push(level_energy);
        }
        if level_energy <= floor {
            break;
        }
        w.smooth *= opts.relax;
        w.rigid *= opts.relax;
    }
    Ok(ShapeFit {
        transforms: VertexTransforms::from_params(x)?,
        mesh,
        levels,
        refreshes,
        energy_trace,
        inner_traces,
        final_weights: w,
    })
}

fn deform(template: &TriangleMesh, x: &DVector<f64>) -> Result<TriangleMesh> {
    let t = VertexTransforms::from_params(x.clone())?;
    template.with_positions((0..template.vertex_count()).map(|i| t.apply(i, &template.vertex(i))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::point_to_plane;
    use crate::synth::{build_rig, generate_face, FaceSpec, Warp};

    #[test]
    fn rest_pose_scan_gives_zero_weights() {
        let rig = build_rig(5.0).unwrap();
        let index = TriangleIndex::new(rig.neutral());
        let fit = fit_expression(&rig, &index, &ExpressionOptions::default()).unwrap();
        assert!(fit.alpha.iter().all(|a| a.abs() < 0.05), "{:?}", fit.alpha);
    }

    #[test]
    fn blended_scan_is_recovered() {
        let rig = build_rig(5.0).unwrap();
        let truth = [0.6, 0.2, 0.0, 0.4, 0.3, 0.1];
        let scan = rig.blend(&truth).unwrap();
        let index = TriangleIndex::new(&scan);
        let fit = fit_expression(&rig, &index, &ExpressionOptions::default()).unwrap();
        for (a, t) in fit.alpha.iter().zip(truth) {
            assert!((a - t).abs() < 0.05, "{:?}", fit.alpha);
        }
        let res = point_to_plane(&fit.mesh, &index);
        let mean = res.iter().map(|r| r.0.abs()).sum::<f64>() / res.len() as f64;
        assert!(mean < 0.5);
    }

    #[test]
    fn identical_scan_keeps_identity_transforms() {
        let face = generate_face(&FaceSpec::neutral(8.0)).unwrap();
        let index = TriangleIndex::new(&face.mesh);
        let fit = fit_shape(&face.mesh, &index, &ShapeOptions::default()).unwrap();
        let id = VertexTransforms::identity(face.mesh.vertex_count());
        assert!((fit.transforms.params() - id.params()).amax() < 1e-4);
    }

    #[test]
    fn smooth_bump_is_absorbed() {
        let face = generate_face(&FaceSpec::neutral(6.0)).unwrap();
        let warp = Warp {
            center: [10.0, -20.0],
            sigma: 20.0,
            amplitude: 3.0,
        };
        let scan = warp.apply(&face.mesh).unwrap();
        let index = TriangleIndex::new(&scan);
        let fit = fit_shape(&face.mesh, &index, &ShapeOptions::default()).unwrap();
        let res = point_to_plane(&fit.mesh, &index);
        let inner: Vec<f64> = res.iter().filter(|r| !r.1).map(|r| r.0.abs()).collect();
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!(mean < 0.5, "mean residual {mean}, levels {}", fit.levels);
        for t in &fit.inner_traces {
            assert!(t.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn disjoint_scan_starves() {
        let face = generate_face(&FaceSpec::neutral(8.0)).unwrap();
        let far = face.mesh.map_positions(|p| p + nalgebra::Vector3::new(0.0, 0.0, -500.0)).unwrap();
        let flipped = TriangleMesh::with_normals(
            far.vertices().to_vec(),
            far.faces().to_vec(),
            far.normals().iter().map(|n| -n).collect(),
        )
        .unwrap();
        let index = TriangleIndex::new(&flipped);
        assert!(matches!(
            fit_shape(&face.mesh, &index, &ShapeOptions::default()),
            Err(Error::Starvation { .. })
        ));
    }
}
