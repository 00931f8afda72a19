//! Landmark error statistics, modified Hausdorff distance and residual fields.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{TriangleIndex, TriangleMesh};
use crate::registration::point_to_plane;

/// Detection thresholds in mm.
pub const THRESHOLDS: [f64; 3] = [10.0, 20.0, 30.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkStats {
    pub label: usize,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
    /// Percent of cases with error strictly below 10, 20 and 30 mm.
    pub rates: [f64; 3],
}

impl LandmarkStats {
    pub fn from_errors(label: usize, errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::InvalidArgument(format!("no errors for label {label}")));
        }
        if let Some(e) = errors.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid error value {e} for label {label}")));
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        let max = errors.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            label,
            count: errors.len(),
            mean,
            std,
            max,
            rates: detection_rates(errors),
        })
    }
}

/// Percent of values strictly below each of [`THRESHOLDS`].
pub fn detection_rates(errors: &[f64]) -> [f64; 3] {
    let n = errors.len().max(1) as f64;
    THRESHOLDS.map(|t| 100.0 * errors.iter().filter(|&&e| e < t).count() as f64 / n)
}

/// Percent of cases whose every point lies below each threshold. Each entry of `groups`
/// holds the errors of one case (for example all points of a facial region on one model).
pub fn group_detection_rates(groups: &[Vec<f64>]) -> [f64; 3] {
    let worst: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().copied().fold(0.0, f64::max))
        .collect();
    detection_rates(&worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Number of cases.
    pub count: usize,
    pub landmarks: Vec<LandmarkStats>,
}

/// Euclidean landmark errors over a collection of cases. Every case must carry the same
/// label set in both inputs.
pub fn landmark_errors(
    predictions: &[BTreeMap<usize, Point3<f64>>],
    ground_truth: &[BTreeMap<usize, Point3<f64>>],
) -> Result<ErrorReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth cases",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let first = predictions
        .first()
        .ok_or_else(|| Error::InvalidArgument("no cases to evaluate".into()))?;
    let labels: Vec<usize> = first.keys().copied().collect();
    let mut errors: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, (p, g)) in predictions.iter().zip(ground_truth).enumerate() {
        if !p.keys().eq(labels.iter()) || !g.keys().eq(labels.iter()) {
            return Err(Error::InvalidArgument(format!("case {i}: label sets do not match")));
        }
        for (&label, pp) in p {
            errors.entry(label).or_default().push((pp - g[&label]).norm());
        }
    }
    let landmarks = errors
        .iter()
        .map(|(&label, e)| LandmarkStats::from_errors(label, e))
        .collect::<Result<_>>()?;
    Ok(ErrorReport {
        count: predictions.len(),
        landmarks,
    })
}

/// Rows of `label,mean,std,max,T10,T20,T30`.
pub fn write_error_csv<W: Write>(report: &ErrorReport, mut w: W) -> Result<()> {
    writeln!(w, "label,mean,std,max,T10,T20,T30")?;
    for s in &report.landmarks {
        writeln!(
            w,
            "{},{:.4},{:.4},{:.4},{:.2},{:.2},{:.2}",
            s.label, s.mean, s.std, s.max, s.rates[0], s.rates[1], s.rates[2]
        )?;
    }
    Ok(())
}

/// Directed modified Hausdorff distance: mean over `p` of the distance to the closest
/// point of `f`.
pub fn mhd(p: &[Point3<f64>], f: &[Point3<f64>]) -> Result<f64> {
    if p.is_empty() || f.is_empty() {
        return Err(Error::InvalidArgument("modified Hausdorff distance of an empty set".into()));
    }
    let sum: f64 = p
        .par_iter()
        .map(|a| f.iter().map(|b| (a - b).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(sum / p.len() as f64)
}

/// `max(mhd(p, f), mhd(f, p))`.
pub fn mhd_symmetric(p: &[Point3<f64>], f: &[Point3<f64>]) -> Result<f64> {
    Ok(mhd(p, f)?.max(mhd(f, p)?))
}

/// Maps residuals to colors from blue (low) to red (high), clamping outside the range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorRamp {
    pub min: f64,
    pub max: f64,
    /// Color the absolute value instead of the signed value.
    pub magnitude: bool,
}

impl Default for ColorRamp {
    fn default() -> Self {
        Self::magnitude(1.0)
    }
}

impl ColorRamp {
    /// `|r|` over `[0, max]`.
    pub fn magnitude(max: f64) -> Self {
        Self {
            min: 0.0,
            max,
            magnitude: true,
        }
    }

    /// `r` over `[-limit, limit]`.
    pub fn signed(limit: f64) -> Self {
        Self {
            min: -limit,
            max: limit,
            magnitude: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.max > self.min) {
            return Err(Error::InvalidArgument(format!(
                "color range [{}, {}] is empty",
                self.min, self.max
            )));
        }
        Ok(())
    }

    /// Position of `r` in the range, clamped to `[0, 1]`.
    pub fn position(&self, r: f64) -> f64 {
        let v = if self.magnitude { r.abs() } else { r };
        ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }

    /// Hue sweep from blue through cyan, green and yellow to red.
    pub fn color(&self, r: f64) -> [u8; 3] {
        let t = self.position(r);
        let hue = 240.0 * (1.0 - t);
        let x = 1.0 - ((hue / 60.0) % 2.0 - 1.0).abs();
        let (r, g, b) = match (hue / 60.0) as u32 {
            0 => (1.0, x, 0.0),
            1 => (x, 1.0, 0.0),
            2 => (0.0, 1.0, x),
            3 => (0.0, x, 1.0),
            _ => (0.0, 0.0, 1.0),
        };
        [r, g, b].map(|c: f64| (c * 255.0).round() as u8)
    }
}

/// Signed point-to-plane residual of every vertex of a registered mesh against a scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualField {
    /// `<p - NN(p), n(NN(p))>`, positive when the vertex lies outside the scan surface.
    pub values: Vec<f64>,
    /// The nearest scan point lies on the scan boundary.
    pub on_boundary: Vec<bool>,
}

impl ResidualField {
    pub fn colors(&self, ramp: &ColorRamp) -> Vec<[u8; 3]> {
        self.values.iter().map(|&r| ramp.color(r)).collect()
    }

    /// Values whose nearest scan point is off the boundary.
    pub fn interior_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.on_boundary)
            .filter(|(_, &b)| !b)
            .map(|(&v, _)| v)
            .collect()
    }

    /// Rows of `vertex,residual,on_boundary` with unclamped values.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "vertex,residual,on_boundary")?;
        for (i, (v, b)) in self.values.iter().zip(&self.on_boundary).enumerate() {
            writeln!(w, "{i},{v},{}", u8::from(*b))?;
        }
        Ok(())
    }
}

pub fn residual_field(p: &TriangleMesh, f: &TriangleMesh) -> ResidualField {
    let index = TriangleIndex::new(f);
    let (values, on_boundary) = point_to_plane(p, &index).into_iter().unzip();
    ResidualField { values, on_boundary }
}

/// Counts over equal-width bins; values outside the range are tallied separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

impl Histogram {
    pub fn uniform(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidArgument(format!(
                "histogram needs bins > 0 and lo < hi, got {bins} bins over [{lo}, {hi}]"
            )));
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut h = Self {
            edges,
            counts: vec![0; bins],
            below: 0,
            above: 0,
        };
        for &v in values {
            if v < lo {
                h.below += 1;
            } else if v > hi {
                h.above += 1;
            } else {
                let k = (((v - lo) / width) as usize).min(bins - 1);
                h.counts[k] += 1;
            }
        }
        Ok(h)
    }

    /// Rows of `lower,upper,count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "lower,upper,count")?;
        for (k, c) in self.counts.iter().enumerate() {
            writeln!(w, "{:.6},{:.6},{c}", self.edges[k], self.edges[k + 1])?;
        }
        Ok(())
    }
}
