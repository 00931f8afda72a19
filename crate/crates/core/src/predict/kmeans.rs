//! Two-cluster k-means with deterministic farthest-pair seeding.

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TwoMeans {
    /// Cluster (0 or 1) of each input point.
    pub assignment: Vec<usize>,
    pub centroids: [Point3<f64>; 2],
    pub iterations: usize,
}

impl TwoMeans {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }
}

/// Lloyd iterations from the two mutually farthest points (lowest index pair on ties).
pub fn kmeans2(points: &[Point3<f64>]) -> Result<TwoMeans> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "k-means with k = 2 needs at least 2 points, got {}",
            points.len()
        )));
    }
    let mut seed = (0, 1);
    let mut best = -1.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = (points[i] - points[j]).norm_squared();
            if d > best {
                best = d;
                seed = (i, j);
            }
        }
    }
    let mut centroids = [points[seed.0], points[seed.1]];
    let mut assignment = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let d0 = (p - centroids[0]).norm_squared();
            let d1 = (p - centroids[1]).norm_squared();
            let c = if d1 < d0 { 1 } else { 0 };
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        if !changed || iterations >= 100 {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let (sum, count) = points
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .fold((Vector3::zeros(), 0usize), |(s, n), (p, _)| (s + p.coords, n + 1));
            if count > 0 {
                *centroid = Point3::from(sum / count as f64);
            }
        }
    }
    Ok(TwoMeans {
        assignment,
        centroids,
        iterations,
    })
}
