//! Per-point curvature and gradient features, feature-point selection with a
//! random cap, and PCA whitening of the 4-D regression inputs.
//!
//! Curvature is the flatness ratio lambda_min / (sum lambda + eps) of the
//! local neighborhood covariance; gradient is the mean absolute elevation
//! difference to the k nearest neighbors. Points exceeding either threshold
//! are kept verbatim, the rest are voxel-downsampled, and the union is capped
//! to a maximum size by seeded uniform sampling.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::{self, CloudError, Point3, PointCloud, SpatialIndex};
use crate::linalg;
use crate::num::Real;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("neighborhood of size {need} requested but cloud has {have} points")]
    InsufficientPoints { have: usize, need: usize },
    #[error("operation requires a non-empty cloud")]
    EmptyCloud,
    #[error("PCA fit needs at least 2 distinct rows")]
    DegenerateData,
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A point annotated with its curvature and gradient features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePoint<S: Real = f64> {
    pub x: S,
    pub y: S,
    pub z: S,
    pub kappa: S,
    pub grad: S,
}

impl<S: Real> FeaturePoint<S> {
    pub fn position(&self) -> Point3<S> {
        Point3::new(self.x, self.y, self.z)
    }

    /// The SGP input row (x, y, kappa, grad).
    pub fn input_row(&self) -> [S; 4] {
        [self.x, self.y, self.kappa, self.grad]
    }
}

#[derive(Debug, Clone, Default)]
pub struct FeatureCloud<S: Real = f64> {
    pub points: Vec<FeaturePoint<S>>,
    pub source_timestamp: f64,
}

impl<S: Real> FeatureCloud<S> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct FeatureParams<S: Real = f64> {
    /// Neighborhood size for curvature/gradient, >= 3.
    pub k: usize,
    /// Denominator stabilizer.
    pub eps: S,
    /// Curvature threshold tau_kappa.
    pub tau_kappa: S,
    /// Gradient threshold tau_g, meters.
    pub tau_g: S,
    /// Voxel size for downsampling non-feature points, meters.
    pub voxel: S,
    /// Cap on the feature-cloud size.
    pub max_points: usize,
    pub rng_seed: u64,
}

impl<S: Real> Default for FeatureParams<S> {
    fn default() -> Self {
        Self {
            k: 10,
            eps: S::c(1e-8),
            tau_kappa: S::c(0.03),
            tau_g: S::c(0.05),
            voxel: S::c(0.2),
            max_points: 8000,
            rng_seed: 0,
        }
    }
}

/// Centroid and sample covariance (1/(k-1) normalization) of the k-nearest
/// neighborhood of point `i`, which includes the point itself. The covariance
/// is returned row-major 3x3.
pub fn neighborhood_stats<S: Real>(
    cloud: &PointCloud<S>,
    index: &SpatialIndex<S>,
    i: usize,
    k: usize,
) -> Result<(Point3<S>, [S; 9]), FeatureError> {
    if cloud.len() < k {
        return Err(FeatureError::InsufficientPoints {
            have: cloud.len(),
            need: k,
        });
    }
    let neighbors = index.knn(&cloud.points[i], k);
    let n = S::c(k as f64);
    let mut mu = [S::zero(); 3];
    for (j, _) in &neighbors {
        let p = cloud.points[*j];
        mu[0] = mu[0] + p.x;
        mu[1] = mu[1] + p.y;
        mu[2] = mu[2] + p.z;
    }
    for m in &mut mu {
        *m = *m / n;
    }
    let mut cov = [S::zero(); 9];
    for (j, _) in &neighbors {
        let p = cloud.points[*j];
        let d = [p.x - mu[0], p.y - mu[1], p.z - mu[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov[r * 3 + c] = cov[r * 3 + c] + d[r] * d[c];
            }
        }
    }
    let denom = S::c((k - 1) as f64);
    for c in &mut cov {
        *c = *c / denom;
    }
    Ok((Point3::new(mu[0], mu[1], mu[2]), cov))
}

/// Curvature kappa = lambda_min / (lambda1 + lambda2 + lambda3 + eps) of a
/// symmetric PSD 3x3 covariance. Always in [0, 1/3].
pub fn curvature<S: Real>(covariance: &[S; 9], eps: S) -> S {
    let (vals, _) = linalg::sym_eigen(3, covariance);
    let trace = vals[0] + vals[1] + vals[2];
    let floor = -S::c(1e-10) * (S::one() + trace.abs());
    let mut min = S::infinity();
    let mut sum = S::zero();
    for v in vals {
        debug_assert!(v >= floor, "covariance not PSD: eigenvalue {v}");
        let v = v.max(S::zero());
        min = min.min(v);
        sum = sum + v;
    }
    min / (sum + eps)
}

/// Mean absolute elevation difference between point `i` and its k-nearest
/// neighborhood (self included, contributing zero).
pub fn gradient<S: Real>(
    cloud: &PointCloud<S>,
    index: &SpatialIndex<S>,
    i: usize,
    k: usize,
) -> Result<S, FeatureError> {
    if cloud.len() < k {
        return Err(FeatureError::InsufficientPoints {
            have: cloud.len(),
            need: k,
        });
    }
    let zi = cloud.points[i].z;
    let sum: S = index
        .knn(&cloud.points[i], k)
        .iter()
        .map(|(j, _)| (cloud.points[*j].z - zi).abs())
        .sum();
    Ok(sum / S::c(k as f64))
}

/// Curvature and gradient for every point, computed in parallel. Output
/// order matches the cloud; results are worker-count independent.
pub fn compute_point_features<S: Real>(
    cloud: &PointCloud<S>,
    index: &SpatialIndex<S>,
    k: usize,
    eps: S,
) -> Result<Vec<(S, S)>, FeatureError> {
    if cloud.len() < k {
        return Err(FeatureError::InsufficientPoints {
            have: cloud.len(),
            need: k,
        });
    }
    let zi: Vec<S> = cloud.points.iter().map(|p| p.z).collect();
    Ok((0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let neighbors = index.knn(&cloud.points[i], k);
            let n = S::c(k as f64);
            let mut mu = [S::zero(); 3];
            for (j, _) in &neighbors {
                let p = cloud.points[*j];
                mu[0] = mu[0] + p.x;
                mu[1] = mu[1] + p.y;
                mu[2] = mu[2] + p.z;
            }
            for m in &mut mu {
                *m = *m / n;
            }
            let mut cov = [S::zero(); 9];
            for (j, _) in &neighbors {
                let p = cloud.points[*j];
                let d = [p.x - mu[0], p.y - mu[1], p.z - mu[2]];
                for r in 0..3 {
                    for c in 0..3 {
                        cov[r * 3 + c] = cov[r * 3 + c] + d[r] * d[c];
                    }
                }
            }
            let denom = S::c((k - 1) as f64);
            for c in &mut cov {
                *c = *c / denom;
            }
            let kappa = curvature(&cov, eps);
            let g: S = neighbors
                .iter()
                .map(|(j, _)| (zi[*j] - zi[i]).abs())
                .sum::<S>()
                / n;
            (kappa, g)
        })
        .collect())
}

/// Feature extraction: threshold-passing points plus a voxel-downsampled
/// remainder, capped to `max_points` by seeded uniform sampling.
pub fn extract_features<S: Real>(
    cloud: &PointCloud<S>,
    params: &FeatureParams<S>,
) -> Result<FeatureCloud<S>, FeatureError> {
    if cloud.is_empty() {
        return Err(FeatureError::EmptyCloud);
    }
    let index = cloud::build_index(cloud)?;
    let feats = compute_point_features(cloud, &index, params.k.min(cloud.len()), params.eps)?;

    let mut feature_ids = Vec::new();
    let mut rest_ids = Vec::new();
    for (i, &(kappa, g)) in feats.iter().enumerate() {
        if kappa > params.tau_kappa || g > params.tau_g {
            feature_ids.push(i);
        } else {
            rest_ids.push(i);
        }
    }
    let rest_points: Vec<Point3<S>> = rest_ids.iter().map(|&i| cloud.points[i]).collect();
    let mut selected = feature_ids;
    if !rest_points.is_empty() {
        for rep in cloud::voxel_representatives(&rest_points, params.voxel)? {
            selected.push(rest_ids[rep]);
        }
    }
    if selected.len() > params.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
        let mut keep =
            rand::seq::index::sample(&mut rng, selected.len(), params.max_points).into_vec();
        keep.sort_unstable();
        selected = keep.into_iter().map(|j| selected[j]).collect();
    }
    let points = selected
        .into_iter()
        .map(|i| {
            let p = cloud.points[i];
            FeaturePoint {
                x: p.x,
                y: p.y,
                z: p.z,
                kappa: feats[i].0,
                grad: feats[i].1,
            }
        })
        .collect();
    Ok(FeatureCloud {
        points,
        source_timestamp: cloud.timestamp,
    })
}

/// Whitening transform fit on 4-D feature rows: center, rotate onto principal
/// axes (descending variance), divide by per-axis standard deviation.
#[derive(Debug, Clone)]
pub struct PcaTransform<S: Real = f64> {
    pub mean: [S; 4],
    /// Orthonormal, column j = j-th principal axis.
    pub basis: [[S; 4]; 4],
    /// Standard deviation along each principal axis.
    pub scales: [S; 4],
    pub eps: S,
}

impl<S: Real> PcaTransform<S> {
    /// The identity transform: whitening is a no-op.
    pub fn identity() -> Self {
        let mut basis = [[S::zero(); 4]; 4];
        for (i, row) in basis.iter_mut().enumerate() {
            row[i] = S::one();
        }
        Self {
            mean: [S::zero(); 4],
            basis,
            scales: [S::one(); 4],
            eps: S::c(1e-8),
        }
    }
}

pub fn fit_pca<S: Real>(rows: &[[S; 4]]) -> Result<PcaTransform<S>, FeatureError> {
    if rows.len() < 2 {
        return Err(FeatureError::DegenerateData);
    }
    let n = S::c(rows.len() as f64);
    let mut mean = [S::zero(); 4];
    for r in rows {
        for d in 0..4 {
            mean[d] = mean[d] + r[d];
        }
    }
    for m in &mut mean {
        *m = *m / n;
    }
    if rows.iter().all(|r| {
        (0..4).all(|d| (r[d] - rows[0][d]).abs() <= S::c(1e-30))
    }) {
        return Err(FeatureError::DegenerateData);
    }
    let mut cov = [S::zero(); 16];
    for r in rows {
        let d: Vec<S> = (0..4).map(|i| r[i] - mean[i]).collect();
        for i in 0..4 {
            for j in 0..4 {
                cov[i * 4 + j] = cov[i * 4 + j] + d[i] * d[j];
            }
        }
    }
    let denom = S::c((rows.len() - 1) as f64);
    for c in &mut cov {
        *c = *c / denom;
    }
    let (vals, vecs) = linalg::sym_eigen(4, &cov);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    let mut basis = [[S::zero(); 4]; 4];
    let mut scales = [S::zero(); 4];
    for (col, &src) in order.iter().enumerate() {
        let mut column = [S::zero(); 4];
        for (row, c) in column.iter_mut().enumerate() {
            *c = vecs[row * 4 + src];
        }
        // Sign convention: the largest-magnitude entry is positive.
        let mut argmax = 0;
        for i in 1..4 {
            if column[i].abs() > column[argmax].abs() {
                argmax = i;
            }
        }
        if column[argmax] < S::zero() {
            for c in &mut column {
                *c = -*c;
            }
        }
        for row in 0..4 {
            basis[row][col] = column[row];
        }
        scales[col] = vals[src].max(S::zero()).sqrt();
    }
    Ok(PcaTransform {
        mean,
        basis,
        scales,
        eps: S::c(1e-8),
    })
}

/// Whiten a feature row: basis^T (x - mean), each axis divided by
/// max(scale, eps).
pub fn apply_pca<S: Real>(t: &PcaTransform<S>, x: &[S; 4]) -> [S; 4] {
    let mut out = [S::zero(); 4];
    for (col, o) in out.iter_mut().enumerate() {
        let mut acc = S::zero();
        for row in 0..4 {
            acc = acc + t.basis[row][col] * (x[row] - t.mean[row]);
        }
        *o = acc / t.scales[col].max(t.eps);
    }
    out
}

/// Invert [`apply_pca`]; exact when every scale is nonzero.
pub fn invert_pca<S: Real>(t: &PcaTransform<S>, y: &[S; 4]) -> [S; 4] {
    let mut x = t.mean;
    for (col, &yc) in y.iter().enumerate() {
        let scaled = yc * t.scales[col].max(t.eps);
        for row in 0..4 {
            x[row] = x[row] + t.basis[row][col] * scaled;
        }
    }
    x
}

/// Write a feature cloud as 5-column text: `x y z kappa grad` per line.
pub fn save_feature_cloud<S: Real>(fc: &FeatureCloud<S>, path: &Path) -> Result<(), FeatureError> {
    let mut out = Vec::new();
    for p in &fc.points {
        writeln!(out, "{} {} {} {} {}", p.x, p.y, p.z, p.kappa, p.grad).expect("write to vec");
    }
    fs::write(path, out).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::build_index;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn stats_identical_points() {
        let cloud = PointCloud::new(vec![p(1.0, 2.0, 3.0); 5]);
        let index = build_index(&cloud).unwrap();
        let (mu, cov) = neighborhood_stats(&cloud, &index, 0, 5).unwrap();
        assert_eq!(mu, p(1.0, 2.0, 3.0));
        assert!(cov.iter().all(|&c| c.abs() < 1e-15));
    }

    #[test]
    fn stats_cross_pattern() {
        let cloud = PointCloud::new(vec![
            p(1.0, 0.0, 0.0),
            p(-1.0, 0.0, 0.0),
            p(0.0, 1.0, 0.0),
            p(0.0, -1.0, 0.0),
        ]);
        let index = build_index(&cloud).unwrap();
        let (mu, cov) = neighborhood_stats(&cloud, &index, 0, 4).unwrap();
        assert!(mu.dist(&p(0.0, 0.0, 0.0)) < 1e-15);
        let want = [2.0 / 3.0, 0.0, 0.0, 0.0, 2.0 / 3.0, 0.0, 0.0, 0.0, 0.0];
        for (c, w) in cov.iter().zip(&want) {
            assert!((c - w).abs() < 1e-12, "{cov:?}");
        }
    }

    #[test]
    fn stats_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = PointCloud::new(
            (0..20)
                .map(|_| {
                    p(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        );
        let index = build_index(&cloud).unwrap();
        let k = 20;
        let (_, cov) = neighborhood_stats(&cloud, &index, 3, k).unwrap();
        // Independent two-pass estimator over the same neighborhood.
        let ids: Vec<usize> = index.knn(&cloud.points[3], k).iter().map(|e| e.0).collect();
        let coords = |i: usize| [cloud.points[i].x, cloud.points[i].y, cloud.points[i].z];
        let mut mu = [0.0f64; 3];
        for &i in &ids {
            for d in 0..3 {
                mu[d] += coords(i)[d];
            }
        }
        for m in &mut mu {
            *m /= k as f64;
        }
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for &i in &ids {
                    s += (coords(i)[r] - mu[r]) * (coords(i)[c] - mu[c]);
                }
                s /= (k - 1) as f64;
                assert!((s - cov[r * 3 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stats_insufficient_points() {
        let cloud = PointCloud::new(vec![p(0.0, 0.0, 0.0)]);
        let index = build_index(&cloud).unwrap();
        assert!(matches!(
            neighborhood_stats(&cloud, &index, 0, 5),
            Err(FeatureError::InsufficientPoints { have: 1, need: 5 })
        ));
    }

    #[test]
    fn curvature_planar_zero() {
        let cov: [f64; 9] = [1.0, 0.2, 0.0, 0.2, 0.8, 0.0, 0.0, 0.0, 0.0];
        assert!(curvature(&cov, 1e-8).abs() < 1e-12);
    }

    #[test]
    fn curvature_isotropic_third() {
        let cov: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!((curvature(&cov, 1e-12) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn curvature_direct_arithmetic() {
        let cov: [f64; 9] = [4.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0];
        assert!((curvature(&cov, 0.0) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn curvature_bounded_on_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..500 {
            // B B^T is PSD.
            let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut cov = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        cov[i * 3 + j] += b[i * 3 + k] * b[j * 3 + k];
                    }
                }
            }
            let kappa = curvature(&cov, 1e-8);
            assert!((0.0..=1.0 / 3.0 + 1e-12).contains(&kappa), "kappa {kappa}");
        }
    }

    #[test]
    fn gradient_flat_zero() {
        let cloud = PointCloud::new(vec![
            p(0.0, 0.0, 1.0),
            p(1.0, 0.0, 1.0),
            p(0.0, 1.0, 1.0),
            p(1.0, 1.0, 1.0),
        ]);
        let index = build_index(&cloud).unwrap();
        assert_eq!(gradient(&cloud, &index, 0, 4).unwrap(), 0.0);
    }

    #[test]
    fn gradient_forced_arithmetic() {
        // Neighborhood of point 0 at k=5: itself plus z offsets {+1,-1,+1,-1}.
        let cloud = PointCloud::new(vec![
            p(0.0, 0.0, 0.0),
            p(0.1, 0.0, 1.0),
            p(-0.1, 0.0, -1.0),
            p(0.0, 0.1, 1.0),
            p(0.0, -0.1, -1.0),
        ]);
        let index = build_index(&cloud).unwrap();
        // Sum of |dz| = 4 over k = 5 neighbors (self contributes 0).
        assert!((gradient(&cloud, &index, 0, 5).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_direct_summation() {
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                pts.push(p(i as f64, j as f64, i as f64)); // plane z = x
            }
        }
        let cloud = PointCloud::new(pts);
        let index = build_index(&cloud).unwrap();
        let k = 9;
        for i in [0, 7, 21, 35] {
            let g = gradient(&cloud, &index, i, k).unwrap();
            let direct: f64 = index
                .knn(&cloud.points[i], k)
                .iter()
                .map(|(j, _)| (cloud.points[*j].z - cloud.points[i].z).abs())
                .sum::<f64>()
                / k as f64;
            assert!((g - direct).abs() < 1e-12);
        }
    }

    fn plane_cloud(n: usize, z: impl Fn(f64, f64) -> f64) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (i as f64 * 0.1, j as f64 * 0.1);
                pts.push(p(x, y, z(x, y)));
            }
        }
        PointCloud::new(pts)
    }

    #[test]
    fn extract_flat_plane_no_features() {
        let cloud = plane_cloud(20, |_, _| 0.5);
        let params = FeatureParams {
            tau_kappa: 0.01,
            tau_g: 0.01,
            ..Default::default()
        };
        let fc = extract_features(&cloud, &params).unwrap();
        let expected = cloud::voxel_downsample(&cloud, params.voxel).unwrap();
        assert_eq!(fc.len(), expected.len());
        assert!(fc.points.iter().all(|fp| fp.kappa <= 0.01 && fp.grad <= 0.01));
    }

    #[test]
    fn extract_spike_is_feature() {
        let mut cloud = plane_cloud(20, |_, _| 0.0);
        cloud.points[205].z = 1.0; // 1 m spike
        let params = FeatureParams {
            tau_kappa: 1.0, // disable curvature channel
            tau_g: 0.1,
            ..Default::default()
        };
        let fc = extract_features(&cloud, &params).unwrap();
        let spike = cloud.points[205];
        assert!(fc
            .points
            .iter()
            .any(|fp| fp.position().dist(&spike) < 1e-12 && fp.grad > 0.1));
    }

    #[test]
    fn extract_cap_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cloud = PointCloud::new(
            (0..5000)
                .map(|_| {
                    p(
                        rng.gen_range(0.0..10.0),
                        rng.gen_range(0.0..10.0),
                        rng.gen_range(0.0..0.5),
                    )
                })
                .collect(),
        );
        let params = FeatureParams {
            max_points: 300,
            voxel: 0.05,
            rng_seed: 42,
            ..Default::default()
        };
        let a = extract_features(&cloud, &params).unwrap();
        let b = extract_features(&cloud, &params).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn features_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cloud = PointCloud::new(
            (0..200)
                .map(|_| {
                    p(
                        rng.gen_range(0.0..4.0),
                        rng.gen_range(0.0..4.0),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect(),
        );
        let shifted = PointCloud::new(
            cloud
                .points
                .iter()
                .map(|q| p(q.x + 13.0, q.y - 7.0, q.z + 3.0))
                .collect(),
        );
        let ia = build_index(&cloud).unwrap();
        let ib = build_index(&shifted).unwrap();
        let fa = compute_point_features(&cloud, &ia, 10, 1e-8).unwrap();
        let fb = compute_point_features(&shifted, &ib, 10, 1e-8).unwrap();
        for (a, b) in fa.iter().zip(&fb) {
            assert!((a.0 - b.0).abs() < 1e-9, "kappa {} vs {}", a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-9, "grad {} vs {}", a.1, b.1);
        }
    }

    fn check_orthonormal(t: &PcaTransform) {
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4).map(|r| t.basis[r][i] * t.basis[r][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_axis_aligned() {
        // Symmetric pairs along each axis give an exactly diagonal sample
        // covariance with variances (4, 3, 2, 1).
        let variances = [4.0, 3.0, 2.0, 1.0];
        let n = 8;
        let mut rows = Vec::new();
        for (d, &var) in variances.iter().enumerate() {
            let a = (var * (n - 1) as f64 / 2.0).sqrt();
            for sign in [1.0, -1.0] {
                let mut r = [0.0; 4];
                r[d] = sign * a;
                rows.push(r);
            }
        }
        let t = fit_pca(&rows).unwrap();
        check_orthonormal(&t);
        for d in 0..4 {
            assert!((t.scales[d] - variances[d].sqrt()).abs() < 1e-9, "scale {d}");
            assert!((t.basis[d][d].abs() - 1.0).abs() < 1e-9, "basis col {d}");
        }
    }

    #[test]
    fn pca_45_degree_rotation() {
        // Dominant variance along the (1,1)/sqrt(2) direction in (x,y).
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inv = std::f64::consts::FRAC_1_SQRT_2;
        for _ in 0..2000 {
            let major = rng.gen_range(-3.0..3.0);
            let minor = rng.gen_range(-0.1..0.1);
            rows.push([
                major * inv - minor * inv,
                major * inv + minor * inv,
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
            ]);
        }
        let t = fit_pca(&rows).unwrap();
        let col0 = [t.basis[0][0], t.basis[1][0], t.basis[2][0], t.basis[3][0]];
        assert!((col0[0] - inv).abs() < 1e-2, "{col0:?}");
        assert!((col0[1] - inv).abs() < 1e-2, "{col0:?}");
        assert!(col0[2].abs() < 1e-2 && col0[3].abs() < 1e-2);
    }

    #[test]
    fn pca_constant_axis_last() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<[f64; 4]> = (0..500)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-1.0..1.0),
                    7.0, // constant
                    rng.gen_range(-0.5..0.5),
                ]
            })
            .collect();
        let t = fit_pca(&rows).unwrap();
        assert!(t.scales[3].abs() < 1e-9);
        assert!((t.basis[2][3].abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pca_degenerate_errors() {
        let rows = vec![[1.0, 2.0, 3.0, 4.0]; 10];
        assert!(matches!(fit_pca(&rows), Err(FeatureError::DegenerateData)));
        assert!(matches!(
            fit_pca(&rows[..1]),
            Err(FeatureError::DegenerateData)
        ));
    }

    #[test]
    fn apply_pca_centering_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<[f64; 4]> = (0..300)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..0.3),
                    rng.gen_range(0.0..0.2),
                ]
            })
            .collect();
        let t = fit_pca(&rows).unwrap();
        let at_mean = apply_pca(&t, &t.mean.clone());
        assert!(at_mean.iter().all(|v| v.abs() < 1e-12));

        let id = PcaTransform::identity();
        let x = [1.0, -2.0, 3.0, 0.5];
        assert_eq!(apply_pca(&id, &x), x);
    }

    #[test]
    fn apply_pca_whitens_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let rows: Vec<[f64; 4]> = (0..2000)
            .map(|_| {
                let a = rng.gen_range(-3.0..3.0);
                [
                    a + rng.gen_range(-0.2..0.2),
                    0.5 * a + rng.gen_range(-0.4..0.4),
                    rng.gen_range(0.0..0.1),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let t = fit_pca(&rows).unwrap();
        let mapped: Vec<[f64; 4]> = rows.iter().map(|r| apply_pca(&t, r)).collect();
        for d in 0..4 {
            let mean: f64 = mapped.iter().map(|r| r[d]).sum::<f64>() / mapped.len() as f64;
            let var: f64 = mapped.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>()
                / (mapped.len() - 1) as f64;
            assert!((var - 1.0).abs() < 1e-6, "axis {d} variance {var}");
        }
    }

    #[test]
    fn pca_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let rows: Vec<[f64; 4]> = (0..200)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..0.3),
                    rng.gen_range(0.0..0.2),
                ]
            })
            .collect();
        let t = fit_pca(&rows).unwrap();
        for r in rows.iter().take(50) {
            let back = invert_pca(&t, &apply_pca(&t, r));
            for d in 0..4 {
                assert!((back[d] - r[d]).abs() < 1e-9);
            }
        }
    }
}
