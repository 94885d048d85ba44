//! Sequential sensing simulation and method benchmarking. A robot replays a
//! trajectory over a synthetic world; each pose yields a radius-cropped scan
//! with seeded angular-sector occlusion. Competing mapping methods run on
//! the frame sequence and are scored per frame against the ground-truth
//! oracle over cells observed by both maps.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{self, Point3, PointCloud, SpatialIndex};
use crate::features::{self, FeatureCloud, FeatureError, FeaturePoint, PcaTransform};
use crate::sgp::{self, KernelParams, SgpError, TestGrid};
use crate::synthterrain::Pose;
use crate::travmap::{
    update_map, FusionParams, HistoryBuffer, TravCell, TravError, TravGrid,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Sgp(#[from] SgpError),
    #[error(transparent)]
    Trav(#[from] TravError),
    #[error("maps have different geometry")]
    GeometryMismatch,
    #[error("no cells observed in both maps")]
    NoOverlap,
    #[error("no usable frames in sequence")]
    NoFrames,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One sensed frame: pose, occluded local cloud, acquisition time.
#[derive(Debug, Clone)]
pub struct ScanFrame {
    pub pose: Pose,
    pub cloud: PointCloud,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SgpBaseline,
    Fsgp,
    FsgpBgk,
    Em,
    FsgpAccum,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgp-baseline" => Some(Self::SgpBaseline),
            "fsgp" => Some(Self::Fsgp),
            "fsgp-bgk" => Some(Self::FsgpBgk),
            "em" => Some(Self::Em),
            "fsgp-accum" => Some(Self::FsgpAccum),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SgpBaseline => "sgp-baseline",
            Self::Fsgp => "fsgp",
            Self::FsgpBgk => "fsgp-bgk",
            Self::Em => "em",
            Self::FsgpAccum => "fsgp-accum",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodConfig {
    pub method: Method,
    pub feature: features::FeatureParams,
    /// Kernel over whitened inputs (feature methods).
    pub kernel: KernelParams,
    pub fusion: FusionParams,
    pub m_ind: usize,
    pub sensor_radius: f64,
    pub occlusion_frac: f64,
    pub resolution: f64,
    /// IDW neighbors when interpolating cell features.
    pub idw_neighbors: usize,
    /// Cells farther than this from any feature point stay unmapped, meters.
    pub support_radius: f64,
    /// Coordinate-ascent iterations for hyperparameter fitting; 0 = off.
    pub fit_iters: usize,
    /// Fraction of each cropped scan retained (seeded per frame), modelling
    /// the sparse per-sweep sampling of a real sensor.
    pub scan_keep: f64,
    pub seed: u64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::FsgpBgk,
            feature: features::FeatureParams::default(),
            kernel: KernelParams {
                lengthscales: [0.35, 0.35, 1.0, 1.0],
                ..KernelParams::default()
            },
            fusion: FusionParams::for_resolution(0.2),
            m_ind: 125,
            sensor_radius: 8.0,
            occlusion_frac: 0.15,
            resolution: 0.2,
            idw_neighbors: 3,
            support_radius: 0.8,
            fit_iters: 0,
            scan_keep: 0.25,
            seed: 0,
        }
    }
}

impl MethodConfig {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.occlusion_frac)
            && self.sensor_radius > 0.0
            && self.resolution > 0.0
            && self.m_ind >= 1
            && self.idw_neighbors >= 1
            && self.scan_keep > 0.0
            && self.scan_keep <= 1.0
            && self.fusion.weights_valid()
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }
}

fn pose_seed(x: f64, y: f64, seed: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in [x.to_bits(), y.to_bits()] {
        h ^= b;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Sense from a pose: crop the global cloud to the sensor radius, then drop
/// 1-4 seeded non-overlapping angular sectors totalling `occlusion_frac` of
/// the full circle. Deterministic per (pose, seed).
pub fn simulate_scan(
    global: &PointCloud,
    pose: &Pose,
    radius: f64,
    occlusion_frac: f64,
    seed: u64,
) -> ScanFrame {
    assert!(radius > 0.0, "sensor radius must be positive");
    assert!((0.0..=1.0).contains(&occlusion_frac));
    let center = Point3::new(pose.x, pose.y, 0.0);
    let mut cropped = cloud::crop_radius(global, &center, radius);
    if occlusion_frac >= 1.0 {
        cropped.points.clear();
    } else if occlusion_frac > 0.0 {
        let tau = std::f64::consts::TAU;
        let mut rng = ChaCha8Rng::seed_from_u64(pose_seed(pose.x, pose.y, seed));
        let n = rng.gen_range(1..=4usize);
        let sector_mass = occlusion_frac * tau;
        let widths = random_partition(&mut rng, n, sector_mass);
        let gaps = random_partition(&mut rng, n, tau - sector_mass);
        let start = rng.gen_range(0.0..tau);
        // sector i spans [starts[i], starts[i] + widths[i]) mod tau
        let mut starts = Vec::with_capacity(n);
        let mut a = start;
        for i in 0..n {
            starts.push(a);
            a += widths[i] + gaps[i];
        }
        cropped.points.retain(|p| {
            let ang = (p.y - pose.y).atan2(p.x - pose.x).rem_euclid(tau);
            !starts.iter().zip(&widths).any(|(&s, &w)| {
                (ang - s).rem_euclid(tau) < w
            })
        });
    }
    cropped.timestamp = pose.t;
    ScanFrame {
        pose: *pose,
        cloud: cropped,
        t: pose.t,
    }
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize, total: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v * total / s).collect()
}

/// Build the frame sequence for a trajectory: crop + occlude each pose, then
/// keep a seeded `scan_keep` fraction of the points so successive visits to
/// the same spot observe different subsets, as a sweeping sensor would.
pub fn make_frames(global: &PointCloud, poses: &[Pose], cfg: &MethodConfig) -> Vec<ScanFrame> {
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut frame = simulate_scan(global, p, cfg.sensor_radius, cfg.occlusion_frac, cfg.seed);
            if cfg.scan_keep < 1.0 {
                let salt = pose_seed(p.x, p.y, cfg.seed) ^ (i as u64).wrapping_mul(0x9e37_79b9);
                let mut rng = ChaCha8Rng::seed_from_u64(salt);
                frame
                    .cloud
                    .points
                    .retain(|_| rng.gen_range(0.0..1.0) < cfg.scan_keep);
            }
            frame
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRow {
    pub frame: usize,
    pub mean_error: f64,
    pub error_variance: f64,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<FrameRow>,
}

impl EvalReport {
    /// Column means: (mean error, error variance, runtime ms).
    pub fn aggregates(&self) -> (f64, f64, f64) {
        let n = self.rows.len().max(1) as f64;
        let sum = self.rows.iter().fold((0.0, 0.0, 0.0), |acc, r| {
            (
                acc.0 + r.mean_error,
                acc.1 + r.error_variance,
                acc.2 + r.runtime_ms,
            )
        });
        (sum.0 / n, sum.1 / n, sum.2 / n)
    }
}

/// Mean and population variance of per-cell absolute score differences over
/// cells observed in both maps.
pub fn compare(map: &TravGrid, gt: &TravGrid) -> Result<(f64, f64), SimError> {
    if !map.same_geometry(gt) {
        return Err(SimError::GeometryMismatch);
    }
    let mut errs = Vec::new();
    for (a, b) in map.cells.iter().zip(&gt.cells) {
        if a.observed && b.observed {
            errs.push((a.score - b.score).abs());
        }
    }
    if errs.is_empty() {
        return Err(SimError::NoOverlap);
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Union of the clouds of `frames`, in frame order.
pub fn accumulate(frames: &[ScanFrame]) -> PointCloud {
    let mut points = Vec::with_capacity(frames.iter().map(|f| f.cloud.len()).sum());
    for f in frames {
        points.extend_from_slice(&f.cloud.points);
    }
    let mut out = PointCloud::new(points);
    if let Some(last) = frames.last() {
        out.timestamp = last.t;
    }
    out
}

struct GridBounds {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

fn gt_bounds(gt: &TravGrid) -> GridBounds {
    GridBounds {
        xmin: gt.origin_x,
        ymin: gt.origin_y,
        xmax: gt.origin_x + gt.nx as f64 * gt.resolution,
        ymax: gt.origin_y + gt.ny as f64 * gt.resolution,
    }
}

/// One SGP mapping pass over a frame: features, whitening, inducing-point
/// training, prediction over the pose-local window (snapped to the global
/// lattice), slope field, and the support/radius validity mask.
fn sgp_frame(
    fc: &FeatureCloud,
    pca: &PcaTransform,
    kernel: &KernelParams,
    pose: &Pose,
    cfg: &MethodConfig,
    bounds: &GridBounds,
) -> Result<(sgp::Prediction, TestGrid, f64), SimError> {
    let inputs: Vec<[f64; 4]> = fc
        .points
        .iter()
        .map(|p| features::apply_pca(pca, &p.input_row()))
        .collect();
    let targets: Vec<f64> = fc.points.iter().map(|p| p.z).collect();
    let ts = sgp::TrainSet::new(inputs, targets);
    let mut params = kernel.clone();
    if cfg.fit_iters > 0 {
        params = sgp::fit_hyperparameters(&ts, &params, cfg.fit_iters, cfg.seed);
    }
    let inducing = sgp::select_inducing(fc, cfg.m_ind)?;
    let model = sgp::train_robust(&ts, &inducing, &params, pca)?;

    let res = cfg.resolution;
    let snap_lo = |v: f64, lo: f64| lo + ((v - lo) / res).floor().max(0.0) * res;
    let snap_hi = |v: f64, lo: f64, hi: f64| lo + (((v - lo) / res).ceil() * res).min(hi - lo);
    let xlo = snap_lo(pose.x - cfg.sensor_radius, bounds.xmin);
    let ylo = snap_lo(pose.y - cfg.sensor_radius, bounds.ymin);
    let xhi = snap_hi(pose.x + cfg.sensor_radius, bounds.xmin, bounds.xmax);
    let yhi = snap_hi(pose.y + cfg.sensor_radius, bounds.ymin, bounds.ymax);
    let mut grid = sgp::build_test_grid(xlo, ylo, xhi, yhi, res, fc, cfg.idw_neighbors, 1e-6, pca)?;

    // mask cells out of sensor range or without nearby evidence
    let flat: Vec<Point3> = fc
        .points
        .iter()
        .map(|p| Point3::new(p.x, p.y, 0.0))
        .collect();
    let support = SpatialIndex::build(&flat).expect("non-empty feature cloud");
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let idx = iy * grid.nx + ix;
            let (cx, cy) = grid.cell_center(ix, iy);
            let in_range = ((cx - pose.x).powi(2) + (cy - pose.y).powi(2)).sqrt()
                <= cfg.sensor_radius;
            let (_, d) = support.knn(&Point3::new(cx, cy, 0.0), 1)[0];
            grid.valid[idx] = in_range && d <= cfg.support_radius;
        }
    }

    let mut pred = sgp::predict(&model, &grid);
    pred.slope = sgp::slope_field(&pred, res)?;
    let prior_var = model.params.variance + model.params.noise;
    Ok((pred, grid, prior_var))
}

fn feature_cloud_and_pca(
    cloud: &PointCloud,
    cfg: &MethodConfig,
) -> Result<(FeatureCloud, PcaTransform), SimError> {
    let fc = features::extract_features(cloud, &cfg.feature)?;
    let rows: Vec<[f64; 4]> = fc.points.iter().map(|p| p.input_row()).collect();
    let pca = features::fit_pca(&rows).unwrap_or_else(|_| PcaTransform::identity());
    Ok((fc, pca))
}

/// Plain-downsampled cloud as a zero-feature cloud for the geometry-only
/// baseline; scored on slope alone with an unwhitened metric kernel.
fn baseline_feature_cloud(cloud: &PointCloud, cfg: &MethodConfig) -> Result<FeatureCloud, SimError> {
    let mut ds = cloud::voxel_downsample(cloud, cfg.feature.voxel).map_err(FeatureError::from)?;
    if ds.len() > cfg.feature.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.feature.rng_seed);
        let mut keep =
            rand::seq::index::sample(&mut rng, ds.len(), cfg.feature.max_points).into_vec();
        keep.sort_unstable();
        ds.points = keep.into_iter().map(|i| ds.points[i]).collect();
    }
    Ok(FeatureCloud {
        points: ds
            .points
            .iter()
            .map(|p| FeaturePoint {
                x: p.x,
                y: p.y,
                z: p.z,
                kappa: 0.0,
                grad: 0.0,
            })
            .collect(),
        source_timestamp: cloud.timestamp,
    })
}

/// Kernel for the baseline's raw-meter inputs. The raw targets carry
/// within-voxel height scatter and no feature decorrelation, so the baseline
/// needs a wide kernel (0.2 of the sensor radius) and a heavy ridge: without
/// the large noise term its interpolant chases per-point scatter and the
/// slope-only score drifts with the inducing count.
fn baseline_kernel(cfg: &MethodConfig) -> KernelParams {
    let l = 0.2 * cfg.sensor_radius;
    KernelParams {
        lengthscales: [l, l, 1.0, 1.0],
        noise: 2.5,
        ..cfg.kernel.clone()
    }
}

fn fresh_history(gt: &TravGrid) -> HistoryBuffer {
    HistoryBuffer {
        grid: TravGrid::unobserved(gt.origin_x, gt.origin_y, gt.resolution, gt.nx, gt.ny),
        extent: gt.nx as f64 * gt.resolution,
    }
}

/// Incremental running mean/std elevation grid with neighbor-difference
/// scoring: the grid-based baseline.
pub fn elevation_map_baseline(
    frames: &[ScanFrame],
    gt_geom: &TravGrid,
    params: &FusionParams,
) -> TravGrid {
    let mut out = TravGrid::unobserved(
        gt_geom.origin_x,
        gt_geom.origin_y,
        gt_geom.resolution,
        gt_geom.nx,
        gt_geom.ny,
    );
    let n = out.num_cells();
    let mut sum = vec![0.0f64; n];
    let mut sum_sq = vec![0.0f64; n];
    let mut count = vec![0usize; n];
    let mut t_last = 0.0;
    for f in frames {
        t_last = f.t;
        for p in &f.cloud.points {
            if let Some((ix, iy)) = out.locate(p.x, p.y) {
                let idx = iy * out.nx + ix;
                sum[idx] += p.z;
                sum_sq[idx] += p.z * p.z;
                count[idx] += 1;
            }
        }
    }
    let height: Vec<Option<f64>> = (0..n)
        .map(|i| (count[i] > 0).then(|| sum[i] / count[i] as f64))
        .collect();
    let res = out.resolution;
    for iy in 0..out.ny as isize {
        for ix in 0..out.nx as isize {
            let idx = iy as usize * out.nx + ix as usize;
            let Some(h) = height[idx] else { continue };
            // roughness: std of z within the cell
            let m2 = sum_sq[idx] / count[idx] as f64 - h * h;
            let rough = m2.max(0.0).sqrt();
            // mean |dh| over observed 8-neighbors
            let mut gsum = 0.0;
            let mut gn = 0usize;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (jx, jy) = (ix + dx, iy + dy);
                    if jx < 0 || jy < 0 || jx >= out.nx as isize || jy >= out.ny as isize {
                        continue;
                    }
                    if let Some(hj) = height[jy as usize * out.nx + jx as usize] {
                        gsum += (hj - h).abs();
                        gn += 1;
                    }
                }
            }
            let ghat = if gn > 0 { gsum / gn as f64 } else { 0.0 };
            // finite-difference slope over observed axis neighbors
            let axis = |a: Option<f64>, b: Option<f64>, span: f64| match (a, b) {
                (Some(va), Some(vb)) => (vb - va) / span,
                (Some(va), None) => (h - va) / res,
                (None, Some(vb)) => (vb - h) / res,
                (None, None) => 0.0,
            };
            let get = |jx: isize, jy: isize| -> Option<f64> {
                if jx < 0 || jy < 0 || jx >= out.nx as isize || jy >= out.ny as isize {
                    None
                } else {
                    height[jy as usize * out.nx + jx as usize]
                }
            };
            let gx = axis(get(ix - 1, iy), get(ix + 1, iy), 2.0 * res);
            let gy = axis(get(ix, iy - 1), get(ix, iy + 1), 2.0 * res);
            let slope = (gx * gx + gy * gy).sqrt();
            let score = params.w_kappa * (rough / params.g_max).min(1.0)
                + params.w_g * (ghat / params.g_max).min(1.0)
                + params.w_grad * (slope / params.slope_max).min(1.0);
            out.cells[idx] = TravCell {
                score,
                variance: 0.0,
                timestamp: t_last,
                observed: true,
            };
        }
    }
    out
}

/// Run one method over the frame sequence against the ground-truth oracle
/// grid. Returns the per-frame maps (on the oracle lattice) and the
/// per-frame error/timing report. Frames too small to process are skipped
/// with a log message.
pub fn run_method(
    cfg: &MethodConfig,
    frames: &[ScanFrame],
    oracle: &TravGrid,
) -> Result<(Vec<TravGrid>, EvalReport), SimError> {
    assert!(cfg.is_valid(), "invalid method config");
    let bounds = gt_bounds(oracle);
    let mut history = fresh_history(oracle);
    let mut seen: Vec<ScanFrame> = Vec::new();
    let slope_only = FusionParams {
        w_kappa: 0.0,
        w_g: 0.0,
        w_grad: 1.0,
        ..cfg.fusion.clone()
    };
    let mut maps = Vec::new();
    let mut report = EvalReport::default();
    for (i, frame) in frames.iter().enumerate() {
        if frame.cloud.len() < cfg.feature.k.max(2) {
            log::warn!("frame {i}: only {} points, skipping", frame.cloud.len());
            continue;
        }
        seen.push(frame.clone());
        let start = Instant::now();
        let map = match cfg.method {
            Method::FsgpBgk => {
                let (fc, pca) = feature_cloud_and_pca(&frame.cloud, cfg)?;
                let (pred, grid, pv) =
                    sgp_frame(&fc, &pca, &cfg.kernel, &frame.pose, cfg, &bounds)?;
                update_map(&mut history, &pred, &grid, frame.t, &cfg.fusion, pv)?
            }
            Method::Fsgp => {
                let (fc, pca) = feature_cloud_and_pca(&frame.cloud, cfg)?;
                let (pred, grid, pv) =
                    sgp_frame(&fc, &pca, &cfg.kernel, &frame.pose, cfg, &bounds)?;
                let mut fresh = fresh_history(oracle);
                update_map(&mut fresh, &pred, &grid, frame.t, &cfg.fusion, pv)?
            }
            Method::FsgpAccum => {
                let union = accumulate(&seen);
                let (fc, pca) = feature_cloud_and_pca(&union, cfg)?;
                let (pred, grid, pv) =
                    sgp_frame(&fc, &pca, &cfg.kernel, &frame.pose, cfg, &bounds)?;
                let mut fresh = fresh_history(oracle);
                update_map(&mut fresh, &pred, &grid, frame.t, &cfg.fusion, pv)?
            }
            Method::SgpBaseline => {
                let fc = baseline_feature_cloud(&frame.cloud, cfg)?;
                let pca = PcaTransform::identity();
                let kernel = baseline_kernel(cfg);
                let (pred, grid, pv) = sgp_frame(&fc, &pca, &kernel, &frame.pose, cfg, &bounds)?;
                let mut fresh = fresh_history(oracle);
                update_map(&mut fresh, &pred, &grid, frame.t, &slope_only, pv)?
            }
            Method::Em => elevation_map_baseline(&seen, oracle, &cfg.fusion),
        };
        let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
        let (mean_error, error_variance) = compare(&map, oracle)?;
        report.rows.push(FrameRow {
            frame: i,
            mean_error,
            error_variance,
            runtime_ms,
        });
        maps.push(map);
    }
    if report.rows.is_empty() {
        return Err(SimError::NoFrames);
    }
    Ok((maps, report))
}

/// CSV with one row per frame and a trailing aggregate comment line.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), SimError> {
    assert!(!report.rows.is_empty(), "empty report");
    let mut out = String::from("frame,mean_error,error_variance,runtime_ms\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.frame, r.mean_error, r.error_variance, r.runtime_ms
        ));
    }
    let (m, v, t) = report.aggregates();
    out.push_str(&format!("# avg,{m},{v},{t}\n"));
    std::fs::write(path, out).map_err(|source| SimError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parse a report written by [`write_report`].
pub fn read_report(path: &Path) -> Result<EvalReport, SimError> {
    let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let v: Vec<&str> = line.split(',').collect();
        rows.push(FrameRow {
            frame: v[0].parse().unwrap_or(0),
            mean_error: v[1].parse().unwrap_or(f64::NAN),
            error_variance: v[2].parse().unwrap_or(f64::NAN),
            runtime_ms: v[3].parse().unwrap_or(f64::NAN),
        });
    }
    Ok(EvalReport { rows })
}
