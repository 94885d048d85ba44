//! Traversability cost map: preliminary scoring from curvature, gradient and
//! slope, recursive spatio-temporal fusion against per-cell history, and
//! Gaussian smoothing of the fused field.
//!
//! Fusion blends a cell's prior score with new evidence using a temporal
//! decay weight omega_t = exp(-lambda (t - t0)) and a confidence weight
//! omega_sigma = 1/(prior variance + eps); the fused value always lies
//! between the prior and the new evidence. Scores are dimensionless in
//! [0, 1], 0 = easily traversable.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::num::Real;
use crate::sgp::{Prediction, TestGrid};

#[derive(Debug, thiserror::Error)]
pub enum TravError {
    #[error("observation time {t} precedes cell timestamp {t0}")]
    TimeRegression { t: f64, t0: f64 },
    #[error("prediction is {pred} cells but grid is {grid}")]
    DimensionMismatch { pred: usize, grid: usize },
    #[error("grids are not on the same lattice: {msg}")]
    GeometryMismatch { msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("layer {0:?} not present in grid file")]
    MissingLayer(String),
}

/// One map cell: fused score, variance, last-update time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TravCell<S: Real = f64> {
    pub score: S,
    pub variance: S,
    pub timestamp: f64,
    pub observed: bool,
}

impl<S: Real> Default for TravCell<S> {
    fn default() -> Self {
        Self {
            score: S::nan(),
            variance: S::nan(),
            timestamp: 0.0,
            observed: false,
        }
    }
}

/// Uniform 2-D grid of [`TravCell`], row-major (index = iy * nx + ix).
#[derive(Debug, Clone)]
pub struct TravGrid<S: Real = f64> {
    pub origin_x: S,
    pub origin_y: S,
    pub resolution: S,
    pub nx: usize,
    pub ny: usize,
    pub cells: Vec<TravCell<S>>,
}

impl<S: Real> TravGrid<S> {
    pub fn unobserved(origin_x: S, origin_y: S, resolution: S, nx: usize, ny: usize) -> Self {
        Self {
            origin_x,
            origin_y,
            resolution,
            nx,
            ny,
            cells: vec![TravCell::default(); nx * ny],
        }
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (S, S) {
        let half = S::c(0.5);
        (
            self.origin_x + (S::c(ix as f64) + half) * self.resolution,
            self.origin_y + (S::c(iy as f64) + half) * self.resolution,
        )
    }

    /// Grid indices of the cell containing the world point, if inside.
    pub fn locate(&self, x: S, y: S) -> Option<(usize, usize)> {
        let fx = ((x - self.origin_x) / self.resolution).floor().f64();
        let fy = ((y - self.origin_y) / self.resolution).floor().f64();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn same_geometry(&self, other: &TravGrid<S>) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && (self.origin_x - other.origin_x).abs() < S::c(1e-9)
            && (self.origin_y - other.origin_y).abs() < S::c(1e-9)
            && (self.resolution - other.resolution).abs() < S::c(1e-9)
    }
}

/// Weights and normalization caps for scoring and fusion.
#[derive(Debug, Clone)]
pub struct FusionParams<S: Real = f64> {
    pub w_kappa: S,
    pub w_g: S,
    pub w_grad: S,
    /// Temporal decay rate, 1/seconds.
    pub lambda: S,
    /// Confidence-weight stabilizer.
    pub eps: S,
    /// Smoothing kernel width, meters.
    pub sigma_smooth: S,
    /// Smoothing neighborhood radius, cells.
    pub smooth_radius: usize,
    pub kappa_max: S,
    pub g_max: S,
    pub slope_max: S,
}

impl<S: Real> Default for FusionParams<S> {
    fn default() -> Self {
        Self {
            w_kappa: S::c(0.3),
            w_g: S::c(0.3),
            w_grad: S::c(0.4),
            lambda: S::c(0.2),
            eps: S::c(1e-3),
            sigma_smooth: S::c(0.3), // 1.5 x the default 0.2 m resolution
            smooth_radius: 2,
            kappa_max: S::c(1.0 / 3.0),
            g_max: S::c(0.3),
            slope_max: S::c(0.577), // tan 30 deg
        }
    }
}

impl<S: Real> FusionParams<S> {
    /// Default params with the smoothing width tied to the map resolution.
    pub fn for_resolution(resolution: S) -> Self {
        Self {
            sigma_smooth: S::c(1.5) * resolution,
            ..Self::default()
        }
    }

    pub fn weights_valid(&self) -> bool {
        ((self.w_kappa + self.w_g + self.w_grad) - S::one()).abs() < S::c(1e-9)
            && self.w_kappa >= S::zero()
            && self.w_g >= S::zero()
            && self.w_grad >= S::zero()
    }
}

/// Preliminary traversability score: each channel is normalized by its cap
/// and clamped to 1, then combined with the (convex) weights.
pub fn preliminary_score<S: Real>(kappa: S, g: S, slope: S, params: &FusionParams<S>) -> S {
    let norm = |v: S, cap: S| (v / cap).min(S::one());
    params.w_kappa * norm(kappa, params.kappa_max)
        + params.w_g * norm(g, params.g_max)
        + params.w_grad * norm(slope, params.slope_max)
}

/// Recursive fusion of a cell's prior state with new evidence at time `t`.
pub fn bgk_fuse<S: Real>(
    prior: &TravCell<S>,
    m_pre: S,
    sigma_pre_sq: S,
    t: f64,
    params: &FusionParams<S>,
) -> Result<TravCell<S>, TravError> {
    if !prior.observed {
        return Ok(TravCell {
            score: m_pre,
            variance: sigma_pre_sq,
            timestamp: t,
            observed: true,
        });
    }
    if t < prior.timestamp {
        return Err(TravError::TimeRegression {
            t,
            t0: prior.timestamp,
        });
    }
    let omega_t = (-params.lambda * S::c(t - prior.timestamp)).exp();
    let omega_sigma = S::one() / (prior.variance + params.eps);
    let w = omega_t * omega_sigma;
    let score = (w * prior.score + m_pre) / (w + S::one());
    let variance = (omega_t * prior.variance + sigma_pre_sq) / (omega_t + S::one());
    Ok(TravCell {
        score,
        variance,
        timestamp: t,
        observed: true,
    })
}

/// Gaussian smoothing over observed cells within `smooth_radius` cells,
/// normalized so the result is a weighted average of the contributing
/// neighborhood. Unobserved cells stay unobserved and never contribute.
pub fn gaussian_smooth<S: Real>(grid: &TravGrid<S>, params: &FusionParams<S>) -> TravGrid<S> {
    let mut out = grid.clone();
    let r = params.smooth_radius as isize;
    let two_sigma_sq = S::c(2.0) * params.sigma_smooth * params.sigma_smooth;
    for iy in 0..grid.ny as isize {
        for ix in 0..grid.nx as isize {
            let idx = iy as usize * grid.nx + ix as usize;
            if !grid.cells[idx].observed {
                continue;
            }
            let mut num = S::zero();
            let mut den = S::zero();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (jx, jy) = (ix + dx, iy + dy);
                    if jx < 0 || jy < 0 || jx >= grid.nx as isize || jy >= grid.ny as isize {
                        continue;
                    }
                    let jdx = jy as usize * grid.nx + jx as usize;
                    if !grid.cells[jdx].observed {
                        continue;
                    }
                    let dist_sq = S::c((dx * dx + dy * dy) as f64)
                        * grid.resolution
                        * grid.resolution;
                    let w = (-dist_sq / two_sigma_sq).exp();
                    num = num + w * grid.cells[jdx].score;
                    den = den + w;
                }
            }
            out.cells[idx].score = num / den;
        }
    }
    out
}

/// World-anchored sliding-window cell history. The window is square with
/// side `extent`, snapped to the cell lattice; recentering keeps overlapping
/// cells and evicts the rest.
#[derive(Debug, Clone)]
pub struct HistoryBuffer<S: Real = f64> {
    pub grid: TravGrid<S>,
    pub extent: S,
}

fn snap<S: Real>(v: S, resolution: S) -> S {
    (v / resolution).round() * resolution
}

impl<S: Real> HistoryBuffer<S> {
    pub fn new(center_x: S, center_y: S, extent: S, resolution: S) -> Self {
        let n = (extent / resolution).round().f64().max(1.0) as usize;
        let half = S::c(n as f64 / 2.0) * resolution;
        let ox = snap(center_x - half, resolution);
        let oy = snap(center_y - half, resolution);
        Self {
            grid: TravGrid::unobserved(ox, oy, resolution, n, n),
            extent,
        }
    }

    /// Move the window so it is centered on `(cx, cy)`, preserving cells that
    /// remain inside. Cells that leave are evicted; re-entering cells start
    /// unobserved.
    pub fn recenter(&mut self, cx: S, cy: S) {
        let res = self.grid.resolution;
        let n = self.grid.nx;
        let half = S::c(n as f64 / 2.0) * res;
        let new_ox = snap(cx - half, res);
        let new_oy = snap(cy - half, res);
        let shift_x = ((new_ox - self.grid.origin_x) / res).round().f64() as isize;
        let shift_y = ((new_oy - self.grid.origin_y) / res).round().f64() as isize;
        if shift_x == 0 && shift_y == 0 {
            return;
        }
        let ny = self.grid.ny;
        let old = std::mem::replace(
            &mut self.grid,
            TravGrid::unobserved(new_ox, new_oy, res, n, ny),
        );
        for iy in 0..old.ny as isize {
            for ix in 0..old.nx as isize {
                let (tx, ty) = (ix - shift_x, iy - shift_y);
                if tx < 0 || ty < 0 || tx >= n as isize || ty >= old.ny as isize {
                    continue;
                }
                self.grid.cells[ty as usize * n + tx as usize] =
                    old.cells[iy as usize * old.nx + ix as usize];
            }
        }
    }
}

/// One frame of the map update: preliminary scores from the interpolated
/// features and slope, per-cell fusion into the history window, then a
/// smoothed snapshot of the window. `prior_variance` rescales the SGP
/// variance (m^2) into the dimensionless evidence variance; pass
/// sigma_f^2 + sigma_n^2 of the model that produced `pred`.
pub fn update_map<S: Real>(
    history: &mut HistoryBuffer<S>,
    pred: &Prediction<S>,
    grid: &TestGrid<S>,
    t: f64,
    params: &FusionParams<S>,
    prior_variance: S,
) -> Result<TravGrid<S>, TravError> {
    if pred.mean.len() != grid.num_cells() || pred.slope.len() != grid.num_cells() {
        return Err(TravError::DimensionMismatch {
            pred: pred.mean.len(),
            grid: grid.num_cells(),
        });
    }
    let res_ratio = (grid.resolution / history.grid.resolution).f64();
    if (res_ratio - 1.0).abs() > 1e-9 {
        return Err(TravError::GeometryMismatch {
            msg: format!(
                "test grid resolution {} vs history {}",
                grid.resolution, history.grid.resolution
            ),
        });
    }
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let idx = iy * grid.nx + ix;
            if !grid.valid[idx] {
                continue;
            }
            let (cx, cy) = grid.cell_center(ix, iy);
            let Some((hx, hy)) = history.grid.locate(cx, cy) else {
                continue;
            };
            let m_pre = preliminary_score(grid.kappa[idx], grid.grad[idx], pred.slope[idx], params);
            let sigma_pre_sq = (pred.variance[idx] / prior_variance).min(S::one());
            let hidx = hy * history.grid.nx + hx;
            let fused = bgk_fuse(&history.grid.cells[hidx], m_pre, sigma_pre_sq, t, params)?;
            history.grid.cells[hidx] = fused;
        }
    }
    Ok(gaussian_smooth(&history.grid, params))
}

/// A layered grid file (`.tgrid`): ASCII header, then for each layer a
/// `layer <name>` line followed by nx*ny little-endian f32 values.
#[derive(Debug, Clone)]
pub struct TgridFile {
    pub origin_x: f64,
    pub origin_y: f64,
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
    pub layers: Vec<(String, Vec<f32>)>,
}

impl TgridFile {
    pub fn layer(&self, name: &str) -> Result<&[f32], TravError> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| TravError::MissingLayer(name.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), TravError> {
        let mut out: Vec<u8> = Vec::new();
        writeln!(out, "{} {}", self.origin_x, self.origin_y).expect("vec write");
        writeln!(out, "{}", self.resolution).expect("vec write");
        writeln!(out, "{} {}", self.nx, self.ny).expect("vec write");
        for (name, values) in &self.layers {
            assert_eq!(values.len(), self.nx * self.ny, "layer {name} size");
            writeln!(out, "layer {name}").expect("vec write");
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|source| TravError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, TravError> {
        let pstr = path.display().to_string();
        let bytes = fs::read(path).map_err(|source| TravError::Io {
            path: pstr.clone(),
            source,
        })?;
        let parse_err = |msg: String| TravError::Parse {
            path: pstr.clone(),
            msg,
        };
        let mut pos = 0usize;
        let read_line = |bytes: &[u8], pos: &mut usize| -> Result<String, TravError> {
            let start = *pos;
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            if *pos >= bytes.len() {
                return Err(TravError::Parse {
                    path: pstr.clone(),
                    msg: "unexpected end of file in header".into(),
                });
            }
            let line = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
            *pos += 1;
            Ok(line)
        };
        let origin_line = read_line(&bytes, &mut pos)?;
        let mut it = origin_line.split_whitespace();
        let origin_x: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad origin".into()))?;
        let origin_y: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad origin".into()))?;
        let resolution: f64 = read_line(&bytes, &mut pos)?
            .trim()
            .parse()
            .map_err(|_| parse_err("bad resolution".into()))?;
        let dims_line = read_line(&bytes, &mut pos)?;
        let mut it = dims_line.split_whitespace();
        let nx: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad dims".into()))?;
        let ny: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad dims".into()))?;
        let mut layers = Vec::new();
        while pos < bytes.len() {
            let line = read_line(&bytes, &mut pos)?;
            let name = line
                .strip_prefix("layer ")
                .ok_or_else(|| parse_err(format!("expected layer header, got {line:?}")))?
                .trim()
                .to_string();
            let need = nx * ny * 4;
            if pos + need > bytes.len() {
                return Err(parse_err(format!("layer {name} truncated")));
            }
            let values: Vec<f32> = bytes[pos..pos + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            pos += need;
            layers.push((name, values));
        }
        Ok(Self {
            origin_x,
            origin_y,
            resolution,
            nx,
            ny,
            layers,
        })
    }
}

impl<S: Real> TravGrid<S> {
    /// Standard four-layer file form: score, variance, timestamp, observed.
    pub fn to_file(&self) -> TgridFile {
        let f = |get: &dyn Fn(&TravCell<S>) -> f32| -> Vec<f32> {
            self.cells.iter().map(get).collect()
        };
        TgridFile {
            origin_x: self.origin_x.f64(),
            origin_y: self.origin_y.f64(),
            resolution: self.resolution.f64(),
            nx: self.nx,
            ny: self.ny,
            layers: vec![
                ("score".into(), f(&|c| c.score.f64() as f32)),
                ("variance".into(), f(&|c| c.variance.f64() as f32)),
                ("timestamp".into(), f(&|c| c.timestamp as f32)),
                (
                    "observed".into(),
                    f(&|c| if c.observed { 1.0 } else { 0.0 }),
                ),
            ],
        }
    }

    pub fn from_file(file: &TgridFile) -> Result<Self, TravError> {
        let score = file.layer("score")?;
        let variance = file.layer("variance")?;
        let timestamp = file.layer("timestamp")?;
        let observed = file.layer("observed")?;
        let cells = (0..file.nx * file.ny)
            .map(|i| {
                let obs = observed[i] != 0.0;
                TravCell {
                    score: if obs { S::c(score[i] as f64) } else { S::nan() },
                    variance: if obs {
                        S::c(variance[i] as f64)
                    } else {
                        S::nan()
                    },
                    timestamp: timestamp[i] as f64,
                    observed: obs,
                }
            })
            .collect();
        Ok(Self {
            origin_x: S::c(file.origin_x),
            origin_y: S::c(file.origin_y),
            resolution: S::c(file.resolution),
            nx: file.nx,
            ny: file.ny,
            cells,
        })
    }
}

/// Serialize 16-bit grayscale values as a binary PGM (P5, maxval 65535,
/// big-endian samples). Row 0 of `gray` is the top image row.
pub fn pgm16_bytes(nx: usize, ny: usize, gray: &[u16]) -> Vec<u8> {
    assert_eq!(gray.len(), nx * ny);
    let mut out = format!("P5\n{nx} {ny}\n65535\n").into_bytes();
    for g in gray {
        out.extend_from_slice(&g.to_be_bytes());
    }
    out
}

/// Heatmap of the fused scores: 0 -> white, 1 -> black, unobserved cells
/// mid-gray. Returns (pgm bytes, observation mask row-major top-down).
pub fn score_heatmap<S: Real>(grid: &TravGrid<S>) -> (Vec<u8>, Vec<bool>) {
    let mut gray = Vec::with_capacity(grid.num_cells());
    let mut mask = Vec::with_capacity(grid.num_cells());
    // PGM rows go top-down; our grid rows go bottom-up.
    for iy in (0..grid.ny).rev() {
        for ix in 0..grid.nx {
            let cell = &grid.cells[iy * grid.nx + ix];
            if cell.observed {
                let s = cell.score.f64().clamp(0.0, 1.0);
                gray.push(((1.0 - s) * 65535.0).round() as u16);
                mask.push(true);
            } else {
                gray.push(32768);
                mask.push(false);
            }
        }
    }
    (pgm16_bytes(grid.nx, grid.ny, &gray), mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> FusionParams<f64> {
        FusionParams::default()
    }

    #[test]
    fn weights_sum_checked() {
        assert!(params().weights_valid());
        let bad = FusionParams {
            w_kappa: 0.5,
            ..params()
        };
        assert!(!bad.weights_valid());
    }

    #[test]
    fn preliminary_zero_and_one() {
        let p = params();
        assert_eq!(preliminary_score(0.0, 0.0, 0.0, &p), 0.0);
        // saturated inputs hit the convexity bound exactly
        let s = preliminary_score(p.kappa_max * 2.0, p.g_max * 2.0, p.slope_max * 2.0, &p);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preliminary_direct_arithmetic() {
        let p = params(); // weights (0.3, 0.3, 0.4)
        let s = preliminary_score(0.2 * p.kappa_max, 0.4 * p.g_max, 0.6 * p.slope_max, &p);
        assert!((s - 0.42).abs() < 1e-12);
    }

    fn observed(score: f64, variance: f64, t: f64) -> TravCell<f64> {
        TravCell {
            score,
            variance,
            timestamp: t,
            observed: true,
        }
    }

    #[test]
    fn fuse_unobserved_adopts_evidence() {
        let out = bgk_fuse(&TravCell::default(), 0.7, 0.2, 3.0, &params()).unwrap();
        assert_eq!(out, observed(0.7, 0.2, 3.0));
    }

    #[test]
    fn fuse_equal_weight_midpoint() {
        let p = FusionParams {
            eps: 0.0,
            ..params()
        };
        let prior = observed(0.2, 1.0, 5.0);
        let out = bgk_fuse(&prior, 0.4, 1.0, 5.0, &p).unwrap();
        assert!((out.score - 0.3).abs() < 1e-12);
    }

    #[test]
    fn fuse_decay_limit_forgets_history() {
        let prior = observed(0.9, 0.01, 0.0);
        let out = bgk_fuse(&prior, 0.2, 0.5, 1e6, &params()).unwrap();
        assert!((out.score - 0.2).abs() < 1e-9);
        assert!((out.variance - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fuse_matches_scalar_evaluation() {
        // lambda=0.5, dt=2, prior var 0.5, eps=0.1, prior 0.8, evidence 0.2
        let p = FusionParams {
            lambda: 0.5,
            eps: 0.1,
            ..params()
        };
        let prior = observed(0.8, 0.5, 1.0);
        let out = bgk_fuse(&prior, 0.2, 0.3, 3.0, &p).unwrap();
        // independent scalar evaluation
        let omega_t = (-1.0f64).exp();
        let omega_sigma = 1.0 / 0.6;
        let want = (omega_t * omega_sigma * 0.8 + 0.2) / (omega_t * omega_sigma + 1.0);
        assert!((out.score - want).abs() < 1e-12);
        assert!((want - 0.4280).abs() < 1e-4);
        let want_var = (omega_t * 0.5 + 0.3) / (omega_t + 1.0);
        assert!((out.variance - want_var).abs() < 1e-12);
    }

    #[test]
    fn fuse_time_regression_errors() {
        let prior = observed(0.5, 0.1, 10.0);
        assert!(matches!(
            bgk_fuse(&prior, 0.5, 0.1, 9.0, &params()),
            Err(TravError::TimeRegression { .. })
        ));
    }

    #[test]
    fn fuse_convexity_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params();
        for _ in 0..10_000 {
            let prior = observed(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), 0.0);
            let m_pre = rng.gen_range(0.0..1.0);
            let s_pre = rng.gen_range(0.0..1.0);
            let t = rng.gen_range(0.0..10.0);
            let out = bgk_fuse(&prior, m_pre, s_pre, t, &p).unwrap();
            let (lo, hi) = (prior.score.min(m_pre), prior.score.max(m_pre));
            assert!(out.score >= lo - 1e-12 && out.score <= hi + 1e-12);
            let (vlo, vhi) = (prior.variance.min(s_pre), prior.variance.max(s_pre));
            assert!(out.variance >= vlo - 1e-12 && out.variance <= vhi + 1e-12);
        }
    }

    #[test]
    fn fuse_decay_monotone_toward_evidence() {
        let p = params();
        let prior = observed(0.9, 0.2, 0.0);
        let mut last_gap = f64::INFINITY;
        for dt in [0.0, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let out = bgk_fuse(&prior, 0.1, 0.2, dt, &p).unwrap();
            let gap = (out.score - 0.1).abs();
            assert!(gap <= last_gap + 1e-12, "dt {dt}");
            last_gap = gap;
        }
    }

    #[test]
    fn fuse_confidence_monotone_toward_prior() {
        let p = params();
        let mut last_gap = f64::INFINITY;
        for var in [1.0, 0.5, 0.2, 0.05, 0.01] {
            let prior = observed(0.9, var, 0.0);
            let out = bgk_fuse(&prior, 0.1, 0.2, 0.0, &p).unwrap();
            let gap = (out.score - 0.9).abs();
            assert!(gap <= last_gap + 1e-12, "var {var}");
            last_gap = gap;
        }
    }

    #[test]
    fn repeated_observation_contraction_bound() {
        let p = params();
        let m_pre = 0.3;
        let mut cell = observed(0.9, 0.4, 0.0);
        let initial_gap = (cell.score - m_pre).abs();
        let mut product = 1.0;
        for n in 1..=10 {
            let omega_t = 1.0; // same timestamp each frame
            let omega_sigma = 1.0 / (cell.variance + p.eps);
            product *= omega_t * omega_sigma / (omega_t * omega_sigma + 1.0);
            cell = bgk_fuse(&cell, m_pre, 0.4, 0.0, &p).unwrap();
            let gap = (cell.score - m_pre).abs();
            assert!(gap <= initial_gap * product + 1e-12, "frame {n}");
        }
    }

    fn grid_from_scores(nx: usize, ny: usize, scores: &[f64]) -> TravGrid<f64> {
        let mut g = TravGrid::unobserved(0.0, 0.0, 1.0, nx, ny);
        for (i, &s) in scores.iter().enumerate() {
            if s.is_nan() {
                continue;
            }
            g.cells[i] = observed(s, 0.1, 0.0);
        }
        g
    }

    #[test]
    fn smooth_uniform_fixed_point() {
        let g = grid_from_scores(5, 5, &[0.4; 25]);
        let p = FusionParams::for_resolution(1.0);
        let out = gaussian_smooth(&g, &p);
        for c in out.cells {
            assert!((c.score - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_isolated_cell_unchanged() {
        let mut scores = vec![f64::NAN; 25];
        scores[12] = 0.8;
        let g = grid_from_scores(5, 5, &scores);
        let p = FusionParams::for_resolution(1.0);
        let out = gaussian_smooth(&g, &p);
        assert!((out.cells[12].score - 0.8).abs() < 1e-12);
        assert!(!out.cells[0].observed);
    }

    #[test]
    fn smooth_three_cells_hand_value() {
        // collinear scores (0, 1, 0), sigma = resolution, radius 1
        let g = grid_from_scores(3, 1, &[0.0, 1.0, 0.0]);
        let p = FusionParams {
            sigma_smooth: 1.0,
            smooth_radius: 1,
            ..params()
        };
        let out = gaussian_smooth(&g, &p);
        let k = (-0.5f64).exp();
        let want = 1.0 / (1.0 + 2.0 * k);
        assert!((out.cells[1].score - want).abs() < 1e-12);
        assert!((want - 0.4519).abs() < 1e-4);
    }

    #[test]
    fn smooth_is_weighted_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..100)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    f64::NAN
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        let g = grid_from_scores(10, 10, &scores);
        let p = FusionParams::for_resolution(1.0);
        let out = gaussian_smooth(&g, &p);
        let max_in = scores.iter().cloned().filter(|s| !s.is_nan()).fold(0.0, f64::max);
        for c in &out.cells {
            if c.observed {
                assert!(c.score <= max_in + 1e-12 && c.score >= 0.0);
            }
        }
    }

    #[test]
    fn history_recenter_evicts_and_resets() {
        let mut h = HistoryBuffer::new(0.0, 0.0, 4.0, 1.0);
        let (ix, iy) = h.grid.locate(-1.5, -1.5).unwrap();
        h.grid.cells[iy * h.grid.nx + ix] = observed(0.6, 0.1, 0.0);
        let (jx, jy) = h.grid.locate(1.5, 1.5).unwrap();
        h.grid.cells[jy * h.grid.nx + jx] = observed(0.3, 0.1, 0.0);
        // shift the window so (-1.5, -1.5) falls out
        h.recenter(2.0, 2.0);
        assert!(h.grid.locate(-1.5, -1.5).is_none());
        let (kx, ky) = h.grid.locate(1.5, 1.5).unwrap();
        let kept = h.grid.cells[ky * h.grid.nx + kx];
        assert_eq!(kept, observed(0.3, 0.1, 0.0));
        // shift back: the evicted cell re-enters unobserved
        h.recenter(0.0, 0.0);
        let (lx, ly) = h.grid.locate(-1.5, -1.5).unwrap();
        assert!(!h.grid.cells[ly * h.grid.nx + lx].observed);
    }

    fn tiny_pred(nx: usize, ny: usize) -> (Prediction<f64>, TestGrid<f64>) {
        let n = nx * ny;
        let grid = TestGrid {
            origin_x: 0.0,
            origin_y: 0.0,
            resolution: 1.0,
            nx,
            ny,
            kappa: vec![0.05; n],
            grad: vec![0.1; n],
            inputs: vec![[0.0; 4]; n],
            valid: vec![true; n],
        };
        let pred = Prediction {
            mean: vec![0.0; n],
            variance: vec![0.5; n],
            slope: vec![0.2; n],
            nx,
            ny,
        };
        (pred, grid)
    }

    #[test]
    fn update_first_frame_is_smoothed_preliminary() {
        let (pred, grid) = tiny_pred(4, 4);
        let p = FusionParams::for_resolution(1.0);
        let mut h = HistoryBuffer::new(2.0, 2.0, 4.0, 1.0);
        let out = update_map(&mut h, &pred, &grid, 0.0, &p, 1.01).unwrap();
        let m_pre = preliminary_score(0.05, 0.1, 0.2, &p);
        // uniform preliminary field: smoothing is a fixed point
        for c in out.cells.iter().filter(|c| c.observed) {
            assert!((c.score - m_pre).abs() < 1e-12);
        }
        assert!(out.cells.iter().any(|c| c.observed));
    }

    #[test]
    fn update_replay_is_idempotent() {
        let (mut pred, grid) = tiny_pred(4, 4);
        for (i, m) in pred.mean.iter_mut().enumerate() {
            *m = i as f64 * 0.01;
        }
        for (i, s) in pred.slope.iter_mut().enumerate() {
            *s = (i % 3) as f64 * 0.1;
        }
        let p = FusionParams::for_resolution(1.0);
        let mut h = HistoryBuffer::new(2.0, 2.0, 4.0, 1.0);
        let first = update_map(&mut h, &pred, &grid, 1.0, &p, 1.01).unwrap();
        let second = update_map(&mut h, &pred, &grid, 1.0, &p, 1.01).unwrap();
        for (a, b) in first.cells.iter().zip(&second.cells) {
            assert_eq!(a.observed, b.observed);
            if a.observed {
                assert!((a.score - b.score).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn update_converges_toward_reobserved_evidence() {
        let (pred, grid) = tiny_pred(4, 4);
        let p = FusionParams::for_resolution(1.0);
        let m_pre = preliminary_score(0.05, 0.1, 0.2, &p);
        let mut h = HistoryBuffer::new(2.0, 2.0, 4.0, 1.0);
        // seed history with a different state
        for c in &mut h.grid.cells {
            *c = observed(0.9, 0.3, 0.0);
        }
        let gap = |g: &TravGrid<f64>| -> f64 {
            let obs: Vec<f64> = g
                .cells
                .iter()
                .filter(|c| c.observed)
                .map(|c| (c.score - m_pre).abs())
                .collect();
            obs.iter().sum::<f64>() / obs.len() as f64
        };
        let f1 = update_map(&mut h, &pred, &grid, 1.0, &p, 1.01).unwrap();
        let g1 = gap(&f1);
        let f2 = update_map(&mut h, &pred, &grid, 2.0, &p, 1.01).unwrap();
        let g2 = gap(&f2);
        assert!(g2 <= g1 && g1 <= gap(&TravGrid {
            cells: vec![observed(0.9, 0.3, 0.0); 16],
            ..f1.clone()
        }));
    }

    #[test]
    fn update_dimension_mismatch() {
        let (pred, _) = tiny_pred(4, 4);
        let (_, grid) = tiny_pred(3, 3);
        let p = FusionParams::for_resolution(1.0);
        let mut h = HistoryBuffer::new(2.0, 2.0, 4.0, 1.0);
        assert!(matches!(
            update_map(&mut h, &pred, &grid, 0.0, &p, 1.0),
            Err(TravError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn scores_stay_bounded_through_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FusionParams::for_resolution(1.0);
        let mut h = HistoryBuffer::new(2.0, 2.0, 4.0, 1.0);
        for frame in 0..5 {
            let (mut pred, mut grid) = tiny_pred(4, 4);
            for i in 0..16 {
                grid.kappa[i] = rng.gen_range(0.0..0.5);
                grid.grad[i] = rng.gen_range(0.0..0.6);
                pred.slope[i] = rng.gen_range(0.0..1.0);
                pred.variance[i] = rng.gen_range(0.0..1.01);
            }
            let out = update_map(&mut h, &pred, &grid, frame as f64, &p, 1.01).unwrap();
            for c in out.cells.iter().filter(|c| c.observed) {
                assert!((0.0..=1.0).contains(&c.score), "score {}", c.score);
                assert!(c.variance >= 0.0);
            }
        }
    }

    #[test]
    fn tgrid_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = TravGrid::unobserved(-3.0, 2.0, 0.25, 6, 5);
        for c in &mut g.cells {
            if rng.gen_bool(0.7) {
                *c = observed(
                    (rng.gen_range(0.0f32..1.0) as f64 * 100.0).round() / 100.0,
                    0.125,
                    2.0,
                );
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tgrid");
        g.to_file().write(&path).unwrap();
        let file = TgridFile::read(&path).unwrap();
        let back: TravGrid<f64> = TravGrid::from_file(&file).unwrap();
        assert!(back.same_geometry(&g));
        for (a, b) in g.cells.iter().zip(&back.cells) {
            assert_eq!(a.observed, b.observed);
            if a.observed {
                assert!((a.score - b.score).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn missing_layer_reported() {
        let f = TgridFile {
            origin_x: 0.0,
            origin_y: 0.0,
            resolution: 1.0,
            nx: 1,
            ny: 1,
            layers: vec![("score".into(), vec![0.0])],
        };
        assert!(matches!(
            f.layer("slope"),
            Err(TravError::MissingLayer(_))
        ));
    }

    #[test]
    fn heatmap_extremes() {
        let g = grid_from_scores(2, 1, &[0.0, 1.0]);
        let (bytes, mask) = score_heatmap(&g);
        assert!(bytes.starts_with(b"P5\n2 1\n65535\n"));
        let data = &bytes[bytes.len() - 4..];
        assert_eq!(u16::from_be_bytes([data[0], data[1]]), 65535); // score 0 -> white
        assert_eq!(u16::from_be_bytes([data[2], data[3]]), 0); // score 1 -> black
        assert_eq!(mask, vec![true, true]);
    }
}
