//! Sparse Gaussian process elevation regression over whitened 4-D feature
//! inputs (x, y, kappa, grad).
//!
//! The predictive equations use only the inducing-point Gram matrix K_MM and
//! the inducing targets z_M (subset-of-regressors form):
//! mean = K_*M K_MM^-1 z_M, variance = k_** - K_*M K_MM^-1 K_M*. Inducing
//! points are chosen by farthest-point sampling in the horizontal plane; test
//! inputs come from a uniform grid whose kappa/grad channels are interpolated
//! by normalized inverse-distance weighting.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::{Point3, SpatialIndex};
use crate::features::{self, FeatureCloud, PcaTransform};
use crate::linalg;
use crate::num::Real;

#[derive(Debug, thiserror::Error)]
pub enum SgpError {
    #[error("operation requires a non-empty feature cloud")]
    EmptyFeatureCloud,
    #[error("Gram matrix not positive definite at pivot {pivot} (try more jitter)")]
    NotPositiveDefinite { pivot: usize },
    #[error("slope needs at least a 2x2 grid, got {nx}x{ny}")]
    GridTooSmall { nx: usize, ny: usize },
}

/// Squared-exponential ARD kernel hyperparameters over the 4 whitened axes.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams<S: Real = f64> {
    /// Signal variance sigma_f^2, elevation^2.
    pub variance: S,
    /// Per-axis lengthscales, whitened-feature units.
    pub lengthscales: [S; 4],
    /// Observation noise variance sigma_n^2.
    pub noise: S,
    /// Diagonal stabilizer added to K_MM.
    pub jitter: S,
}

impl<S: Real> Default for KernelParams<S> {
    fn default() -> Self {
        Self {
            variance: S::one(),
            lengthscales: [S::one(); 4],
            noise: S::c(1e-2),
            jitter: S::c(1e-6),
        }
    }
}

/// k(a, b) = sigma_f^2 exp(-1/2 sum_d ((a_d - b_d)/l_d)^2).
pub fn kernel<S: Real>(params: &KernelParams<S>, a: &[S; 4], b: &[S; 4]) -> S {
    let mut q = S::zero();
    for d in 0..4 {
        let r = (a[d] - b[d]) / params.lengthscales[d];
        q = q + r * r;
    }
    params.variance * (-q / S::c(2.0)).exp()
}

/// Whitened training inputs with centered elevation targets.
#[derive(Debug, Clone)]
pub struct TrainSet<S: Real = f64> {
    pub inputs: Vec<[S; 4]>,
    /// Centered targets (elevation minus `target_mean`).
    pub targets: Vec<S>,
    pub target_mean: S,
}

impl<S: Real> TrainSet<S> {
    /// Center raw elevations around their mean.
    pub fn new(inputs: Vec<[S; 4]>, raw_targets: Vec<S>) -> Self {
        assert_eq!(inputs.len(), raw_targets.len());
        assert!(!inputs.is_empty(), "train set must be non-empty");
        let mean = raw_targets.iter().copied().sum::<S>() / S::c(raw_targets.len() as f64);
        let targets = raw_targets.into_iter().map(|t| t - mean).collect();
        Self {
            inputs,
            targets,
            target_mean: mean,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Inducing-point ids chosen by farthest-point sampling in (x, y), starting
/// from the point nearest the cloud's horizontal centroid. Deterministic for
/// a fixed input order; returns everything when `m_ind >= |fc|`.
pub fn select_inducing<S: Real>(
    fc: &FeatureCloud<S>,
    m_ind: usize,
) -> Result<Vec<usize>, SgpError> {
    if fc.is_empty() {
        return Err(SgpError::EmptyFeatureCloud);
    }
    let n = fc.len();
    if m_ind >= n {
        return Ok((0..n).collect());
    }
    let inv_n = S::one() / S::c(n as f64);
    let cx = fc.points.iter().map(|p| p.x).sum::<S>() * inv_n;
    let cy = fc.points.iter().map(|p| p.y).sum::<S>() * inv_n;
    let d2 = |i: usize, x: S, y: S| {
        let dx = fc.points[i].x - x;
        let dy = fc.points[i].y - y;
        dx * dx + dy * dy
    };
    let mut start = 0;
    for i in 1..n {
        if d2(i, cx, cy) < d2(start, cx, cy) {
            start = i;
        }
    }
    let mut chosen = Vec::with_capacity(m_ind);
    chosen.push(start);
    // min squared distance from each point to the chosen set
    let mut min_d2: Vec<S> = (0..n)
        .map(|i| d2(i, fc.points[start].x, fc.points[start].y))
        .collect();
    while chosen.len() < m_ind {
        let mut next = 0;
        for i in 1..n {
            if min_d2[i] > min_d2[next] {
                next = i;
            }
        }
        chosen.push(next);
        let (nx, ny) = (fc.points[next].x, fc.points[next].y);
        for i in 0..n {
            let d = d2(i, nx, ny);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Trained sparse GP: inducing inputs, Cholesky factor of K_MM + jitter I,
/// and the precomputed solve alpha = (K_MM + jitter I)^-1 z_M.
#[derive(Debug, Clone)]
pub struct SgpModel<S: Real = f64> {
    pub inducing: Vec<[S; 4]>,
    /// Lower-triangular factor, row-major m x m.
    pub chol: Vec<S>,
    pub alpha: Vec<S>,
    /// Centered elevations at the inducing points.
    pub z_m: Vec<S>,
    pub params: KernelParams<S>,
    pub pca: PcaTransform<S>,
    pub target_mean: S,
}

/// Factorize K_MM + jitter I over the selected inducing points and
/// precompute alpha. No hyperparameter optimization happens here.
pub fn train<S: Real>(
    ts: &TrainSet<S>,
    inducing_ids: &[usize],
    params: &KernelParams<S>,
    pca: &PcaTransform<S>,
) -> Result<SgpModel<S>, SgpError> {
    assert!(!inducing_ids.is_empty(), "need at least one inducing point");
    let m = inducing_ids.len();
    let inducing: Vec<[S; 4]> = inducing_ids.iter().map(|&i| ts.inputs[i]).collect();
    let z_m: Vec<S> = inducing_ids.iter().map(|&i| ts.targets[i]).collect();
    let mut gram = vec![S::zero(); m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut v = kernel(params, &inducing[i], &inducing[j]);
            if i == j {
                v = v + params.noise + params.jitter;
            }
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
    }
    let chol =
        linalg::cholesky(m, &gram).map_err(|pivot| SgpError::NotPositiveDefinite { pivot })?;
    let alpha = linalg::solve_cholesky(m, &chol, &z_m);
    Ok(SgpModel {
        inducing,
        chol,
        alpha,
        z_m,
        params: params.clone(),
        pca: pca.clone(),
        target_mean: ts.target_mean,
    })
}

/// [`train`], retrying with jitter escalated tenfold (up to 1e-2) when the
/// Gram factorization fails.
pub fn train_robust<S: Real>(
    ts: &TrainSet<S>,
    inducing_ids: &[usize],
    params: &KernelParams<S>,
    pca: &PcaTransform<S>,
) -> Result<SgpModel<S>, SgpError> {
    let mut p = params.clone();
    loop {
        match train(ts, inducing_ids, &p, pca) {
            Err(SgpError::NotPositiveDefinite { pivot }) if p.jitter < S::c(1e-2) => {
                log::debug!("gram pivot {pivot} failed, jitter -> {}", p.jitter.f64() * 10.0);
                p.jitter = (p.jitter * S::c(10.0)).min(S::c(1e-2));
            }
            other => return other,
        }
    }
}

/// Exact GP log marginal likelihood of `(inputs, targets)` under `params`.
fn log_marginal_likelihood<S: Real>(
    inputs: &[[S; 4]],
    targets: &[S],
    params: &KernelParams<S>,
) -> Option<S> {
    let n = inputs.len();
    let mut k = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut v = kernel(params, &inputs[i], &inputs[j]);
            if i == j {
                v = v + params.noise + params.jitter;
            }
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let l = linalg::cholesky(n, &k).ok()?;
    let alpha = linalg::solve_cholesky(n, &l, targets);
    let fit: S = targets.iter().zip(&alpha).map(|(&t, &a)| t * a).sum();
    let logdet: S = (0..n).map(|i| l[i * n + i].ln()).sum();
    let half = S::c(0.5);
    Some(-half * fit - logdet - S::c(n as f64) * half * S::c((2.0 * std::f64::consts::PI).ln()))
}

/// Maximize the exact-GP log marginal likelihood on a subsample of at most
/// 256 training points by multi-start coordinate ascent over log-parameters.
/// `max_iters = 0` returns `init` unchanged. Deterministic for a given seed;
/// candidates whose factorization fails are skipped.
pub fn fit_hyperparameters<S: Real>(
    ts: &TrainSet<S>,
    init: &KernelParams<S>,
    max_iters: usize,
    seed: u64,
) -> KernelParams<S> {
    if max_iters == 0 || ts.is_empty() {
        return init.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..ts.len()).collect();
    if ids.len() > 256 {
        ids.shuffle(&mut rng);
        ids.truncate(256);
        ids.sort_unstable();
    }
    let inputs: Vec<[S; 4]> = ids.iter().map(|&i| ts.inputs[i]).collect();
    let targets: Vec<S> = ids.iter().map(|&i| ts.targets[i]).collect();

    let to_vec = |p: &KernelParams<S>| -> [f64; 6] {
        [
            p.variance.f64().ln(),
            p.lengthscales[0].f64().ln(),
            p.lengthscales[1].f64().ln(),
            p.lengthscales[2].f64().ln(),
            p.lengthscales[3].f64().ln(),
            p.noise.f64().max(1e-12).ln(),
        ]
    };
    let from_vec = |v: &[f64; 6]| -> KernelParams<S> {
        KernelParams {
            variance: S::c(v[0].exp()),
            lengthscales: [
                S::c(v[1].exp()),
                S::c(v[2].exp()),
                S::c(v[3].exp()),
                S::c(v[4].exp()),
            ],
            noise: S::c(v[5].exp()),
            jitter: init.jitter,
        }
    };
    let score = |v: &[f64; 6]| -> Option<f64> {
        log_marginal_likelihood(&inputs, &targets, &from_vec(v)).map(|s| s.f64())
    };

    let base = to_vec(init);
    let mut starts = vec![base];
    for _ in 0..2 {
        let mut s = base;
        for c in &mut s {
            *c += rng.gen_range(-1.0..1.0);
        }
        starts.push(s);
    }

    let mut best = base;
    let mut best_score = score(&base).unwrap_or(f64::NEG_INFINITY);
    for start in starts {
        let mut cur = start;
        let mut cur_score = match score(&cur) {
            Some(s) => s,
            None => continue,
        };
        let mut step = 0.5;
        for _ in 0..max_iters {
            let mut improved = false;
            for d in 0..6 {
                for dir in [1.0, -1.0] {
                    let mut cand = cur;
                    cand[d] += dir * step;
                    if let Some(s) = score(&cand) {
                        if s > cur_score {
                            cur = cand;
                            cur_score = s;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
                if step < 1e-3 {
                    break;
                }
            }
        }
        if cur_score > best_score {
            best_score = cur_score;
            best = cur;
        }
    }
    from_vec(&best)
}

/// Uniform prediction grid with IDW-interpolated kappa/grad channels and
/// whitened SGP inputs per cell. Row-major, index = iy * nx + ix.
#[derive(Debug, Clone)]
pub struct TestGrid<S: Real = f64> {
    pub origin_x: S,
    pub origin_y: S,
    pub resolution: S,
    pub nx: usize,
    pub ny: usize,
    pub kappa: Vec<S>,
    pub grad: Vec<S>,
    pub inputs: Vec<[S; 4]>,
    /// Cells eligible for mapping; callers may mask e.g. out-of-range cells.
    pub valid: Vec<bool>,
}

impl<S: Real> TestGrid<S> {
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
}

/// Build the test grid over `[xmin, xmax] x [ymin, ymax]`. For each cell
/// center the K nearest feature points (horizontal distance) contribute
/// kappa/grad through weights 1/(d+eps), normalized to sum to one.
#[allow(clippy::too_many_arguments)]
pub fn build_test_grid<S: Real>(
    xmin: S,
    ymin: S,
    xmax: S,
    ymax: S,
    resolution: S,
    fc: &FeatureCloud<S>,
    neighbors: usize,
    eps: S,
    pca: &PcaTransform<S>,
) -> Result<TestGrid<S>, SgpError> {
    assert!(resolution > S::zero(), "resolution must be positive");
    assert!(neighbors >= 1, "need at least one IDW neighbor");
    if fc.is_empty() {
        return Err(SgpError::EmptyFeatureCloud);
    }
    let nx = ((xmax - xmin) / resolution).ceil().f64().max(1.0) as usize;
    let ny = ((ymax - ymin) / resolution).ceil().f64().max(1.0) as usize;
    // planar index over feature positions
    let flat: Vec<Point3<S>> = fc
        .points
        .iter()
        .map(|p| Point3::new(p.x, p.y, S::zero()))
        .collect();
    let index = SpatialIndex::build(&flat).expect("non-empty by check above");
    let mut grid = TestGrid {
        origin_x: xmin,
        origin_y: ymin,
        resolution,
        nx,
        ny,
        kappa: vec![S::zero(); nx * ny],
        grad: vec![S::zero(); nx * ny],
        inputs: vec![[S::zero(); 4]; nx * ny],
        valid: vec![true; nx * ny],
    };
    let cells: Vec<(S, S, S, [S; 4])> = (0..nx * ny)
        .into_par_iter()
        .map(|idx| {
            let (ix, iy) = (idx % nx, idx / nx);
            let (cx, cy) = grid.cell_center(ix, iy);
            let near = index.knn(&Point3::new(cx, cy, S::zero()), neighbors);
            let mut wsum = S::zero();
            let mut kappa = S::zero();
            let mut g = S::zero();
            for &(j, d) in &near {
                let w = S::one() / (d + eps);
                wsum = wsum + w;
                kappa = kappa + w * fc.points[j].kappa;
                g = g + w * fc.points[j].grad;
            }
            kappa = kappa / wsum;
            g = g / wsum;
            let x = features::apply_pca(pca, &[cx, cy, kappa, g]);
            (kappa, g, wsum, x)
        })
        .collect();
    for (idx, (kappa, g, _, x)) in cells.into_iter().enumerate() {
        grid.kappa[idx] = kappa;
        grid.grad[idx] = g;
        grid.inputs[idx] = x;
    }
    Ok(grid)
}

/// Per-cell predictive mean (meters), variance (clamped at zero) and slope
/// magnitude.
#[derive(Debug, Clone)]
pub struct Prediction<S: Real = f64> {
    pub mean: Vec<S>,
    pub variance: Vec<S>,
    pub slope: Vec<S>,
    pub nx: usize,
    pub ny: usize,
}

/// Predict elevation mean and variance for every grid cell. Per-cell work is
/// independent, so results do not depend on the worker count.
pub fn predict<S: Real>(model: &SgpModel<S>, grid: &TestGrid<S>) -> Prediction<S> {
    let m = model.inducing.len();
    let k_star_star = model.params.variance + model.params.noise;
    // Masked cells keep the prior variance and skip the O(M^2) solve; the
    // mean is still evaluated everywhere so slope differences stay smooth
    // across the validity boundary.
    let rows: Vec<(S, S)> = grid
        .inputs
        .par_iter()
        .zip(&grid.valid)
        .map_init(
            || (vec![S::zero(); m], vec![S::zero(); m]),
            |(k_star, v), (x, &valid)| {
                for (k, z) in k_star.iter_mut().zip(&model.inducing) {
                    *k = kernel(&model.params, x, z);
                }
                let mean: S = k_star
                    .iter()
                    .zip(&model.alpha)
                    .map(|(&k, &a)| k * a)
                    .sum::<S>()
                    + model.target_mean;
                if !valid {
                    return (mean, k_star_star);
                }
                linalg::solve_lower_into(m, &model.chol, k_star, v);
                let explained: S = v.iter().map(|&e| e * e).sum();
                let variance = (k_star_star - explained).max(S::zero());
                (mean, variance)
            },
        )
        .collect();
    let mut pred = Prediction {
        mean: Vec::with_capacity(rows.len()),
        variance: Vec::with_capacity(rows.len()),
        slope: vec![S::zero(); rows.len()],
        nx: grid.nx,
        ny: grid.ny,
    };
    for (mean, variance) in rows {
        pred.mean.push(mean);
        pred.variance.push(variance);
    }
    pred
}

/// Slope magnitude sqrt((dz/dx)^2 + (dz/dy)^2) of the predicted mean field,
/// central differences inside, one-sided at the borders.
pub fn slope_field<S: Real>(pred: &Prediction<S>, resolution: S) -> Result<Vec<S>, SgpError> {
    let (nx, ny) = (pred.nx, pred.ny);
    if nx < 2 || ny < 2 {
        return Err(SgpError::GridTooSmall { nx, ny });
    }
    let f = |ix: usize, iy: usize| pred.mean[iy * nx + ix];
    let mut out = vec![S::zero(); nx * ny];
    for iy in 0..ny {
        for ix in 0..nx {
            let dzdx = if ix == 0 {
                (f(1, iy) - f(0, iy)) / resolution
            } else if ix == nx - 1 {
                (f(nx - 1, iy) - f(nx - 2, iy)) / resolution
            } else {
                (f(ix + 1, iy) - f(ix - 1, iy)) / (S::c(2.0) * resolution)
            };
            let dzdy = if iy == 0 {
                (f(ix, 1) - f(ix, 0)) / resolution
            } else if iy == ny - 1 {
                (f(ix, ny - 1) - f(ix, ny - 2)) / resolution
            } else {
                (f(ix, iy + 1) - f(ix, iy - 1)) / (S::c(2.0) * resolution)
            };
            out[iy * nx + ix] = (dzdx * dzdx + dzdy * dzdy).sqrt();
        }
    }
    Ok(out)
}
