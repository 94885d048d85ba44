//! Procedural terrain worlds for reproducible benchmarks: a smooth hilly
//! base built from seeded sinusoidal octaves, optionally populated with
//! trees (cylinders) or ruins (boxes and cylinders), sampled into a point
//! cloud at a chosen density. A ground-truth traversability oracle scores
//! the dense cloud with the same formula the pipeline uses, but on perfect
//! data. Terrain spans `[-extent/2, extent/2]^2` centered at the origin.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{Point3, PointCloud, SpatialIndex};
use crate::features::{self, FeatureParams};
use crate::travmap::{preliminary_score, FusionParams, TravCell, TravGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerrainKind {
    Hilly,
    Forest,
    Ruin,
}

impl TerrainKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hilly" => Some(Self::Hilly),
            "forest" => Some(Self::Forest),
            "ruin" => Some(Self::Ruin),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Hilly => "hilly",
            Self::Forest => "forest",
            Self::Ruin => "ruin",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TerrainSpec {
    pub kind: TerrainKind,
    /// Square side, meters.
    pub extent: f64,
    /// Ground sampling density, points/m^2.
    pub point_density: f64,
    pub seed: u64,
    /// Obstacles per m^2 (forest/ruin only).
    pub obstacle_density: f64,
    pub hill_amplitude: f64,
    pub hill_wavelength: f64,
}

impl Default for TerrainSpec {
    fn default() -> Self {
        Self {
            kind: TerrainKind::Hilly,
            extent: 20.0,
            point_density: 12.0,
            seed: 0,
            obstacle_density: 0.05,
            hill_amplitude: 1.0,
            hill_wavelength: 8.0,
        }
    }
}

impl TerrainSpec {
    pub fn is_valid(&self) -> bool {
        self.extent > 0.0
            && self.point_density > 0.0
            && self.obstacle_density >= 0.0
            && self.hill_amplitude >= 0.0
            && self.hill_wavelength > 0.0
    }
}

#[derive(Debug, Clone)]
struct Octave {
    amplitude: f64,
    wavelength: f64,
    direction: f64,
    phase: f64,
}

#[derive(Debug, Clone)]
enum Obstacle {
    Cylinder { cx: f64, cy: f64, r: f64, h: f64 },
    Box { cx: f64, cy: f64, hx: f64, hy: f64, h: f64 },
}

impl Obstacle {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Obstacle::Cylinder { cx, cy, r, .. } => {
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
            Obstacle::Box { cx, cy, hx, hy, .. } => {
                (x - cx).abs() <= hx && (y - cy).abs() <= hy
            }
        }
    }

    fn height(&self) -> f64 {
        match *self {
            Obstacle::Cylinder { h, .. } | Obstacle::Box { h, .. } => h,
        }
    }
}

/// Analytic terrain surface: base height field plus obstacle footprints.
#[derive(Debug, Clone)]
pub struct Terrain {
    octaves: Vec<Octave>,
    obstacles: Vec<Obstacle>,
}

impl Terrain {
    pub fn base_height(&self, x: f64, y: f64) -> f64 {
        self.octaves
            .iter()
            .map(|o| {
                let u = x * o.direction.cos() + y * o.direction.sin();
                o.amplitude * (TAU * u / o.wavelength + o.phase).sin()
            })
            .sum()
    }

    /// Surface height including obstacle tops.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let base = self.base_height(x, y);
        let mut h = base;
        for ob in &self.obstacles {
            if ob.contains(x, y) {
                h = h.max(base + ob.height());
            }
        }
        h
    }

    pub fn num_obstacles(&self) -> usize {
        self.obstacles.len()
    }
}

/// Ground-truth product: analytic surface, elevation and oracle grids
/// (elevations/scores stored in the cell `score` field), and provenance.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub terrain: Terrain,
    pub elevation: TravGrid,
    pub oracle: TravGrid,
    pub spec: TerrainSpec,
}

fn poisson_count(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    // Knuth's multiplication method; fine for the small rates used here.
    let l = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

fn build_octaves(spec: &TerrainSpec, rng: &mut ChaCha8Rng) -> Vec<Octave> {
    let n = rng.gen_range(4..=8);
    let mut octaves: Vec<Octave> = (0..n)
        .map(|_| Octave {
            amplitude: rng.gen_range(0.3..1.0),
            wavelength: rng.gen_range(spec.hill_wavelength / 4.0..=spec.hill_wavelength),
            direction: rng.gen_range(0.0..PI),
            phase: rng.gen_range(0.0..TAU),
        })
        .collect();
    let total: f64 = octaves.iter().map(|o| o.amplitude).sum();
    // scale so the octave amplitudes sum to hill_amplitude
    let scale = if total > 0.0 {
        spec.hill_amplitude / total
    } else {
        0.0
    };
    for o in &mut octaves {
        o.amplitude *= scale;
    }
    octaves
}

fn build_obstacles(spec: &TerrainSpec, rng: &mut ChaCha8Rng) -> Vec<Obstacle> {
    if spec.kind == TerrainKind::Hilly {
        return Vec::new();
    }
    let count = poisson_count(rng, spec.obstacle_density * spec.extent * spec.extent);
    let half = spec.extent / 2.0;
    (0..count)
        .map(|_| {
            let boxy = spec.kind == TerrainKind::Ruin && rng.gen_bool(0.5);
            if boxy {
                let hx = rng.gen_range(0.25..1.0);
                let hy = rng.gen_range(0.25..1.0);
                Obstacle::Box {
                    cx: rng.gen_range(-half + 1.0..half - 1.0),
                    cy: rng.gen_range(-half + 1.0..half - 1.0),
                    hx,
                    hy,
                    h: rng.gen_range(0.5..2.0),
                }
            } else {
                Obstacle::Cylinder {
                    cx: rng.gen_range(-half + 1.0..half - 1.0),
                    cy: rng.gen_range(-half + 1.0..half - 1.0),
                    r: rng.gen_range(0.15..0.4),
                    h: rng.gen_range(1.0..2.0),
                }
            }
        })
        .collect()
}

fn sample_cloud(spec: &TerrainSpec, terrain: &Terrain, rng: &mut ChaCha8Rng) -> PointCloud {
    let spacing = 1.0 / spec.point_density.sqrt();
    let half = spec.extent / 2.0;
    let n = (spec.extent / spacing).round() as usize;
    let mut points = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            let jx = rng.gen_range(-0.5..0.5) * spacing;
            let jy = rng.gen_range(-0.5..0.5) * spacing;
            let x = (-half + (ix as f64 + 0.5) * spacing + jx).clamp(-half, half);
            let y = (-half + (iy as f64 + 0.5) * spacing + jy).clamp(-half, half);
            points.push(Point3::new(x, y, terrain.base_height(x, y)));
        }
    }
    for ob in &terrain.obstacles {
        match *ob {
            Obstacle::Cylinder { cx, cy, r, h } => {
                let base = terrain.base_height(cx, cy);
                let area = TAU * r * h;
                let count = (area * spec.point_density).ceil() as usize;
                for _ in 0..count {
                    let a = rng.gen_range(0.0..TAU);
                    let z = rng.gen_range(0.0..h);
                    // surface roughness so trunks read as unstructured
                    let noise = 0.05;
                    points.push(Point3::new(
                        cx + r * a.cos() + rng.gen_range(-noise..noise),
                        cy + r * a.sin() + rng.gen_range(-noise..noise),
                        base + z + rng.gen_range(-noise..noise),
                    ));
                }
            }
            Obstacle::Box { cx, cy, hx, hy, h } => {
                let base = terrain.base_height(cx, cy);
                // four side faces; tops stay unsampled (sensor sees walls)
                for face in 0..4 {
                    let width = if face < 2 { 2.0 * hx } else { 2.0 * hy };
                    let count = (width * h * spec.point_density).ceil() as usize;
                    for _ in 0..count {
                        let u = rng.gen_range(-0.5..0.5) * width;
                        let z = base + rng.gen_range(0.0..h);
                        let noise = 0.05;
                        let (x, y) = match face {
                            0 => (cx + u, cy - hy),
                            1 => (cx + u, cy + hy),
                            2 => (cx - hx, cy + u),
                            _ => (cx + hx, cy + u),
                        };
                        points.push(Point3::new(
                            x + rng.gen_range(-noise..noise),
                            y + rng.gen_range(-noise..noise),
                            z + rng.gen_range(-noise..noise),
                        ));
                    }
                }
            }
        }
    }
    PointCloud::new(points)
}

/// Default cell size for ground-truth grids.
pub const GT_RESOLUTION: f64 = 0.2;

/// Build a seeded world: sampled cloud plus ground truth (analytic surface,
/// elevation grid, oracle traversability map).
pub fn generate_terrain(spec: &TerrainSpec) -> (PointCloud, GroundTruth) {
    assert!(spec.is_valid(), "invalid terrain spec");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let terrain = Terrain {
        octaves: build_octaves(spec, &mut rng),
        obstacles: build_obstacles(spec, &mut rng),
    };
    let cloud = sample_cloud(spec, &terrain, &mut rng);
    let half = spec.extent / 2.0;
    let bounds = (-half, -half, half, half);
    let params = FusionParams::for_resolution(GT_RESOLUTION);
    let oracle = ground_truth_map(&cloud, bounds, GT_RESOLUTION, &params)
        .expect("dense synthetic cloud scores cleanly");
    let mut elevation = TravGrid::unobserved(-half, -half, GT_RESOLUTION, oracle.nx, oracle.ny);
    for iy in 0..elevation.ny {
        for ix in 0..elevation.nx {
            let (cx, cy) = elevation.cell_center(ix, iy);
            elevation.cells[iy * elevation.nx + ix] = TravCell {
                score: terrain.height(cx, cy),
                variance: 0.0,
                timestamp: 0.0,
                observed: true,
            };
        }
    }
    let gt = GroundTruth {
        terrain,
        elevation,
        oracle,
        spec: spec.clone(),
    };
    (cloud, gt)
}

/// Score every cell of a dense, un-occluded cloud: curvature and gradient
/// from exact k-nearest neighborhoods, aggregated per cell as the
/// worst-case (max) over the cell's points so thin obstacles are not
/// averaged away; slope by finite differences on the per-cell mean height
/// field; combined with the standard weights. Cells without points borrow
/// the nearest point's features.
pub fn ground_truth_map(
    cloud: &PointCloud,
    bounds: (f64, f64, f64, f64),
    resolution: f64,
    params: &FusionParams,
) -> Result<TravGrid, features::FeatureError> {
    let (xmin, ymin, xmax, ymax) = bounds;
    let nx = ((xmax - xmin) / resolution).round().max(1.0) as usize;
    let ny = ((ymax - ymin) / resolution).round().max(1.0) as usize;
    let index = SpatialIndex::build(&cloud.points).expect("non-empty finite cloud");
    let fp = FeatureParams::default();
    let feats = if cloud.len() >= 2 {
        features::compute_point_features(cloud, &index, fp.k.min(cloud.len()), fp.eps)?
    } else {
        vec![(0.0, 0.0); cloud.len()]
    };

    // per-cell mean height, worst-case kappa and gradient
    let ncells = nx * ny;
    let mut sum_z = vec![0.0f64; ncells];
    let mut max_k = vec![0.0f64; ncells];
    let mut max_g = vec![0.0f64; ncells];
    let mut count = vec![0usize; ncells];
    for (p, &(kappa, grad)) in cloud.points.iter().zip(&feats) {
        let ix = ((p.x - xmin) / resolution).floor();
        let iy = ((p.y - ymin) / resolution).floor();
        if ix < 0.0 || iy < 0.0 || ix >= nx as f64 || iy >= ny as f64 {
            continue;
        }
        let idx = iy as usize * nx + ix as usize;
        sum_z[idx] += p.z;
        max_k[idx] = max_k[idx].max(kappa);
        max_g[idx] = max_g[idx].max(grad);
        count[idx] += 1;
    }
    let mut height = vec![0.0f64; ncells];
    let mut kappa = vec![0.0f64; ncells];
    let mut grad = vec![0.0f64; ncells];
    for iy in 0..ny {
        for ix in 0..nx {
            let idx = iy * nx + ix;
            if count[idx] > 0 {
                let n = count[idx] as f64;
                height[idx] = sum_z[idx] / n;
                kappa[idx] = max_k[idx];
                grad[idx] = max_g[idx];
            } else {
                let cx = xmin + (ix as f64 + 0.5) * resolution;
                let cy = ymin + (iy as f64 + 0.5) * resolution;
                let (j, _) = index.knn(&Point3::new(cx, cy, 0.0), 1)[0];
                height[idx] = cloud.points[j].z;
                kappa[idx] = feats[j].0;
                grad[idx] = feats[j].1;
            }
        }
    }

    let mut out = TravGrid::unobserved(xmin, ymin, resolution, nx, ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let idx = iy * nx + ix;
            // central differences inside, one-sided at borders
            let (xl, xr, dx) = if ix == 0 {
                (idx, idx + 1, resolution)
            } else if ix == nx - 1 {
                (idx - 1, idx, resolution)
            } else {
                (idx - 1, idx + 1, 2.0 * resolution)
            };
            let (yl, yr, dy) = if iy == 0 {
                (idx, idx + nx, resolution)
            } else if iy == ny - 1 {
                (idx - nx, idx, resolution)
            } else {
                (idx - nx, idx + nx, 2.0 * resolution)
            };
            let gx = (height[xr] - height[xl]) / dx;
            let gy = (height[yr] - height[yl]) / dy;
            let slope = (gx * gx + gy * gy).sqrt();
            out.cells[idx] = TravCell {
                score: preliminary_score(kappa[idx], grad[idx], slope, params),
                variance: 0.0,
                timestamp: 0.0,
                observed: true,
            };
        }
    }
    Ok(out)
}

/// A timestamped 2-D pose along the survey path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub t: f64,
}

/// Fixed spacing between trajectory samples, seconds.
pub const TRAJECTORY_DT: f64 = 0.5;

/// Lawnmower sweep over the extent, inset 1 m from the bounds, with `n_poses`
/// samples spaced evenly by arclength at a fixed 0.5 s timestep.
pub fn make_trajectory(spec: &TerrainSpec, n_poses: usize) -> Vec<Pose> {
    assert!(n_poses >= 2, "need at least 2 poses");
    let half = spec.extent / 2.0;
    let inset = 1.0;
    let (lo, hi) = (-half + inset, half - inset);
    let rows = 5usize; // odd so the sweep ends at the opposite corner
    let mut waypoints = Vec::new();
    for j in 0..rows {
        let y = lo + (hi - lo) * j as f64 / (rows - 1) as f64;
        let (x0, x1) = if j % 2 == 0 { (lo, hi) } else { (hi, lo) };
        waypoints.push((x0, y));
        waypoints.push((x1, y));
    }
    let seg_len: Vec<f64> = waypoints
        .windows(2)
        .map(|w| {
            let (ax, ay) = w[0];
            let (bx, by) = w[1];
            ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt()
        })
        .collect();
    let total: f64 = seg_len.iter().sum();
    (0..n_poses)
        .map(|i| {
            let s = total * i as f64 / (n_poses - 1) as f64;
            let mut acc = 0.0;
            let mut seg = seg_len.len() - 1;
            let mut frac = 1.0;
            for (k, &l) in seg_len.iter().enumerate() {
                if s <= acc + l || k == seg_len.len() - 1 {
                    seg = k;
                    frac = if l > 0.0 { ((s - acc) / l).clamp(0.0, 1.0) } else { 0.0 };
                    break;
                }
                acc += l;
            }
            let (ax, ay) = waypoints[seg];
            let (bx, by) = waypoints[seg + 1];
            Pose {
                x: ax + (bx - ax) * frac,
                y: ay + (by - ay) * frac,
                heading: (by - ay).atan2(bx - ax),
                t: i as f64 * TRAJECTORY_DT,
            }
        })
        .collect()
}

/// Write a trajectory as CSV `x,y,heading,t`.
pub fn save_trajectory(poses: &[Pose], path: &std::path::Path) -> std::io::Result<()> {
    let mut out = String::from("x,y,heading,t\n");
    for p in poses {
        out.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.heading, p.t));
    }
    std::fs::write(path, out)
}

/// Read a trajectory written by [`save_trajectory`].
pub fn load_trajectory(path: &std::path::Path) -> std::io::Result<Vec<Pose>> {
    let bad = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
    let text = std::fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        if v.len() != 4 {
            return Err(bad(format!("line {}: expected 4 fields", i + 1)));
        }
        poses.push(Pose {
            x: v[0],
            y: v[1],
            heading: v[2],
            t: v[3],
        });
    }
    Ok(poses)
}
