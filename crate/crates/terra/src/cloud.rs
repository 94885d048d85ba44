//! Point-cloud container, file I/O, kd-tree nearest-neighbor search, voxel
//! downsampling and radius cropping.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::num::Real;

#[derive(Debug, thiserror::Error)]
pub enum CloudError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("non-finite coordinate in {path} at line {line}")]
    NonFinite { path: String, line: usize },
    #[error("binary cloud {path} has {len} bytes, not a multiple of 12")]
    BadLength { path: String, len: usize },
    #[error("operation requires a non-empty cloud")]
    EmptyCloud,
    #[error("voxel size must be positive, got {0}")]
    NonPositiveVoxel(f64),
}

/// A 3-D point in a gravity-aligned world frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3<S: Real = f64> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Real> Point3<S> {
    pub fn new(x: S, y: S, z: S) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dist(&self, other: &Self) -> S {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(&self, other: &Self) -> S {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    /// Horizontal (xy-plane) distance.
    pub fn dist_xy(&self, other: &Self) -> S {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }

    fn axis(&self, a: usize) -> S {
        match a {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

/// Ordered point set plus frame metadata.
#[derive(Debug, Clone, Default)]
pub struct PointCloud<S: Real = f64> {
    pub points: Vec<Point3<S>>,
    pub frame_id: String,
    /// Seconds, monotonic, >= 0.
    pub timestamp: f64,
}

impl<S: Real> PointCloud<S> {
    pub fn new(points: Vec<Point3<S>>) -> Self {
        Self {
            points,
            frame_id: String::new(),
            timestamp: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// On-disk cloud encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    /// One `x y z` ASCII record per line, `#` comments ignored.
    XyzText,
    /// Headerless little-endian f32 triples, 12 bytes per point.
    BinaryF32,
}

impl CloudFormat {
    /// Guess from the file extension, defaulting to text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("p3b") => CloudFormat::BinaryF32,
            _ => CloudFormat::XyzText,
        }
    }
}

pub fn load_cloud<S: Real>(path: &Path, format: CloudFormat) -> Result<PointCloud<S>, CloudError> {
    let pstr = path.display().to_string();
    let io_err = |source| CloudError::Io {
        path: pstr.clone(),
        source,
    };
    let mut points = Vec::new();
    match format {
        CloudFormat::XyzText => {
            let text = fs::read_to_string(path).map_err(io_err)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let mut it = line.split_whitespace();
                let mut coord = |name: &str| -> Result<S, CloudError> {
                    let tok = it.next().ok_or_else(|| CloudError::Parse {
                        path: pstr.clone(),
                        line: lineno + 1,
                        msg: format!("missing {name} coordinate"),
                    })?;
                    let v: f64 = tok.parse().map_err(|e| CloudError::Parse {
                        path: pstr.clone(),
                        line: lineno + 1,
                        msg: format!("bad {name} value {tok:?}: {e}"),
                    })?;
                    Ok(S::c(v))
                };
                let p = Point3::new(coord("x")?, coord("y")?, coord("z")?);
                if !p.is_finite() {
                    return Err(CloudError::NonFinite {
                        path: pstr,
                        line: lineno + 1,
                    });
                }
                points.push(p);
            }
        }
        CloudFormat::BinaryF32 => {
            let bytes = fs::read(path).map_err(io_err)?;
            if bytes.len() % 12 != 0 {
                return Err(CloudError::BadLength {
                    path: pstr,
                    len: bytes.len(),
                });
            }
            for (i, rec) in bytes.chunks_exact(12).enumerate() {
                let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
                let p = Point3::new(
                    S::c(f(0) as f64),
                    S::c(f(4) as f64),
                    S::c(f(8) as f64),
                );
                if !p.is_finite() {
                    return Err(CloudError::NonFinite {
                        path: pstr,
                        line: i + 1,
                    });
                }
                points.push(p);
            }
        }
    }
    Ok(PointCloud::new(points))
}

pub fn save_cloud<S: Real>(
    cloud: &PointCloud<S>,
    path: &Path,
    format: CloudFormat,
) -> Result<(), CloudError> {
    let pstr = path.display().to_string();
    let io_err = |source| CloudError::Io {
        path: pstr.clone(),
        source,
    };
    let mut out: Vec<u8> = Vec::new();
    match format {
        CloudFormat::XyzText => {
            for p in &cloud.points {
                writeln!(out, "{} {} {}", p.x, p.y, p.z).expect("write to vec");
            }
        }
        CloudFormat::BinaryF32 => {
            for p in &cloud.points {
                for v in [p.x, p.y, p.z] {
                    out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out).map_err(io_err)
}

#[derive(Debug, Clone, Copy)]
struct Node {
    /// Index into the owning cloud.
    id: u32,
    axis: u8,
    left: u32,
    right: u32,
}

const NIL: u32 = u32::MAX;

/// Balanced kd-tree over the xyz coordinates of one cloud. Immutable after
/// build; safe for concurrent queries.
#[derive(Debug, Clone)]
pub struct SpatialIndex<S: Real = f64> {
    nodes: Vec<Node>,
    root: u32,
    points: Vec<Point3<S>>,
}

/// Build a kd-tree over the cloud. Errors on an empty cloud.
pub fn build_index<S: Real>(cloud: &PointCloud<S>) -> Result<SpatialIndex<S>, CloudError> {
    SpatialIndex::build(&cloud.points)
}

impl<S: Real> SpatialIndex<S> {
    pub fn build(points: &[Point3<S>]) -> Result<Self, CloudError> {
        if points.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        let mut ids: Vec<u32> = (0..points.len() as u32).collect();
        let mut index = SpatialIndex {
            nodes: Vec::with_capacity(points.len()),
            root: NIL,
            points: points.to_vec(),
        };
        index.root = index.build_rec(&mut ids, 0);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> Point3<S> {
        self.points[id]
    }

    fn build_rec(&mut self, ids: &mut [u32], depth: usize) -> u32 {
        if ids.is_empty() {
            return NIL;
        }
        let axis = depth % 3;
        let mid = ids.len() / 2;
        let pts = &self.points;
        // Ties broken by id so the tree layout is input-order deterministic.
        ids.select_nth_unstable_by(mid, |&a, &b| {
            pts[a as usize]
                .axis(axis)
                .partial_cmp(&pts[b as usize].axis(axis))
                .unwrap()
                .then(a.cmp(&b))
        });
        let id = ids[mid];
        let slot = self.nodes.len() as u32;
        self.nodes.push(Node {
            id,
            axis: axis as u8,
            left: NIL,
            right: NIL,
        });
        let (lo, hi) = ids.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut hi[1..], depth + 1);
        self.nodes[slot as usize].left = left;
        self.nodes[slot as usize].right = right;
        slot
    }

    /// The `min(k, n)` nearest neighbors of `query`, as `(point id, distance)`
    /// sorted by ascending distance, ties by lower id.
    pub fn knn(&self, query: &Point3<S>, k: usize) -> Vec<(usize, S)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(S, u32)> = Vec::with_capacity(k + 1);
        self.knn_rec(self.root, query, k, &mut best);
        best.into_iter()
            .map(|(d2, id)| (id as usize, d2.sqrt()))
            .collect()
    }

    fn knn_rec(&self, node: u32, query: &Point3<S>, k: usize, best: &mut Vec<(S, u32)>) {
        if node == NIL {
            return;
        }
        let n = self.nodes[node as usize];
        let p = self.points[n.id as usize];
        let d2 = p.dist_sq(query);
        let cand = (d2, n.id);
        if best.len() < k || cand < best[best.len() - 1] {
            let pos = best.partition_point(|&e| e < cand);
            best.insert(pos, cand);
            if best.len() > k {
                best.pop();
            }
        }
        let axis = n.axis as usize;
        let delta = query.axis(axis) - p.axis(axis);
        let (near, far) = if delta < S::zero() {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.knn_rec(near, query, k, best);
        // The far side can only hold a closer point (or an equal-distance one
        // with a lower id) if the splitting plane is within the current worst.
        if best.len() < k || delta * delta <= best[best.len() - 1].0 {
            self.knn_rec(far, query, k, best);
        }
    }
}

/// Short-hand for [`SpatialIndex::knn`].
pub fn knn<S: Real>(index: &SpatialIndex<S>, query: &Point3<S>, k: usize) -> Vec<(usize, S)> {
    index.knn(query, k)
}

fn voxel_key<S: Real>(p: &Point3<S>, v: S) -> (i64, i64, i64) {
    let f = |c: S| (c / v).floor().f64() as i64;
    (f(p.x), f(p.y), f(p.z))
}

/// Indices of the retained point per occupied voxel, in ascending voxel-key
/// order. Each voxel keeps the point nearest its occupants' centroid, ties by
/// lowest input index.
pub fn voxel_representatives<S: Real>(
    points: &[Point3<S>],
    v: S,
) -> Result<Vec<usize>, CloudError> {
    if v <= S::zero() {
        return Err(CloudError::NonPositiveVoxel(v.f64()));
    }
    let mut voxels: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        voxels.entry(voxel_key(p, v)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(voxels.len());
    for (_, members) in voxels {
        let n = S::c(members.len() as f64);
        let mut cx = S::zero();
        let mut cy = S::zero();
        let mut cz = S::zero();
        for &i in &members {
            cx = cx + points[i].x;
            cy = cy + points[i].y;
            cz = cz + points[i].z;
        }
        let centroid = Point3::new(cx / n, cy / n, cz / n);
        let mut keep = members[0];
        let mut keep_d2 = points[keep].dist_sq(&centroid);
        for &i in &members[1..] {
            let d2 = points[i].dist_sq(&centroid);
            if d2 < keep_d2 {
                keep = i;
                keep_d2 = d2;
            }
        }
        out.push(keep);
    }
    Ok(out)
}

/// One point per occupied voxel of edge length `v`.
pub fn voxel_downsample<S: Real>(cloud: &PointCloud<S>, v: S) -> Result<PointCloud<S>, CloudError> {
    let reps = voxel_representatives(&cloud.points, v)?;
    let mut out = PointCloud::new(reps.into_iter().map(|i| cloud.points[i]).collect());
    out.frame_id = cloud.frame_id.clone();
    out.timestamp = cloud.timestamp;
    Ok(out)
}

/// Points within horizontal (xy) distance `radius` of `center`, input order
/// preserved. Vertical range is unbounded.
pub fn crop_radius<S: Real>(cloud: &PointCloud<S>, center: &Point3<S>, radius: S) -> PointCloud<S> {
    let mut out = PointCloud::new(
        cloud
            .points
            .iter()
            .filter(|p| p.dist_xy(center) <= radius)
            .copied()
            .collect(),
    );
    out.frame_id = cloud.frame_id.clone();
    out.timestamp = cloud.timestamp;
    out
}
