//! Terrain traversability mapping from sequential point-cloud scans.
//!
//! The pipeline: extract curvature/gradient features from a scan
//! ([`features`]), regress a continuous elevation surface with a sparse
//! Gaussian process over decorrelated 4-D inputs ([`sgp`]), score each map
//! cell and fuse it with history through a Bayesian Gaussian kernel update
//! ([`travmap`]). [`synthterrain`] generates reproducible test worlds and
//! [`simeval`] runs the benchmark protocol against them.

pub mod cloud;
pub mod features;
pub mod linalg;
pub mod num;
pub mod sgp;
pub mod simeval;
pub mod synthterrain;
pub mod travmap;

pub use num::Real;

/// Default scalar for the pipeline.
pub type Scalar = f64;

pub type Point3 = cloud::Point3<Scalar>;
pub type PointCloud = cloud::PointCloud<Scalar>;
pub type SpatialIndex = cloud::SpatialIndex<Scalar>;
pub type FeatureCloud = features::FeatureCloud<Scalar>;
pub type FeatureParams = features::FeatureParams<Scalar>;
pub type PcaTransform = features::PcaTransform<Scalar>;
pub type KernelParams = sgp::KernelParams<Scalar>;
pub type SgpModel = sgp::SgpModel<Scalar>;
pub type TestGrid = sgp::TestGrid<Scalar>;
pub type Prediction = sgp::Prediction<Scalar>;
pub type TravGrid = travmap::TravGrid<Scalar>;
pub type FusionParams = travmap::FusionParams<Scalar>;
pub type HistoryBuffer = travmap::HistoryBuffer<Scalar>;

/// Single-precision variants, for callers that trade accuracy for memory.
pub type Point3f = cloud::Point3<f32>;
pub type PointCloudf = cloud::PointCloud<f32>;
