//! TOML configuration for pipelines and benchmark manifests. Every field
//! defaults to the library defaults, so an empty file is a valid config;
//! validation errors carry the offending key path.

use serde::{Deserialize, Serialize};
use terra::simeval::{Method, MethodConfig};
use terra::synthterrain::{TerrainKind, TerrainSpec};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub k: usize,
    pub eps: f64,
    pub tau_kappa: f64,
    pub tau_g: f64,
    pub voxel: f64,
    pub max_points: usize,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        let d = terra::FeatureParams::default();
        Self {
            k: d.k,
            eps: d.eps,
            tau_kappa: d.tau_kappa,
            tau_g: d.tau_g,
            voxel: d.voxel,
            max_points: d.max_points,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgpSection {
    pub variance: f64,
    pub lengthscales: [f64; 4],
    pub noise: f64,
    pub jitter: f64,
    pub m_ind: usize,
    pub resolution: f64,
    pub idw_neighbors: usize,
    pub idw_eps: f64,
    pub fit_iters: usize,
}

impl Default for SgpSection {
    fn default() -> Self {
        let d = MethodConfig::default();
        Self {
            variance: d.kernel.variance,
            lengthscales: d.kernel.lengthscales,
            noise: d.kernel.noise,
            jitter: d.kernel.jitter,
            m_ind: d.m_ind,
            resolution: d.resolution,
            idw_neighbors: d.idw_neighbors,
            idw_eps: 1e-6,
            fit_iters: d.fit_iters,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub w_kappa: f64,
    pub w_g: f64,
    pub w_grad: f64,
    pub lambda: f64,
    pub eps: f64,
    pub smooth_radius: usize,
    pub kappa_max: f64,
    pub g_max: f64,
    pub slope_max: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        let d = terra::FusionParams::default();
        Self {
            w_kappa: d.w_kappa,
            w_g: d.w_g,
            w_grad: d.w_grad,
            lambda: d.lambda,
            eps: d.eps,
            smooth_radius: d.smooth_radius,
            kappa_max: d.kappa_max,
            g_max: d.g_max,
            slope_max: d.slope_max,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSection {
    pub radius: f64,
    pub occlusion_frac: f64,
    pub support_radius: f64,
    pub scan_keep: f64,
}

impl Default for SensorSection {
    fn default() -> Self {
        let d = MethodConfig::default();
        Self {
            radius: d.sensor_radius,
            occlusion_frac: d.occlusion_frac,
            support_radius: d.support_radius,
            scan_keep: d.scan_keep,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub features: FeaturesSection,
    pub sgp: SgpSection,
    pub fusion: FusionSection,
    pub sensor: SensorSection,
}

impl PipelineConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let f = &self.features;
        if f.k < 3 {
            return Err(format!("features.k: must be >= 3, got {}", f.k));
        }
        if f.voxel <= 0.0 {
            return Err(format!("features.voxel: must be positive, got {}", f.voxel));
        }
        if f.max_points == 0 {
            return Err("features.max_points: must be >= 1".into());
        }
        let s = &self.sgp;
        if s.variance <= 0.0 {
            return Err(format!("sgp.variance: must be positive, got {}", s.variance));
        }
        for (i, l) in s.lengthscales.iter().enumerate() {
            if *l <= 0.0 {
                return Err(format!("sgp.lengthscales[{i}]: must be positive, got {l}"));
            }
        }
        if s.noise <= 0.0 {
            return Err(format!("sgp.noise: must be positive, got {}", s.noise));
        }
        if s.m_ind == 0 {
            return Err("sgp.m_ind: must be >= 1".into());
        }
        if s.resolution <= 0.0 {
            return Err(format!(
                "sgp.resolution: must be positive, got {}",
                s.resolution
            ));
        }
        if s.idw_neighbors == 0 {
            return Err("sgp.idw_neighbors: must be >= 1".into());
        }
        let u = &self.fusion;
        let wsum = u.w_kappa + u.w_g + u.w_grad;
        if (wsum - 1.0).abs() > 1e-9 || u.w_kappa < 0.0 || u.w_g < 0.0 || u.w_grad < 0.0 {
            return Err(format!(
                "fusion.w_kappa/w_g/w_grad: must be nonnegative and sum to 1, got {wsum}"
            ));
        }
        if u.lambda < 0.0 {
            return Err(format!("fusion.lambda: must be >= 0, got {}", u.lambda));
        }
        if u.kappa_max <= 0.0 || u.g_max <= 0.0 || u.slope_max <= 0.0 {
            return Err("fusion.kappa_max/g_max/slope_max: must be positive".into());
        }
        let n = &self.sensor;
        if n.radius <= 0.0 {
            return Err(format!("sensor.radius: must be positive, got {}", n.radius));
        }
        if !(0.0..=1.0).contains(&n.occlusion_frac) {
            return Err(format!(
                "sensor.occlusion_frac: must be in [0, 1], got {}",
                n.occlusion_frac
            ));
        }
        if n.scan_keep <= 0.0 || n.scan_keep > 1.0 {
            return Err(format!(
                "sensor.scan_keep: must be in (0, 1], got {}",
                n.scan_keep
            ));
        }
        Ok(())
    }

    pub fn method_config(&self, method: Method) -> MethodConfig {
        MethodConfig {
            method,
            feature: terra::FeatureParams {
                k: self.features.k,
                eps: self.features.eps,
                tau_kappa: self.features.tau_kappa,
                tau_g: self.features.tau_g,
                voxel: self.features.voxel,
                max_points: self.features.max_points,
                rng_seed: self.seed,
            },
            kernel: terra::KernelParams {
                variance: self.sgp.variance,
                lengthscales: self.sgp.lengthscales,
                noise: self.sgp.noise,
                jitter: self.sgp.jitter,
            },
            fusion: terra::FusionParams {
                w_kappa: self.fusion.w_kappa,
                w_g: self.fusion.w_g,
                w_grad: self.fusion.w_grad,
                lambda: self.fusion.lambda,
                eps: self.fusion.eps,
                sigma_smooth: 1.5 * self.sgp.resolution,
                smooth_radius: self.fusion.smooth_radius,
                kappa_max: self.fusion.kappa_max,
                g_max: self.fusion.g_max,
                slope_max: self.fusion.slope_max,
            },
            m_ind: self.sgp.m_ind,
            sensor_radius: self.sensor.radius,
            occlusion_frac: self.sensor.occlusion_frac,
            resolution: self.sgp.resolution,
            idw_neighbors: self.sgp.idw_neighbors,
            support_radius: self.sensor.support_radius,
            fit_iters: self.sgp.fit_iters,
            scan_keep: self.sensor.scan_keep,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioEntry {
    pub kind: String,
    pub seed: u64,
    pub extent: f64,
    pub point_density: f64,
    pub obstacle_density: f64,
    pub hill_amplitude: f64,
    pub hill_wavelength: f64,
    pub frames: Option<usize>,
    pub methods: Option<Vec<String>>,
}

impl Default for ScenarioEntry {
    fn default() -> Self {
        let d = TerrainSpec::default();
        Self {
            kind: d.kind.name().to_string(),
            seed: d.seed,
            extent: d.extent,
            point_density: d.point_density,
            obstacle_density: d.obstacle_density,
            hill_amplitude: d.hill_amplitude,
            hill_wavelength: d.hill_wavelength,
            frames: None,
            methods: None,
        }
    }
}

impl ScenarioEntry {
    pub fn terrain_spec(&self, i: usize) -> Result<TerrainSpec, String> {
        let kind = TerrainKind::parse(&self.kind).ok_or_else(|| {
            format!(
                "scenarios[{i}].kind: unknown kind {:?}, valid: hilly, forest, ruin",
                self.kind
            )
        })?;
        let spec = TerrainSpec {
            kind,
            extent: self.extent,
            point_density: self.point_density,
            seed: self.seed,
            obstacle_density: self.obstacle_density,
            hill_amplitude: self.hill_amplitude,
            hill_wavelength: self.hill_wavelength,
        };
        if !spec.is_valid() {
            return Err(format!(
                "scenarios[{i}]: extent/densities/wavelength must be positive"
            ));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchManifest {
    pub frames: usize,
    pub methods: Vec<String>,
    pub pipeline: PipelineConfig,
    pub scenarios: Vec<ScenarioEntry>,
}

impl Default for BenchManifest {
    fn default() -> Self {
        Self {
            frames: 20,
            methods: vec!["sgp-baseline".into(), "fsgp".into(), "fsgp-bgk".into()],
            pipeline: PipelineConfig::default(),
            scenarios: Vec::new(),
        }
    }
}

impl BenchManifest {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let m: Self = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.scenarios.is_empty() {
            return Err("scenarios: at least one scenario required".into());
        }
        if self.frames < 1 {
            return Err("frames: must be >= 1".into());
        }
        self.pipeline.validate().map_err(|e| format!("pipeline.{e}"))?;
        for (i, sc) in self.scenarios.iter().enumerate() {
            sc.terrain_spec(i)?;
            for m in sc.methods.as_ref().unwrap_or(&self.methods) {
                if Method::parse(m).is_none() {
                    return Err(format!(
                        "scenarios[{i}].methods: unknown method {m:?}, valid: \
                         sgp-baseline, fsgp, fsgp-bgk, em, fsgp-accum"
                    ));
                }
            }
        }
        Ok(())
    }
}
