//! `terra`: generate synthetic terrains, run traversability pipelines,
//! benchmark competing methods, and export heatmaps.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{BenchManifest, PipelineConfig};
use terra::cloud::{self, CloudFormat};
use terra::simeval::{self, Method};
use terra::synthterrain::{self, TerrainKind, TerrainSpec};
use terra::travmap::{pgm16_bytes, score_heatmap, TgridFile};
use terra::TravGrid;

#[derive(Parser)]
#[command(name = "terra", version, about = "Terrain traversability mapping toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a terrain: point cloud, ground truth, trajectory.
    Gen {
        /// Terrain kind: hilly, forest, ruin.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        extent: f64,
        /// Ground sampling density, points/m^2.
        #[arg(long, default_value_t = 12.0)]
        density: f64,
        #[arg(long, default_value_t = 0.05)]
        obstacle_density: f64,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 8.0)]
        wavelength: f64,
        /// Trajectory pose count.
        #[arg(long, default_value_t = 20)]
        frames: usize,
    },
    /// Run one method over a generated terrain directory.
    Run {
        /// Pipeline config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory produced by `gen`.
        #[arg(long)]
        terrain: PathBuf,
        /// sgp-baseline, fsgp, fsgp-bgk, em, fsgp-accum.
        #[arg(long, default_value = "fsgp-bgk")]
        method: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a benchmark manifest: scenarios x methods.
    Bench {
        /// Manifest file (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parallel scenario workers; default = all cores.
        #[arg(long)]
        jobs: Option<usize>,
        /// Override the manifest pipeline seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export a grid-file layer as a 16-bit PGM heatmap.
    Export {
        /// Input .tgrid file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "score")]
        layer: String,
        /// Output .pgm path; a .mask.pgm sidecar marks observed cells.
        #[arg(long)]
        out: PathBuf,
    },
}

struct CmdError {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> CmdError {
    CmdError {
        code: 1,
        msg: msg.into(),
    }
}

fn runtime(msg: impl Into<String>) -> CmdError {
    CmdError {
        code: 2,
        msg: msg.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TERRA_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8, CmdError> {
    match cli.cmd {
        Cmd::Gen {
            kind,
            seed,
            out,
            extent,
            density,
            obstacle_density,
            amplitude,
            wavelength,
            frames,
        } => {
            let kind = TerrainKind::parse(&kind).ok_or_else(|| {
                usage(format!("unknown kind {kind:?}, valid: hilly, forest, ruin"))
            })?;
            let spec = TerrainSpec {
                kind,
                extent,
                point_density: density,
                seed,
                obstacle_density,
                hill_amplitude: amplitude,
                hill_wavelength: wavelength,
            };
            if !spec.is_valid() {
                return Err(usage("extent, density and wavelength must be positive"));
            }
            cmd_gen(&spec, frames, &out)?;
            Ok(0)
        }
        Cmd::Run {
            config,
            terrain,
            method,
            out,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p).map_err(usage)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let method = Method::parse(&method).ok_or_else(|| {
                usage(format!(
                    "unknown method {method:?}, valid: sgp-baseline, fsgp, fsgp-bgk, em, fsgp-accum"
                ))
            })?;
            cmd_run(&cfg, method, &terrain, &out)?;
            Ok(0)
        }
        Cmd::Bench {
            config,
            out,
            jobs,
            seed,
        } => {
            let mut manifest = BenchManifest::load(&config).map_err(usage)?;
            if let Some(s) = seed {
                manifest.pipeline.seed = s;
            }
            cmd_bench(&manifest, &out, jobs)
        }
        Cmd::Export { input, layer, out } => {
            cmd_export(&input, &layer, &out)?;
            Ok(0)
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CmdError> {
    std::fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn cmd_gen(spec: &TerrainSpec, frames: usize, out: &Path) -> Result<(), CmdError> {
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    log::info!("generating {} terrain, seed {}", spec.kind.name(), spec.seed);
    let (cloud, gt) = synthterrain::generate_terrain(spec);
    cloud::save_cloud(&cloud, &out.join("cloud.p3b"), CloudFormat::BinaryF32)
        .map_err(|e| runtime(e.to_string()))?;
    gt.oracle
        .to_file()
        .write(&out.join("gt.tgrid"))
        .map_err(|e| runtime(e.to_string()))?;
    gt.elevation
        .to_file()
        .write(&out.join("elevation.tgrid"))
        .map_err(|e| runtime(e.to_string()))?;
    let poses = synthterrain::make_trajectory(spec, frames);
    synthterrain::save_trajectory(&poses, &out.join("traj.csv"))
        .map_err(|e| runtime(e.to_string()))?;
    println!(
        "wrote {} points, {}x{} ground truth, {} poses to {}",
        cloud.len(),
        gt.oracle.nx,
        gt.oracle.ny,
        poses.len(),
        out.display()
    );
    Ok(())
}

fn cmd_run(
    cfg: &PipelineConfig,
    method: Method,
    terrain: &Path,
    out: &Path,
) -> Result<(), CmdError> {
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let cloud_path = terrain.join("cloud.p3b");
    let cloud = cloud::load_cloud(&cloud_path, CloudFormat::from_path(&cloud_path))
        .map_err(|e| runtime(e.to_string()))?;
    let gt_file = TgridFile::read(&terrain.join("gt.tgrid")).map_err(|e| runtime(e.to_string()))?;
    let oracle = TravGrid::from_file(&gt_file).map_err(|e| runtime(e.to_string()))?;
    let poses = synthterrain::load_trajectory(&terrain.join("traj.csv"))
        .map_err(|e| runtime(format!("traj.csv: {e}")))?;
    let mcfg = cfg.method_config(method);
    let frames = simeval::make_frames(&cloud, &poses, &mcfg);
    log::info!("running {} over {} frames", method.name(), frames.len());
    let (maps, report) =
        simeval::run_method(&mcfg, &frames, &oracle).map_err(|e| runtime(e.to_string()))?;
    for (i, map) in maps.iter().enumerate() {
        map.to_file()
            .write(&out.join(format!("map_{i:03}.tgrid")))
            .map_err(|e| runtime(e.to_string()))?;
    }
    if let Some(last) = maps.last() {
        let (pgm, mask) = score_heatmap(last);
        write_file(&out.join("heatmap.pgm"), &pgm)?;
        let mask_gray: Vec<u16> = mask.iter().map(|&m| if m { 65535 } else { 0 }).collect();
        write_file(
            &out.join("heatmap.mask.pgm"),
            &pgm16_bytes(last.nx, last.ny, &mask_gray),
        )?;
    }
    simeval::write_report(&report, &out.join("report.csv"))
        .map_err(|e| runtime(e.to_string()))?;
    let (m, v, t) = report.aggregates();
    println!(
        "{}: {} frames, mean error {m:.4}, variance {v:.6}, {t:.1} ms/frame",
        method.name(),
        report.rows.len()
    );
    Ok(())
}

struct PairResult {
    kind: String,
    method: String,
    seed: u64,
    aggregates: (f64, f64, f64),
}

fn cmd_bench(manifest: &BenchManifest, out: &Path, jobs: Option<usize>) -> Result<u8, CmdError> {
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let run_all = || -> (Vec<PairResult>, Vec<String>, usize) {
        use rayon::prelude::*;
        let per_scenario: Vec<(Vec<PairResult>, Vec<String>, usize)> = manifest
            .scenarios
            .par_iter()
            .enumerate()
            .map(|(i, sc)| run_scenario(manifest, i, sc, out))
            .collect();
        let mut oks = Vec::new();
        let mut fails = Vec::new();
        let mut total = 0;
        for (o, f, t) in per_scenario {
            oks.extend(o);
            fails.extend(f);
            total += t;
        }
        (oks, fails, total)
    };
    let (oks, fails, total) = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| runtime(e.to_string()))?
            .install(run_all),
        None => run_all(),
    };

    // aggregate by (kind, method): mean of per-scenario aggregates
    let mut groups: BTreeMap<(String, String), Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in &oks {
        groups
            .entry((r.kind.clone(), r.method.clone()))
            .or_default()
            .push(r.aggregates);
    }
    let mut agg = String::from("kind,method,scenarios,mean_error,error_variance,runtime_ms\n");
    for ((kind, method), vals) in &groups {
        let n = vals.len() as f64;
        let (m, v, t) = vals.iter().fold((0.0, 0.0, 0.0), |a, x| {
            (a.0 + x.0 / n, a.1 + x.1 / n, a.2 + x.2 / n)
        });
        agg.push_str(&format!("{kind},{method},{},{m},{v},{t}\n", vals.len()));
    }
    write_file(&out.join("aggregate.csv"), agg.as_bytes())?;
    print!("{agg}");
    print_ordering_rates(&oks);

    for f in &fails {
        eprintln!("failed: {f}");
    }
    if fails.is_empty() {
        Ok(0)
    } else if fails.len() < total {
        Ok(3)
    } else {
        Err(runtime("all benchmark pairs failed"))
    }
}

fn run_scenario(
    manifest: &BenchManifest,
    i: usize,
    sc: &config::ScenarioEntry,
    out: &Path,
) -> (Vec<PairResult>, Vec<String>, usize) {
    let methods = sc.methods.as_ref().unwrap_or(&manifest.methods);
    let mut oks = Vec::new();
    let mut fails = Vec::new();
    let spec = match sc.terrain_spec(i) {
        Ok(s) => s,
        Err(e) => {
            return (oks, vec![e], methods.len());
        }
    };
    let (cloud, gt) = synthterrain::generate_terrain(&spec);
    let poses = synthterrain::make_trajectory(&spec, sc.frames.unwrap_or(manifest.frames));
    let base_cfg = manifest.pipeline.method_config(Method::FsgpBgk);
    let frames = simeval::make_frames(&cloud, &poses, &base_cfg);
    for mname in methods {
        let method = Method::parse(mname).expect("validated at load");
        let cfg = base_cfg.with_method(method);
        let tag = format!("{}-s{}-{}", spec.kind.name(), spec.seed, mname);
        match simeval::run_method(&cfg, &frames, &gt.oracle) {
            Ok((_, report)) => {
                if let Err(e) = simeval::write_report(&report, &out.join(format!("{tag}.csv"))) {
                    fails.push(format!("{tag}: {e}"));
                    continue;
                }
                oks.push(PairResult {
                    kind: spec.kind.name().to_string(),
                    method: mname.clone(),
                    seed: spec.seed,
                    aggregates: report.aggregates(),
                });
            }
            Err(e) => fails.push(format!("{tag}: {e}")),
        }
    }
    (oks, fails, methods.len())
}

/// When a scenario ran sgp-baseline, fsgp and fsgp-bgk, report how often the
/// expected error ordering held.
fn print_ordering_rates(oks: &[PairResult]) {
    let mut per_scenario: BTreeMap<(String, u64), BTreeMap<String, f64>> = BTreeMap::new();
    for r in oks {
        per_scenario
            .entry((r.kind.clone(), r.seed))
            .or_default()
            .insert(r.method.clone(), r.aggregates.0);
    }
    let mut held = 0usize;
    let mut total = 0usize;
    for methods in per_scenario.values() {
        let (Some(&sgp), Some(&fsgp), Some(&bgk)) = (
            methods.get("sgp-baseline"),
            methods.get("fsgp"),
            methods.get("fsgp-bgk"),
        ) else {
            continue;
        };
        total += 1;
        if bgk < fsgp && fsgp <= 1.05 * sgp {
            held += 1;
        }
    }
    if total > 0 {
        println!(
            "ordering fsgp-bgk < fsgp <= 1.05*sgp-baseline held on {held}/{total} scenarios"
        );
    }
}

fn cmd_export(input: &Path, layer: &str, out: &Path) -> Result<(), CmdError> {
    let file = TgridFile::read(input).map_err(|e| runtime(e.to_string()))?;
    let values = file.layer(layer).map_err(|e| runtime(e.to_string()))?.to_vec();
    let observed: Vec<bool> = match file.layer("observed") {
        Ok(obs) => obs.iter().map(|&v| v != 0.0).collect(),
        Err(_) => vec![true; values.len()],
    };
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (v, &o) in values.iter().zip(&observed) {
        if o && v.is_finite() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !lo.is_finite() {
        return Err(runtime(format!("layer {layer:?} has no observed values")));
    }
    let range = (hi - lo).max(0.0);
    // low values white, high values black; unobserved mid-gray
    let mut gray = Vec::with_capacity(values.len());
    let mut mask = Vec::with_capacity(values.len());
    for iy in (0..file.ny).rev() {
        for ix in 0..file.nx {
            let idx = iy * file.nx + ix;
            if observed[idx] && values[idx].is_finite() {
                let norm = if range > 0.0 {
                    (values[idx] - lo) / range
                } else {
                    0.0
                };
                gray.push(((1.0 - norm as f64) * 65535.0).round() as u16);
                mask.push(65535u16);
            } else {
                gray.push(32768);
                mask.push(0);
            }
        }
    }
    write_file(out, &pgm16_bytes(file.nx, file.ny, &gray))?;
    let mask_path = out.with_extension("mask.pgm");
    write_file(&mask_path, &pgm16_bytes(file.nx, file.ny, &mask))?;
    println!(
        "exported layer {layer:?} ({lo}..{hi}) to {} with mask {}",
        out.display(),
        mask_path.display()
    );
    Ok(())
}
