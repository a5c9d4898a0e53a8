use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use g2recon::field_model::{intensity_map, random_field, scan_map, PhotonSimulation, ScanMap};
use g2recon::hbt_correlator::{compute_g2, g2_zero, g2_zero_vs_binwidth, split_beamsplitter};
use g2recon::photon_engine::{generate_stream, merge_streams};
use g2recon::reconstructor::{reconstruct, reconstruction_error, ReconstructionResult};
use g2recon::workbench::{
    error_vs_nmax, multires_localize, write_benchmark_csv, BenchmarkSpec, Levels, LocalizedEmitter,
    MultiresOptions,
};
use g2recon::{GridShape, OccupancyGrid, ScanGeometry};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, Command};

pub fn run(cli: Cli) -> Result<ExitCode> {
    let g = cli.global;
    let config = RunConfig::load(g.config.as_deref())?.with_overrides(g.seed, g.mode);
    let out = |default: &str| g.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::G2curve {
            emitters,
            binwidth_sweep,
        } => g2curve(&config, emitters, &binwidth_sweep, &out("g2curve")),
        Command::Generate {
            width,
            height,
            pitch_nm,
            nonzero,
            n_max,
        } => {
            let shape = GridShape::new(width, height, pitch_nm)?;
            generate(&config, shape, nonzero, n_max, &out("field.json"))
        }
        Command::Scan { grid, intensity } => {
            scan(&config, &grid, &out("map.csv"), intensity.as_deref())
        }
        Command::Reconstruct { map, truth } => {
            reconstruct_cmd(&config, &map, truth.as_deref(), &out("reconstruction"))
        }
        Command::Benchmark { spec, realizations } => benchmark(
            &config,
            spec.as_deref(),
            g.seed,
            realizations,
            &out("benchmark.csv"),
        ),
        Command::Pipeline {
            field,
            levels,
            max_rois,
            criterion,
        } => pipeline(
            &config,
            &field,
            levels.as_deref(),
            max_rois,
            criterion,
            &out("pipeline"),
        ),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_grid(path: &Path) -> Result<OccupancyGrid> {
    OccupancyGrid::read_json(path).with_context(|| format!("reading grid {}", path.display()))
}

#[derive(Serialize)]
struct CurveSummary {
    emitters: u32,
    photons: usize,
    bin_width_ns: f64,
    g2_zero: f64,
    theory_g2_zero: f64,
}

fn g2curve(config: &RunConfig, emitters: u32, sweep: &[f64], dir: &Path) -> Result<ExitCode> {
    if emitters == 0 {
        bail!("--emitters must be at least 1");
    }
    let mut rng = config.seed.rng();
    let streams = (0..emitters)
        .map(|_| generate_stream(&config.physics, &mut rng))
        .collect::<g2recon::Result<Vec<_>>>()?;
    let record = merge_streams(&streams)?;
    drop(streams);
    let (ch1, ch2) = split_beamsplitter(&record, &mut rng);
    let curve = compute_g2(&ch1, &ch2, &config.correlation)?;
    drop((ch1, ch2));

    create_dir(dir)?;
    let mut csv = Vec::new();
    curve.write_csv(&mut csv)?;
    fs::write(dir.join("curve.csv"), csv)?;
    let summary = CurveSummary {
        emitters,
        photons: record.len(),
        bin_width_ns: config.correlation.bin_width_ns,
        g2_zero: g2_zero(&curve),
        theory_g2_zero: 1.0 - 1.0 / emitters as f64,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("g2(0) = {}", summary.g2_zero);

    if !sweep.is_empty() {
        let rows = g2_zero_vs_binwidth(&record, sweep, config.correlation.max_lag_ns, &mut rng)?;
        let mut text = String::from("bin_width_ns,g2_zero\n");
        for (width, g2) in rows {
            text.push_str(&format!("{width},{g2}\n"));
        }
        fs::write(dir.join("binwidth_sweep.csv"), text)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn generate(
    config: &RunConfig,
    shape: GridShape,
    nonzero: usize,
    n_max: u32,
    path: &Path,
) -> Result<ExitCode> {
    let grid = random_field(
        shape.width_px,
        shape.height_px,
        shape.pitch_nm,
        nonzero,
        n_max,
        &mut config.seed.rng(),
    )?;
    grid.write_json(path)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{}", grid.total());
    Ok(ExitCode::SUCCESS)
}

/// Scan positions must land on pixel centers: the step has to be a whole
/// number of pixels.
fn check_lattice(geometry: &ScanGeometry, shape: &GridShape) -> Result<()> {
    let ratio = geometry.step_nm / shape.pitch_nm;
    if ratio.round() < 1.0 || (ratio - ratio.round()).abs() > 1e-6 * ratio {
        bail!(
            "scan step {} nm is not a whole multiple of the {} nm grid pitch",
            geometry.step_nm,
            shape.pitch_nm
        );
    }
    Ok(())
}

fn scan(
    config: &RunConfig,
    grid_path: &Path,
    out: &Path,
    intensity_out: Option<&Path>,
) -> Result<ExitCode> {
    let grid = read_grid(grid_path)?;
    let geometry = config.geometry();
    check_lattice(&geometry, &grid.shape())?;
    let sim = PhotonSimulation {
        physics: config.physics,
        correlation: config.correlation,
        seed: config.seed,
    };
    let map = scan_map(&grid, &geometry, config.mode, &sim)?;
    map.write(out)
        .with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = intensity_out {
        intensity_map(&grid, &geometry)?
            .write(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "{} of {} positions defined",
        map.defined_count(),
        map.values.len()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct Score {
    error_pct: f64,
    exact: bool,
}

fn reconstruct_cmd(
    config: &RunConfig,
    map_path: &Path,
    truth: Option<&Path>,
    dir: &Path,
) -> Result<ExitCode> {
    let map =
        ScanMap::read(map_path).with_context(|| format!("reading map {}", map_path.display()))?;
    let geometry = config.geometry.unwrap_or(map.meta.geometry);
    let result = reconstruct(&map, &geometry, &config.reconstruction)?;
    result.write_bundle(dir)?;
    if let Some(path) = truth {
        let truth = read_grid(path)?;
        let error_pct = reconstruction_error(&truth, &result.integer_counts)?;
        write_json(
            &dir.join("score.json"),
            &Score {
                error_pct,
                exact: truth.counts == result.integer_counts.counts,
            },
        )?;
        println!("error {error_pct}%");
    }
    report_convergence(&result)
}

fn report_convergence(result: &ReconstructionResult) -> Result<ExitCode> {
    println!(
        "{} after {} sweeps (max loss {:e})",
        if result.converged {
            "converged"
        } else {
            "not converged"
        },
        result.sweeps_used,
        result.final_max_loss
    );
    Ok(if result.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn benchmark(
    config: &RunConfig,
    spec_path: Option<&Path>,
    seed: Option<u64>,
    realizations: Option<usize>,
    out: &Path,
) -> Result<ExitCode> {
    let mut spec = match spec_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            serde_json::from_str::<BenchmarkSpec>(&text)
                .with_context(|| format!("parsing spec {}", path.display()))?
        }
        None => BenchmarkSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed.into();
    }
    if let Some(n) = realizations {
        spec.realizations = n;
    }
    let rows = error_vs_nmax(
        &spec,
        config.mode,
        &config.physics,
        &config.correlation,
        &config.reconstruction,
    )?;
    let mut csv = Vec::new();
    write_benchmark_csv(&rows, &mut csv)?;
    fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    println!("{} rows", rows.len());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct StageSummary {
    converged: bool,
    sweeps_used: usize,
    final_max_loss: f64,
}

impl From<&ReconstructionResult> for StageSummary {
    fn from(r: &ReconstructionResult) -> Self {
        Self {
            converged: r.converged,
            sweeps_used: r.sweeps_used,
            final_max_loss: r.final_max_loss,
        }
    }
}

#[derive(Serialize)]
struct RoiEntry {
    directory: String,
    tile_x: usize,
    tile_y: usize,
    coarse_g2: Option<f64>,
    origin_px: (usize, usize),
    reconstruction: StageSummary,
    emitters: Vec<LocalizedEmitter>,
}

#[derive(Serialize)]
struct Manifest {
    levels: Levels,
    criterion: u32,
    max_rois: usize,
    positions_evaluated: usize,
    full_fine_positions: usize,
    coarse: StageSummary,
    rois: Vec<RoiEntry>,
}

fn pipeline(
    config: &RunConfig,
    field_path: &Path,
    levels_path: Option<&Path>,
    max_rois: usize,
    criterion: u32,
    dir: &Path,
) -> Result<ExitCode> {
    let field = read_grid(field_path)?;
    let levels = match levels_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading levels {}", path.display()))?;
            serde_json::from_str::<Levels>(&text)
                .with_context(|| format!("parsing levels {}", path.display()))?
        }
        None => Levels::default(),
    };
    let opts = MultiresOptions {
        reconstruction: config.reconstruction,
        mode: config.mode,
        physics: config.physics,
        correlation: config.correlation,
        seed: config.seed,
        criterion,
        max_rois,
    };
    let report = multires_localize(&field, &levels.coarse, &levels.fine, &opts)?;

    let coarse_dir = dir.join("coarse");
    create_dir(&coarse_dir)?;
    report
        .coarse_truth
        .write_json(coarse_dir.join("truth.json"))?;
    report.coarse_map.write(coarse_dir.join("g2.csv"))?;
    report
        .coarse_reconstruction
        .write_bundle(coarse_dir.join("reconstruction"))?;

    let mut rois = Vec::new();
    for (i, roi) in report.rois.iter().enumerate() {
        let name = format!("roi_{i:02}");
        let roi_dir = dir.join(&name);
        create_dir(&roi_dir)?;
        roi.map.write(roi_dir.join("g2.csv"))?;
        roi.reconstruction
            .write_bundle(roi_dir.join("reconstruction"))?;
        rois.push(RoiEntry {
            directory: name,
            tile_x: roi.tile.x,
            tile_y: roi.tile.y,
            coarse_g2: roi.tile.coarse_g2,
            origin_px: roi.origin_px,
            reconstruction: (&roi.reconstruction).into(),
            emitters: roi.emitters.clone(),
        });
    }
    let manifest = Manifest {
        levels,
        criterion,
        max_rois,
        positions_evaluated: report.positions_evaluated,
        full_fine_positions: report.full_fine_positions,
        coarse: (&report.coarse_reconstruction).into(),
        rois,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    for roi in &manifest.rois {
        for e in &roi.emitters {
            println!(
                "{}: {} emitter(s) at pixel ({}, {}), ({} nm, {} nm)",
                roi.directory, e.count, e.x_px, e.y_px, e.x_nm, e.y_nm
            );
        }
    }
    println!(
        "{} scan positions evaluated, {} for a full fine scan",
        manifest.positions_evaluated, manifest.full_fine_positions
    );
    Ok(ExitCode::SUCCESS)
}
