//! End-to-end experiments built from the lower layers.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_model::{
    intensity_map, random_field, scan_map, G2Map, GridShape, IntensityMap, OccupancyGrid,
    PhotonSimulation, ScanGeometry, ScanMode,
};
use crate::hbt_correlator::{split_beamsplitter, zero_delay_g2, CorrelationConfig};
use crate::photon_engine::{generate_stream, merge_streams, EmitterPhysics};
use crate::reconstructor::{
    reconstruct, reconstruction_error, ReconstructionConfig, ReconstructionResult,
};
use crate::rng::RngSeed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub n: u32,
    pub simulated: f64,
    pub theory: f64,
}

/// g2(0) of `N` merged identical emitters next to `1 - 1/N`.
pub fn g2_ladder(
    n_values: &[u32],
    physics: &EmitterPhysics,
    config: &CorrelationConfig,
    seed: RngSeed,
) -> Result<Vec<LadderRow>> {
    config.validate()?;
    n_values
        .iter()
        .map(|&n| {
            if n < 1 {
                return Err(Error::InvalidParameter(
                    "emitter count must be at least 1".into(),
                ));
            }
            Ok(LadderRow {
                n,
                simulated: simulate_n_emitters(n, physics, config, seed.derive(n as u64))?,
                theory: 1.0 - 1.0 / n as f64,
            })
        })
        .collect()
}

/// Merge `n` independent streams, split and return g2(0).
pub fn simulate_n_emitters(
    n: u32,
    physics: &EmitterPhysics,
    config: &CorrelationConfig,
    seed: RngSeed,
) -> Result<f64> {
    let mut rng = seed.rng();
    let streams = (0..n)
        .map(|_| generate_stream(physics, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let record = merge_streams(&streams)?;
    drop(streams);
    let (ch1, ch2) = split_beamsplitter(&record, &mut rng);
    drop(record);
    zero_delay_g2(&ch1, &ch2, config.bin_width_ns)
}

/// Sweep definition for the error-versus-`n_max` benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub n_max_values: Vec<u32>,
    pub num_nonzero_values: Vec<usize>,
    pub spot_radius_px_values: Vec<usize>,
    pub realizations: usize,
    pub seed: RngSeed,
    pub field_extent_nm: f64,
    pub spot_radius_nm: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_max_values: vec![1, 2, 3, 4],
            num_nonzero_values: vec![20, 50, 80],
            spot_radius_px_values: vec![2, 3, 4],
            realizations: 10,
            seed: RngSeed(3),
            field_extent_nm: 4000.0,
            spot_radius_nm: 400.0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if self.realizations < 2 {
            return bad("benchmark needs at least 2 realizations");
        }
        if self.n_max_values.is_empty()
            || self.num_nonzero_values.is_empty()
            || self.spot_radius_px_values.is_empty()
        {
            return bad("benchmark value lists must not be empty");
        }
        if self.n_max_values.contains(&0) || self.spot_radius_px_values.contains(&0) {
            return bad("n_max and spot radius values must be positive");
        }
        if !(self.field_extent_nm > 0.0 && self.spot_radius_nm > 0.0) {
            return bad("field extent and spot radius must be positive");
        }
        for &r in &self.spot_radius_px_values {
            let shape = self.grid_for_radius(r)?;
            if let Some(&nz) = self.num_nonzero_values.iter().find(|&&nz| nz > shape.len()) {
                return Err(Error::InfeasibleField {
                    requested: nz,
                    available: shape.len(),
                });
            }
        }
        Ok(())
    }

    /// Grid whose pitch makes the spot radius exactly `r_px` pixels.
    pub fn grid_for_radius(&self, r_px: usize) -> Result<GridShape> {
        let pitch = self.spot_radius_nm / r_px as f64;
        let side = (self.field_extent_nm / pitch).round() as usize;
        GridShape::new(side, side, pitch)
    }

    pub fn geometry_for_radius(&self, r_px: usize) -> ScanGeometry {
        ScanGeometry::from_radius(self.spot_radius_nm, self.spot_radius_nm / r_px as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub config: String,
    pub num_nonzero: usize,
    pub spot_radius_px: usize,
    pub n_max: u32,
    pub mean_error_pct: f64,
    pub std_error_pct: f64,
    pub errors_pct: Vec<f64>,
}

pub fn config_label(num_nonzero: usize, spot_radius_px: usize) -> String {
    format!("nz{num_nonzero}_r{spot_radius_px}")
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Reconstruction error over random scenes for every
/// `(num_nonzero, spot_radius_px, n_max)` combination.
pub fn error_vs_nmax(
    spec: &BenchmarkSpec,
    mode: ScanMode,
    physics: &EmitterPhysics,
    correlation: &CorrelationConfig,
    recon: &ReconstructionConfig,
) -> Result<Vec<BenchmarkRow>> {
    spec.validate()?;
    recon.validate()?;
    let mut units = Vec::new();
    for &nz in &spec.num_nonzero_values {
        for &r in &spec.spot_radius_px_values {
            for &n_max in &spec.n_max_values {
                for rep in 0..spec.realizations {
                    units.push((nz, r, n_max, rep));
                }
            }
        }
    }
    let errors = units
        .par_iter()
        .map(|&(nz, r, n_max, rep)| {
            let unit = spec
                .seed
                .derive2(nz as u64, n_max as u64)
                .derive2(rep as u64, r as u64);
            let shape = spec.grid_for_radius(r)?;
            let geometry = spec.geometry_for_radius(r);
            let truth = random_field(
                shape.width_px,
                shape.height_px,
                shape.pitch_nm,
                nz,
                n_max,
                &mut unit.derive(0).rng(),
            )?;
            let sim = PhotonSimulation {
                physics: *physics,
                correlation: *correlation,
                seed: unit.derive(1),
            };
            let map = scan_map(&truth, &geometry, mode, &sim)?;
            let result = reconstruct(&map, &geometry, recon)?;
            reconstruction_error(&truth, &result.integer_counts)
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok(errors
        .chunks(spec.realizations)
        .zip(units.chunks(spec.realizations))
        .map(|(errs, unit)| {
            let (nz, r, n_max, _) = unit[0];
            let (mean, std) = mean_std(errs);
            BenchmarkRow {
                config: config_label(nz, r),
                num_nonzero: nz,
                spot_radius_px: r,
                n_max,
                mean_error_pct: mean,
                std_error_pct: std,
                errors_pct: errs.to_vec(),
            }
        })
        .collect())
}

pub fn write_benchmark_csv<W: Write>(rows: &[BenchmarkRow], mut out: W) -> Result<()> {
    let mut text = String::from("config,n_max,mean_error_pct,std_error_pct\n");
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            row.config, row.n_max, row.mean_error_pct, row.std_error_pct
        ));
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

/// A coarse pixel selected for a high-magnification follow-up scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    /// Coarse g2(0) observed with the spot centered on this tile.
    pub coarse_g2: Option<f64>,
}

/// Tiles whose reconstructed occupancy equals `criterion`, deepest
/// antibunching first, at most `max_rois` of them.
pub fn select_rois(
    coarse: &ReconstructionResult,
    coarse_map: &G2Map,
    criterion: u32,
    max_rois: usize,
) -> Vec<Tile> {
    let grid = &coarse.integer_counts;
    let shape = grid.shape();
    let positions = coarse_map.positions();
    let observed = |index: usize| {
        let (cx, cy) = shape.pixel_center_nm(index);
        positions
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (a.x_nm - cx).powi(2) + (a.y_nm - cy).powi(2);
                let db = (b.x_nm - cx).powi(2) + (b.y_nm - cy).powi(2);
                da.total_cmp(&db)
            })
            .and_then(|(i, _)| coarse_map.value(i))
    };
    let mut tiles: Vec<(usize, Tile)> = grid
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == criterion)
        .map(|(i, _)| {
            let (x, y) = shape.coords(i);
            (
                i,
                Tile {
                    x,
                    y,
                    coarse_g2: observed(i),
                },
            )
        })
        .collect();
    tiles.sort_by(|(ia, a), (ib, b)| {
        let ka = a.coarse_g2.unwrap_or(f64::INFINITY);
        let kb = b.coarse_g2.unwrap_or(f64::INFINITY);
        ka.total_cmp(&kb).then(ia.cmp(ib))
    });
    tiles.into_iter().take(max_rois).map(|(_, t)| t).collect()
}

/// One magnification level of the multi-resolution search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionLevel {
    pub spot_diameter_nm: f64,
    pub pitch_nm: f64,
    pub field_extent_um: f64,
}

impl ResolutionLevel {
    pub fn coarse_default() -> Self {
        Self {
            spot_diameter_nm: 6400.0,
            pitch_nm: 1600.0,
            field_extent_um: 32.0,
        }
    }

    pub fn fine_default() -> Self {
        Self {
            spot_diameter_nm: 800.0,
            pitch_nm: 200.0,
            field_extent_um: 1.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pitch_nm > 0.0 && self.field_extent_um > 0.0) {
            return Err(Error::IncompatibleLevels(
                "pitch and field extent must be positive".into(),
            ));
        }
        if self.spot_diameter_nm.partial_cmp(&self.pitch_nm) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::IncompatibleLevels(format!(
                "spot diameter {} nm must exceed pitch {} nm",
                self.spot_diameter_nm, self.pitch_nm
            )));
        }
        Ok(())
    }

    pub fn geometry(&self) -> ScanGeometry {
        ScanGeometry::from_radius(self.spot_diameter_nm / 2.0, self.pitch_nm)
    }

    pub fn extent_nm(&self) -> f64 {
        self.field_extent_um * 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Levels {
    pub coarse: ResolutionLevel,
    pub fine: ResolutionLevel,
}

impl Default for Levels {
    fn default() -> Self {
        Self {
            coarse: ResolutionLevel::coarse_default(),
            fine: ResolutionLevel::fine_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiresOptions {
    pub reconstruction: ReconstructionConfig,
    pub mode: ScanMode,
    pub physics: EmitterPhysics,
    pub correlation: CorrelationConfig,
    pub seed: RngSeed,
    pub criterion: u32,
    pub max_rois: usize,
}

/// Reconstructed occupancy inside a fine ROI scan, in whole-field pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizedEmitter {
    pub x_px: usize,
    pub y_px: usize,
    pub count: u32,
    pub x_nm: f64,
    pub y_nm: f64,
}

#[derive(Debug, Clone)]
pub struct RoiReport {
    pub tile: Tile,
    /// Fine-grid pixel offset of the tile within the whole field.
    pub origin_px: (usize, usize),
    pub truth: OccupancyGrid,
    pub map: G2Map,
    pub reconstruction: ReconstructionResult,
    pub emitters: Vec<LocalizedEmitter>,
}

#[derive(Debug, Clone)]
pub struct MultiresReport {
    pub coarse_truth: OccupancyGrid,
    pub coarse_map: G2Map,
    pub coarse_reconstruction: ReconstructionResult,
    pub rois: Vec<RoiReport>,
    pub positions_evaluated: usize,
    pub full_fine_positions: usize,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs())
}

/// Coarse occupancy as exact sums over `k x k` fine tiles.
pub fn aggregate_tiles(field: &OccupancyGrid, k: usize) -> Result<OccupancyGrid> {
    if k == 0 || !field.width_px.is_multiple_of(k) || !field.height_px.is_multiple_of(k) {
        return Err(Error::IncompatibleLevels(format!(
            "{}x{} field does not divide into {k}x{k} tiles",
            field.width_px, field.height_px
        )));
    }
    let shape = GridShape::new(
        field.width_px / k,
        field.height_px / k,
        field.pitch_nm * k as f64,
    )?;
    let mut coarse = OccupancyGrid::zeros(shape);
    for (i, &c) in field.counts.iter().enumerate() {
        let (x, y) = field.shape().coords(i);
        coarse.counts[shape.index(x / k, y / k)] += c;
    }
    Ok(coarse)
}

fn crop(field: &OccupancyGrid, x0: usize, y0: usize, k: usize) -> OccupancyGrid {
    let shape = GridShape {
        width_px: k,
        height_px: k,
        pitch_nm: field.pitch_nm,
    };
    let mut out = OccupancyGrid::zeros(shape);
    for y in 0..k {
        for x in 0..k {
            out.set(x, y, field.get(x0 + x, y0 + y));
        }
    }
    out
}

fn tile_factor(
    field: &OccupancyGrid,
    coarse: &ResolutionLevel,
    fine: &ResolutionLevel,
) -> Result<usize> {
    coarse.validate()?;
    fine.validate()?;
    let ratio = coarse.pitch_nm / fine.pitch_nm;
    let k = ratio.round() as usize;
    if k < 1 || !close(ratio, k as f64) {
        return Err(Error::IncompatibleLevels(format!(
            "coarse pitch {} nm is not an integer multiple of fine pitch {} nm",
            coarse.pitch_nm, fine.pitch_nm
        )));
    }
    if !close(field.pitch_nm, fine.pitch_nm) {
        return Err(Error::IncompatibleLevels(format!(
            "field pitch {} nm differs from fine level pitch {} nm",
            field.pitch_nm, fine.pitch_nm
        )));
    }
    if !close(fine.extent_nm(), coarse.pitch_nm) {
        return Err(Error::IncompatibleLevels(format!(
            "fine scans cover {} nm but coarse tiles are {} nm wide",
            fine.extent_nm(),
            coarse.pitch_nm
        )));
    }
    let (w, h) = field.shape().extent_nm();
    if !close(w, coarse.extent_nm()) || !close(h, coarse.extent_nm()) {
        return Err(Error::IncompatibleLevels(format!(
            "field spans {w} x {h} nm, coarse level expects {} nm",
            coarse.extent_nm()
        )));
    }
    Ok(k)
}

/// Coarse scan and inversion over the whole field, then fine scans confined
/// to the selected tiles. Each fine scan sees only its own tile.
pub fn multires_localize(
    field: &OccupancyGrid,
    coarse: &ResolutionLevel,
    fine: &ResolutionLevel,
    opts: &MultiresOptions,
) -> Result<MultiresReport> {
    field.validate()?;
    let k = tile_factor(field, coarse, fine)?;
    let coarse_geo = coarse.geometry();
    let fine_geo = fine.geometry();

    let coarse_truth = aggregate_tiles(field, k)?;
    let sim = |seed| PhotonSimulation {
        physics: opts.physics,
        correlation: opts.correlation,
        seed,
    };
    let coarse_map = scan_map(
        &coarse_truth,
        &coarse_geo,
        opts.mode,
        &sim(opts.seed.derive(0)),
    )?;
    let coarse_reconstruction = reconstruct(&coarse_map, &coarse_geo, &opts.reconstruction)?;
    let tiles = select_rois(
        &coarse_reconstruction,
        &coarse_map,
        opts.criterion,
        opts.max_rois,
    );

    let rois = tiles
        .par_iter()
        .enumerate()
        .map(|(i, &tile)| {
            let origin_px = (tile.x * k, tile.y * k);
            let truth = crop(field, origin_px.0, origin_px.1, k);
            let map = scan_map(
                &truth,
                &fine_geo,
                opts.mode,
                &sim(opts.seed.derive2(1, i as u64)),
            )?;
            let reconstruction = reconstruct(&map, &fine_geo, &opts.reconstruction)?;
            let emitters = reconstruction
                .integer_counts
                .counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(j, &count)| {
                    let (lx, ly) = truth.shape().coords(j);
                    let (x_px, y_px) = (origin_px.0 + lx, origin_px.1 + ly);
                    let (x_nm, y_nm) = field
                        .shape()
                        .pixel_center_nm(field.shape().index(x_px, y_px));
                    LocalizedEmitter {
                        x_px,
                        y_px,
                        count,
                        x_nm,
                        y_nm,
                    }
                })
                .collect();
            Ok(RoiReport {
                tile,
                origin_px,
                truth,
                map,
                reconstruction,
                emitters,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let coarse_positions = coarse_map.values.len();
    let fine_positions: usize = rois.iter().map(|r| r.map.values.len()).sum();
    let (fc, fr) = fine_geo.scan_dims(&field.shape());
    Ok(MultiresReport {
        coarse_truth,
        coarse_map,
        coarse_reconstruction,
        rois,
        positions_evaluated: coarse_positions + fine_positions,
        full_fine_positions: fc * fr,
    })
}

/// Fine-pitch field whose coarse tiling has exactly one tile of occupancy 1
/// and `other_tiles` tiles with occupancy drawn from `{2, 3, 4}`. Emitters
/// land on uniformly random fine pixels of their tile.
pub fn single_target_field<R: Rng + ?Sized>(
    tiles_per_side: usize,
    k: usize,
    fine_pitch_nm: f64,
    other_tiles: usize,
    rng: &mut R,
) -> Result<OccupancyGrid> {
    let n_tiles = tiles_per_side * tiles_per_side;
    if other_tiles + 1 > n_tiles {
        return Err(Error::InfeasibleField {
            requested: other_tiles + 1,
            available: n_tiles,
        });
    }
    let side = tiles_per_side * k;
    let mut field = OccupancyGrid::zeros(GridShape::new(side, side, fine_pitch_nm)?);
    let chosen = rand::seq::index::sample(rng, n_tiles, other_tiles + 1).into_vec();
    for (j, &t) in chosen.iter().enumerate() {
        let occupancy = if j == 0 { 1 } else { rng.random_range(2..=4) };
        let (tx, ty) = (t % tiles_per_side, t / tiles_per_side);
        for _ in 0..occupancy {
            let (x, y) = (
                tx * k + rng.random_range(0..k),
                ty * k + rng.random_range(0..k),
            );
            let c = field.get(x, y);
            field.set(x, y, c + 1);
        }
    }
    Ok(field)
}

/// `count` distinct pixels holding one emitter each; distinct pixels are at
/// least one pitch apart.
pub fn all_singles_scene<R: Rng + ?Sized>(
    shape: GridShape,
    count: usize,
    rng: &mut R,
) -> Result<OccupancyGrid> {
    shape.validate()?;
    if count > shape.len() {
        return Err(Error::InfeasibleField {
            requested: count,
            available: shape.len(),
        });
    }
    let mut grid = OccupancyGrid::zeros(shape);
    for i in rand::seq::index::sample(rng, shape.len(), count).into_vec() {
        grid.counts[i] = 1;
    }
    Ok(grid)
}

/// `count` distinct pixels with occupancies drawn from `{2, 3, 4}`.
pub fn no_singles_scene<R: Rng + ?Sized>(
    shape: GridShape,
    count: usize,
    rng: &mut R,
) -> Result<OccupancyGrid> {
    shape.validate()?;
    if count > shape.len() {
        return Err(Error::InfeasibleField {
            requested: count,
            available: shape.len(),
        });
    }
    let mut grid = OccupancyGrid::zeros(shape);
    for i in rand::seq::index::sample(rng, shape.len(), count).into_vec() {
        grid.counts[i] = rng.random_range(2..=4);
    }
    Ok(grid)
}

/// Per connected (8-neighbour) occupied region of the reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionVerdict {
    pub pixels: Vec<(usize, usize)>,
    pub total_emitters: u32,
    pub single_emitter_sites: Vec<(usize, usize)>,
    /// True when every pixel in the region holds exactly one emitter.
    pub all_single: bool,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub intensity: IntensityMap,
    pub g2: G2Map,
    pub reconstruction: ReconstructionResult,
    pub regions: Vec<RegionVerdict>,
}

impl ScenarioReport {
    pub fn single_sites(&self) -> Vec<(usize, usize)> {
        self.regions
            .iter()
            .flat_map(|r| r.single_emitter_sites.iter().copied())
            .collect()
    }
}

pub fn occupied_regions(grid: &OccupancyGrid) -> Vec<RegionVerdict> {
    let shape = grid.shape();
    let mut seen = vec![false; shape.len()];
    let mut regions = Vec::new();
    for start in 0..shape.len() {
        if seen[start] || grid.counts[start] == 0 {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y) = shape.coords(i);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0
                        || ny < 0
                        || nx >= shape.width_px as i64
                        || ny >= shape.height_px as i64
                    {
                        continue;
                    }
                    let j = shape.index(nx as usize, ny as usize);
                    if !seen[j] && grid.counts[j] > 0 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        members.sort_unstable();
        let pixels: Vec<_> = members.iter().map(|&i| shape.coords(i)).collect();
        let single_emitter_sites: Vec<_> = members
            .iter()
            .filter(|&&i| grid.counts[i] == 1)
            .map(|&i| shape.coords(i))
            .collect();
        regions.push(RegionVerdict {
            all_single: single_emitter_sites.len() == pixels.len(),
            total_emitters: members.iter().map(|&i| grid.counts[i]).sum(),
            pixels,
            single_emitter_sites,
        });
    }
    regions
}

/// Intensity map, g2(0) map and reconstruction of one scene, with a
/// single-emitter verdict for every reconstructed region.
pub fn scenario_compare(
    scene: &OccupancyGrid,
    geometry: &ScanGeometry,
    reconstruction: &ReconstructionConfig,
    mode: ScanMode,
    sim: &PhotonSimulation,
) -> Result<ScenarioReport> {
    let intensity = intensity_map(scene, geometry)?;
    let g2 = scan_map(scene, geometry, mode, sim)?;
    let result = reconstruct(&g2, geometry, reconstruction)?;
    let regions = occupied_regions(&result.integer_counts);
    Ok(ScenarioReport {
        intensity,
        g2,
        reconstruction: result,
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analytic_opts(max_rois: usize) -> MultiresOptions {
        MultiresOptions {
            reconstruction: ReconstructionConfig::default(),
            mode: ScanMode::Analytic,
            physics: EmitterPhysics::default(),
            correlation: CorrelationConfig::default(),
            seed: RngSeed(1),
            criterion: 1,
            max_rois,
        }
    }

    #[test]
    fn ladder_theory_spacing() {
        let physics = EmitterPhysics::default().with_acquisition(2e6);
        let rows = g2_ladder(
            &[1, 2, 3, 10],
            &physics,
            &CorrelationConfig::default(),
            RngSeed(1),
        )
        .unwrap();
        assert_eq!(rows[0].theory, 0.0);
        assert_eq!(rows[1].theory, 0.5);
        for n in 1..30u32 {
            let t = |n: u32| 1.0 - 1.0 / n as f64;
            let spacing = 1.0 / (n as f64 * (n as f64 + 1.0));
            assert!((t(n + 1) - t(n) - spacing).abs() < 1e-15);
        }
        assert!((rows[3].theory - 0.9).abs() < 1e-15);
        assert!(g2_ladder(&[0], &physics, &CorrelationConfig::default(), RngSeed(1)).is_err());
    }

    #[test]
    fn benchmark_spec_grids() {
        let spec = BenchmarkSpec::default();
        assert_eq!(spec.grid_for_radius(2).unwrap().width_px, 20);
        assert_eq!(spec.grid_for_radius(3).unwrap().width_px, 30);
        assert_eq!(spec.grid_for_radius(4).unwrap().width_px, 40);
        let bad = BenchmarkSpec {
            realizations: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let infeasible = BenchmarkSpec {
            num_nonzero_values: vec![401],
            spot_radius_px_values: vec![2],
            ..Default::default()
        };
        assert!(infeasible.validate().is_err());
    }

    #[test]
    fn small_benchmark_shape_and_determinism() {
        let spec = BenchmarkSpec {
            n_max_values: vec![1, 2],
            num_nonzero_values: vec![20],
            spot_radius_px_values: vec![2],
            realizations: 2,
            ..Default::default()
        };
        let run = || {
            error_vs_nmax(
                &spec,
                ScanMode::Analytic,
                &EmitterPhysics::default(),
                &CorrelationConfig::default(),
                &ReconstructionConfig::default(),
            )
            .unwrap()
        };
        let rows = run();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].config, "nz20_r2");
        assert_eq!(rows, run());
        let mut csv = Vec::new();
        write_benchmark_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("config,n_max,mean_error_pct,std_error_pct\nnz20_r2,1,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn tile_sums_are_exact() {
        let field = single_target_field(20, 8, 200.0, 30, &mut RngSeed(4).rng()).unwrap();
        let coarse = aggregate_tiles(&field, 8).unwrap();
        assert_eq!(coarse.total(), field.total());
        assert_eq!(coarse.counts.iter().filter(|&&c| c == 1).count(), 1);
        for ty in 0..20 {
            for tx in 0..20 {
                let sum: u32 = (0..8)
                    .flat_map(|y| (0..8).map(move |x| (x, y)))
                    .map(|(x, y)| field.get(tx * 8 + x, ty * 8 + y))
                    .sum();
                assert_eq!(coarse.get(tx, ty), sum);
            }
        }
        assert!(aggregate_tiles(&field, 7).is_err());
    }

    #[test]
    fn roi_selection() {
        let shape = GridShape::new(10, 10, 1600.0).unwrap();
        let geo = ScanGeometry::from_radius(3200.0, 1600.0);
        let empty = OccupancyGrid::zeros(shape);
        let map = crate::field_model::scan_map_analytic(&empty, &geo).unwrap();
        let res = reconstruct(&map, &geo, &ReconstructionConfig::default()).unwrap();
        assert!(select_rois(&res, &map, 1, 5).is_empty());

        let mut one = OccupancyGrid::zeros(shape);
        one.set(4, 6, 1);
        let map = crate::field_model::scan_map_analytic(&one, &geo).unwrap();
        let res = reconstruct(&map, &geo, &ReconstructionConfig::default()).unwrap();
        let rois = select_rois(&res, &map, 1, 5);
        assert_eq!(
            rois,
            vec![Tile {
                x: 4,
                y: 6,
                coarse_g2: Some(0.0)
            }]
        );
        assert!(select_rois(&res, &map, 1, 0).is_empty());
    }

    #[test]
    fn single_emitter_pipeline() {
        let mut field = OccupancyGrid::zeros(GridShape::new(160, 160, 200.0).unwrap());
        field.set(77, 101, 1);
        let levels = Levels::default();
        let report =
            multires_localize(&field, &levels.coarse, &levels.fine, &analytic_opts(3)).unwrap();
        assert_eq!(report.rois.len(), 1);
        let roi = &report.rois[0];
        assert_eq!((roi.tile.x, roi.tile.y), (9, 12));
        assert_eq!(roi.emitters.len(), 1);
        assert_eq!(
            (
                roi.emitters[0].x_px,
                roi.emitters[0].y_px,
                roi.emitters[0].count
            ),
            (77, 101, 1)
        );
        assert_eq!(report.positions_evaluated, 464);
        assert_eq!(report.full_fine_positions, 25600);
    }

    #[test]
    fn incompatible_levels() {
        let field = OccupancyGrid::zeros(GridShape::new(160, 160, 200.0).unwrap());
        let levels = Levels::default();
        let mut coarse = levels.coarse;
        coarse.pitch_nm = 1500.0;
        assert!(matches!(
            multires_localize(&field, &coarse, &levels.fine, &analytic_opts(1)),
            Err(Error::IncompatibleLevels(_))
        ));
        let small = OccupancyGrid::zeros(GridShape::new(80, 80, 200.0).unwrap());
        assert!(
            multires_localize(&small, &levels.coarse, &levels.fine, &analytic_opts(1)).is_err()
        );
        let mut fine = levels.fine;
        fine.spot_diameter_nm = 100.0;
        assert!(multires_localize(&field, &levels.coarse, &fine, &analytic_opts(1)).is_err());
    }

    #[test]
    fn empty_scenario() {
        let shape = GridShape::new(20, 20, 200.0).unwrap();
        let sim = PhotonSimulation {
            physics: EmitterPhysics::default(),
            correlation: CorrelationConfig::default(),
            seed: RngSeed(0),
        };
        let report = scenario_compare(
            &OccupancyGrid::zeros(shape),
            &ScanGeometry::default(),
            &ReconstructionConfig::default(),
            ScanMode::Analytic,
            &sim,
        )
        .unwrap();
        assert!(report.regions.is_empty());
        assert_eq!(report.g2.defined_count(), 0);
    }

    #[test]
    fn region_labelling() {
        let shape = GridShape::new(6, 6, 200.0).unwrap();
        let mut g = OccupancyGrid::zeros(shape);
        g.set(0, 0, 1);
        g.set(1, 1, 2);
        g.set(4, 4, 1);
        let regions = occupied_regions(&g);
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].pixels, vec![(0, 0), (1, 1)]);
        assert_eq!(regions[0].total_emitters, 3);
        assert!(!regions[0].all_single);
        assert!(regions[1].all_single);
    }

    #[test]
    fn scene_generators() {
        let shape = GridShape::new(20, 20, 200.0).unwrap();
        let mut rng = RngSeed(2).rng();
        let s = all_singles_scene(shape, 20, &mut rng).unwrap();
        assert_eq!(s.nonzero(), 20);
        assert_eq!(s.total(), 20);
        let m = no_singles_scene(shape, 20, &mut rng).unwrap();
        assert_eq!(m.nonzero(), 20);
        assert!(m.counts.iter().all(|&c| c == 0 || (2..=4).contains(&c)));
    }
}
