//! Occupancy grids, focal-spot weighting and raster scans.
//!
//! Emitters are point sources at pixel centers. A focal spot centered at a
//! scan position covers every pixel whose center lies within
//! `spot_radius_nm`, and pixel `j` at distance `d` gets the Gaussian weight
//! `exp(-d^2 / (2 sigma^2))`. Pixels outside the grid do not exist.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hbt_correlator::{split_beamsplitter, zero_delay_g2, CorrelationConfig};
use crate::photon_engine::{generate_stream, merge_streams, thin_stream, EmitterPhysics};
use crate::rng::RngSeed;

/// Relative slack on the footprint radius test, so that a pixel exactly
/// `r` away stays inside despite rounding in refined pitches.
const RADIUS_SLACK: f64 = 1e-9;

/// Pixel layout of a grid without its contents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridShape {
    pub width_px: usize,
    pub height_px: usize,
    pub pitch_nm: f64,
}

impl GridShape {
    pub fn new(width_px: usize, height_px: usize, pitch_nm: f64) -> Result<Self> {
        let shape = Self {
            width_px,
            height_px,
            pitch_nm,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::InvalidParameter(
                "grid dimensions must be at least 1".into(),
            ));
        }
        if !(self.pitch_nm.is_finite() && self.pitch_nm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pitch_nm must be positive, got {}",
                self.pitch_nm
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width_px * self.height_px
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width_px + x
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width_px, index / self.width_px)
    }

    /// Physical center of pixel `index`, in nm.
    pub fn pixel_center_nm(&self, index: usize) -> (f64, f64) {
        let (x, y) = self.coords(index);
        (
            (x as f64 + 0.5) * self.pitch_nm,
            (y as f64 + 0.5) * self.pitch_nm,
        )
    }

    pub fn extent_nm(&self) -> (f64, f64) {
        (
            self.width_px as f64 * self.pitch_nm,
            self.height_px as f64 * self.pitch_nm,
        )
    }
}

/// Integer emitter counts per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub width_px: usize,
    pub height_px: usize,
    pub pitch_nm: f64,
    pub counts: Vec<u32>,
}

impl OccupancyGrid {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            width_px: shape.width_px,
            height_px: shape.height_px,
            pitch_nm: shape.pitch_nm,
            counts: vec![0; shape.len()],
        }
    }

    pub fn from_counts(shape: GridShape, counts: Vec<u32>) -> Result<Self> {
        let grid = Self {
            width_px: shape.width_px,
            height_px: shape.height_px,
            pitch_nm: shape.pitch_nm,
            counts,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        if self.counts.len() != self.width_px * self.height_px {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} grid holds {} counts",
                self.width_px,
                self.height_px,
                self.counts.len()
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            width_px: self.width_px,
            height_px: self.height_px,
            pitch_nm: self.pitch_nm,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.width_px + x]
    }

    pub fn set(&mut self, x: usize, y: usize, n: u32) {
        self.counts[y * self.width_px + x] = n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn nonzero(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let grid: Self = serde_json::from_str(text)?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Focal-spot size and raster step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanGeometry {
    pub spot_radius_nm: f64,
    pub sigma_nm: f64,
    pub step_nm: f64,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self::from_radius(400.0, 200.0)
    }
}

impl ScanGeometry {
    /// Spot of radius `r` with `sigma = r / 2`.
    pub fn from_radius(spot_radius_nm: f64, step_nm: f64) -> Self {
        Self {
            spot_radius_nm,
            sigma_nm: spot_radius_nm / 2.0,
            step_nm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("spot_radius_nm", self.spot_radius_nm),
            ("sigma_nm", self.sigma_nm),
            ("step_nm", self.step_nm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn approx_eq(&self, other: &ScanGeometry) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
        close(self.spot_radius_nm, other.spot_radius_nm)
            && close(self.sigma_nm, other.sigma_nm)
            && close(self.step_nm, other.step_nm)
    }

    /// Scan lattice dimensions `(cols, rows)` over a grid. The first position
    /// sits on the first pixel center, so `step == pitch` visits every pixel.
    pub fn scan_dims(&self, shape: &GridShape) -> (usize, usize) {
        let along = |px: usize| {
            let span = (px as f64 - 0.5) * shape.pitch_nm;
            (span / self.step_nm * (1.0 + RADIUS_SLACK)).floor() as usize + 1
        };
        (along(shape.width_px), along(shape.height_px))
    }

    pub fn positions(&self, shape: &GridShape) -> Vec<ScanPosition> {
        let (cols, rows) = self.scan_dims(shape);
        let origin = shape.pitch_nm / 2.0;
        (0..rows)
            .flat_map(|row| {
                (0..cols).map(move |col| ScanPosition {
                    col,
                    row,
                    x_nm: origin + col as f64 * self.step_nm,
                    y_nm: origin + row as f64 * self.step_nm,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPosition {
    pub col: usize,
    pub row: usize,
    pub x_nm: f64,
    pub y_nm: f64,
}

impl ScanPosition {
    pub fn center(&self) -> (f64, f64) {
        (self.x_nm, self.y_nm)
    }
}

/// Pixels under one focal spot and their Gaussian weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Footprint {
    pub pixels: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Footprint {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// `(A, B) = (sum w n, sum w^2 n)` over an arbitrary per-pixel field.
    pub fn moments<T: Copy + Into<f64>>(&self, counts: &[T]) -> (f64, f64) {
        self.pixels
            .iter()
            .zip(&self.weights)
            .fold((0.0, 0.0), |(a, b), (&p, &w)| {
                let n: f64 = counts[p].into();
                (a + w * n, b + w * w * n)
            })
    }
}

pub fn gaussian_weights(
    center: (f64, f64),
    shape: &GridShape,
    geometry: &ScanGeometry,
) -> Footprint {
    let (cx, cy) = center;
    let r = geometry.spot_radius_nm;
    let r2 = r * r * (1.0 + RADIUS_SLACK);
    let two_sigma2 = 2.0 * geometry.sigma_nm * geometry.sigma_nm;
    let p = shape.pitch_nm;
    let span = |c: f64, n: usize| {
        let lo = ((c - r) / p - 0.5).ceil().max(0.0) as usize;
        let hi = ((c + r) / p - 0.5).floor();
        if hi < 0.0 {
            return (1, 0);
        }
        (lo, (hi as usize).min(n - 1))
    };
    let (x0, x1) = span(cx, shape.width_px);
    let (y0, y1) = span(cy, shape.height_px);

    let mut fp = Footprint::default();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5) * p - cx;
            let dy = (y as f64 + 0.5) * p - cy;
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                fp.pixels.push(shape.index(x, y));
                fp.weights.push((-d2 / two_sigma2).exp());
            }
        }
    }
    fp
}

/// Grid with exactly `num_nonzero` distinct pixels holding counts drawn
/// uniformly from `1..=n_max`.
pub fn random_field<R: Rng + ?Sized>(
    width_px: usize,
    height_px: usize,
    pitch_nm: f64,
    num_nonzero: usize,
    n_max: u32,
    rng: &mut R,
) -> Result<OccupancyGrid> {
    let shape = GridShape::new(width_px, height_px, pitch_nm)?;
    if n_max < 1 {
        return Err(Error::InvalidParameter("n_max must be at least 1".into()));
    }
    if num_nonzero > shape.len() {
        return Err(Error::InfeasibleField {
            requested: num_nonzero,
            available: shape.len(),
        });
    }
    let mut grid = OccupancyGrid::zeros(shape);
    for idx in rand::seq::index::sample(rng, shape.len(), num_nonzero).into_vec() {
        grid.counts[idx] = rng.random_range(1..=n_max);
    }
    Ok(grid)
}

/// Noiseless weighted g2(0) under one spot, `1 - B / A^2`; `None` when the
/// footprint senses no emitters.
pub fn analytic_g2_at(
    grid: &OccupancyGrid,
    center: (f64, f64),
    geometry: &ScanGeometry,
) -> Option<f64> {
    let fp = gaussian_weights(center, &grid.shape(), geometry);
    analytic_g2_footprint(&fp, &grid.counts)
}

pub(crate) fn analytic_g2_footprint(fp: &Footprint, counts: &[u32]) -> Option<f64> {
    let (a, b) = fp.moments(counts);
    (a > 0.0).then(|| 1.0 - b / (a * a))
}

/// Photon-level g2(0) under one spot: every emitter in the footprint emits
/// its own stream, thinned by its pixel weight, and the merged record goes
/// through the virtual beamsplitter.
pub fn simulate_g2_at<R: Rng + ?Sized>(
    grid: &OccupancyGrid,
    center: (f64, f64),
    geometry: &ScanGeometry,
    physics: &EmitterPhysics,
    config: &CorrelationConfig,
    rng: &mut R,
) -> Result<Option<f64>> {
    let fp = gaussian_weights(center, &grid.shape(), geometry);
    simulate_g2_footprint(&fp, &grid.counts, physics, config, rng)
}

fn simulate_g2_footprint<R: Rng + ?Sized>(
    fp: &Footprint,
    counts: &[u32],
    physics: &EmitterPhysics,
    config: &CorrelationConfig,
    rng: &mut R,
) -> Result<Option<f64>> {
    physics.validate()?;
    config.validate()?;
    let mut retained = Vec::new();
    for (&pixel, &w) in fp.pixels.iter().zip(&fp.weights) {
        for _ in 0..counts[pixel] {
            let full = generate_stream(physics, rng)?;
            retained.push(thin_stream(&full, w, rng)?);
        }
    }
    if retained.is_empty() {
        return Ok(None);
    }
    let record = merge_streams(&retained)?;
    drop(retained);
    if record.is_empty() {
        return Ok(None);
    }
    let (ch1, ch2) = split_beamsplitter(&record, rng);
    drop(record);
    match zero_delay_g2(&ch1, &ch2, config.bin_width_ns) {
        Ok(g2) => Ok(Some(g2)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    #[default]
    Analytic,
    Sampled,
}

impl std::str::FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(ScanMode::Analytic),
            "sampled" => Ok(ScanMode::Sampled),
            other => Err(Error::Parse(format!("unknown scan mode {other:?}"))),
        }
    }
}

/// What a sampled scan needs beyond the scene. Position `i` draws from
/// `seed.derive(i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotonSimulation {
    pub physics: EmitterPhysics,
    pub correlation: CorrelationConfig,
    pub seed: RngSeed,
}

/// Which per-position quantity a map holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    G2,
    Intensity,
}

/// Geometry metadata stored beside a map CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub kind: MapKind,
    pub grid: GridShape,
    pub geometry: ScanGeometry,
    pub scan_cols: usize,
    pub scan_rows: usize,
}

/// Per-scan-position values, row-major over the scan lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanMap {
    pub meta: MapMetadata,
    pub values: Vec<f64>,
}

/// Zero-delay correlation map; NaN marks positions whose spot sensed no emitter.
pub type G2Map = ScanMap;
/// Relative brightness map `A = sum w n`.
pub type IntensityMap = ScanMap;

impl ScanMap {
    pub fn value(&self, index: usize) -> Option<f64> {
        let v = self.values[index];
        (!v.is_nan()).then_some(v)
    }

    pub fn at(&self, col: usize, row: usize) -> Option<f64> {
        self.value(row * self.meta.scan_cols + col)
    }

    pub fn defined_mask(&self) -> Vec<bool> {
        self.values.iter().map(|v| !v.is_nan()).collect()
    }

    pub fn defined_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn positions(&self) -> Vec<ScanPosition> {
        self.meta.geometry.positions(&self.meta.grid)
    }

    /// Row-major CSV, one scan row per line, `NaN` for undefined cells.
    pub fn to_csv(&self) -> String {
        let cols = self.meta.scan_cols;
        let mut text = String::with_capacity(self.values.len() * 12);
        for row in self.values.chunks(cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        text
    }

    pub fn from_csv(text: &str, meta: MapMetadata) -> Result<Self> {
        let mut values = Vec::with_capacity(meta.scan_cols * meta.scan_rows);
        let mut rows = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let before = values.len();
            for cell in line.split(',') {
                let cell = cell.trim();
                let v = cell
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad map cell {cell:?}: {e}")))?;
                values.push(v);
            }
            if values.len() - before != meta.scan_cols {
                return Err(Error::DimensionMismatch(format!(
                    "map row {rows} has {} cells, expected {}",
                    values.len() - before,
                    meta.scan_cols
                )));
            }
            rows += 1;
        }
        if rows != meta.scan_rows {
            return Err(Error::DimensionMismatch(format!(
                "map has {rows} rows, expected {}",
                meta.scan_rows
            )));
        }
        Ok(Self { meta, values })
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Write the CSV and its metadata sidecar (same stem, `.json`).
    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        fs::write(csv_path, self.to_csv())?;
        let mut side = fs::File::create(Self::sidecar_path(csv_path))?;
        writeln!(side, "{}", serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn read(csv_path: impl AsRef<Path>) -> Result<Self> {
        let csv_path = csv_path.as_ref();
        let meta: MapMetadata =
            serde_json::from_str(&fs::read_to_string(Self::sidecar_path(csv_path))?)?;
        meta.grid.validate()?;
        meta.geometry.validate()?;
        if meta.geometry.scan_dims(&meta.grid) != (meta.scan_cols, meta.scan_rows) {
            return Err(Error::GeometryMismatch(format!(
                "scan lattice {}x{} does not match grid and geometry",
                meta.scan_cols, meta.scan_rows
            )));
        }
        Self::from_csv(&fs::read_to_string(csv_path)?, meta)
    }
}

fn metadata(kind: MapKind, shape: GridShape, geometry: &ScanGeometry) -> MapMetadata {
    let (scan_cols, scan_rows) = geometry.scan_dims(&shape);
    MapMetadata {
        kind,
        grid: shape,
        geometry: *geometry,
        scan_cols,
        scan_rows,
    }
}

/// Footprints for every scan position, in raster order.
pub fn scan_footprints(shape: &GridShape, geometry: &ScanGeometry) -> Vec<Footprint> {
    geometry
        .positions(shape)
        .iter()
        .map(|p| gaussian_weights(p.center(), shape, geometry))
        .collect()
}

pub fn scan_map_analytic(grid: &OccupancyGrid, geometry: &ScanGeometry) -> Result<G2Map> {
    grid.validate()?;
    geometry.validate()?;
    let values = scan_footprints(&grid.shape(), geometry)
        .iter()
        .map(|fp| analytic_g2_footprint(fp, &grid.counts).unwrap_or(f64::NAN))
        .collect();
    Ok(ScanMap {
        meta: metadata(MapKind::G2, grid.shape(), geometry),
        values,
    })
}

pub fn scan_map_sampled(
    grid: &OccupancyGrid,
    geometry: &ScanGeometry,
    sim: &PhotonSimulation,
) -> Result<G2Map> {
    grid.validate()?;
    geometry.validate()?;
    let footprints = scan_footprints(&grid.shape(), geometry);
    let values = footprints
        .par_iter()
        .enumerate()
        .map(|(i, fp)| {
            let mut rng = sim.seed.derive(i as u64).rng();
            simulate_g2_footprint(fp, &grid.counts, &sim.physics, &sim.correlation, &mut rng)
                .map(|g2| g2.unwrap_or(f64::NAN))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScanMap {
        meta: metadata(MapKind::G2, grid.shape(), geometry),
        values,
    })
}

pub fn scan_map(
    grid: &OccupancyGrid,
    geometry: &ScanGeometry,
    mode: ScanMode,
    sim: &PhotonSimulation,
) -> Result<G2Map> {
    match mode {
        ScanMode::Analytic => scan_map_analytic(grid, geometry),
        ScanMode::Sampled => scan_map_sampled(grid, geometry, sim),
    }
}

pub fn intensity_map(grid: &OccupancyGrid, geometry: &ScanGeometry) -> Result<IntensityMap> {
    grid.validate()?;
    geometry.validate()?;
    let values = scan_footprints(&grid.shape(), geometry)
        .iter()
        .map(|fp| fp.moments(&grid.counts).0)
        .collect();
    Ok(ScanMap {
        meta: metadata(MapKind::Intensity, grid.shape(), geometry),
        values,
    })
}
