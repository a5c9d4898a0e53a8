//! Occupancy reconstruction from a g2(0) map.
//!
//! Each scan position turns its observation into `N_meas = 1 / (1 - g2(0))`
//! and compares it with the effective emitter number of the current estimate,
//!
//! ```text
//! N_eff = A^2 / B,   A = sum w_i n_i,   B = sum w_i^2 n_i.
//! ```
//!
//! A local descent step on `L = (N_meas - N_eff)^2` moves the pixels under
//! that spot; positions are visited in raster order and whole sweeps repeat
//! until every spot is self-consistent. Overlapping footprints carry the
//! updates between neighbours. The continuous result is rounded to integers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_model::{
    scan_footprints, Footprint, G2Map, GridShape, MapKind, OccupancyGrid, ScanGeometry,
};
use crate::hbt_correlator::n_meas_from_g2;

/// Residuals `|N_meas - N_eff|` at or below this fraction of `N_meas` count
/// as already satisfied and leave the state untouched.
const SATISFIED_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    Zeros,
    UniformFromMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub learning_rate: f64,
    pub max_sweeps: usize,
    pub loss_tolerance: f64,
    pub init_strategy: InitStrategy,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            max_sweeps: 500,
            loss_tolerance: 1e-4,
            init_strategy: InitStrategy::Zeros,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_sweeps < 1 {
            return Err(Error::InvalidParameter(
                "max_sweeps must be at least 1".into(),
            ));
        }
        if !(self.loss_tolerance.is_finite() && self.loss_tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "loss_tolerance must be positive, got {}",
                self.loss_tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub continuous_counts: Vec<f64>,
    pub integer_counts: OccupancyGrid,
    pub final_max_loss: f64,
    pub sweeps_used: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub final_max_loss: f64,
    pub sweeps_used: usize,
    pub converged: bool,
}

impl ReconstructionResult {
    pub fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            final_max_loss: self.final_max_loss,
            sweeps_used: self.sweeps_used,
            converged: self.converged,
        }
    }

    /// Continuous estimate as CSV, one grid row per line.
    pub fn continuous_csv(&self) -> String {
        let w = self.integer_counts.width_px;
        let mut text = String::new();
        for row in self.continuous_counts.chunks(w) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        text
    }

    /// Writes `occupancy.json`, `continuous.csv` and `diagnostics.json` into `dir`.
    pub fn write_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.integer_counts.write_json(dir.join("occupancy.json"))?;
        fs::write(dir.join("continuous.csv"), self.continuous_csv())?;
        fs::write(
            dir.join("diagnostics.json"),
            serde_json::to_string_pretty(&self.diagnostics())? + "\n",
        )?;
        Ok(())
    }
}

/// `A^2 / B` over a footprint; `None` when `A = 0`.
pub fn n_eff(weights: &[f64], counts: &[f64]) -> Option<f64> {
    let (a, b) = moments(weights, counts);
    (a > 0.0).then(|| a * a / b)
}

/// `dN_eff/dn_i = (2 A w_i B - A^2 w_i^2) / B^2`.
pub fn grad_n_eff(weights: &[f64], counts: &[f64]) -> Result<Vec<f64>> {
    let (a, b) = moments(weights, counts);
    if a <= 0.0 {
        return Err(Error::UndefinedGradient);
    }
    Ok(weights
        .iter()
        .map(|&w| gradient_component(a, b, w))
        .collect())
}

fn moments(weights: &[f64], counts: &[f64]) -> (f64, f64) {
    weights
        .iter()
        .zip(counts)
        .fold((0.0, 0.0), |(a, b), (&w, &n)| (a + w * n, b + w * w * n))
}

#[inline]
fn gradient_component(a: f64, b: f64, w: f64) -> f64 {
    (2.0 * a * w * b - a * a * w * w) / (b * b)
}

fn footprint_moments(fp: &Footprint, state: &[f64]) -> (f64, f64) {
    fp.pixels
        .iter()
        .zip(&fp.weights)
        .fold((0.0, 0.0), |(a, b), (&p, &w)| {
            (a + w * state[p], b + w * w * state[p])
        })
}

/// One descent step at a single scan position.
///
/// `n_meas = None` means the spot sensed nothing: every footprint pixel is
/// set to zero. With an empty estimate (`A = 0`) the effective number is
/// taken as 0 and each pixel's derivative as 1, the limit of `A^2 / B`
/// along any single-pixel direction.
pub fn local_update(
    state: &mut [f64],
    footprint: &Footprint,
    n_meas: Option<f64>,
    learning_rate: f64,
) {
    let Some(n_meas) = n_meas else {
        for &p in &footprint.pixels {
            state[p] = 0.0;
        }
        return;
    };
    let (a, b) = footprint_moments(footprint, state);
    if a <= 0.0 {
        let step = 2.0 * learning_rate * n_meas;
        for &p in &footprint.pixels {
            state[p] = (state[p] + step).max(0.0);
        }
        return;
    }
    let residual = n_meas - a * a / b;
    if residual.abs() <= SATISFIED_REL * n_meas {
        return;
    }
    let scale = 2.0 * learning_rate * residual;
    for (&p, &w) in footprint.pixels.iter().zip(&footprint.weights) {
        state[p] = (state[p] + scale * gradient_component(a, b, w)).max(0.0);
    }
}

/// `(N_meas - N_eff)^2` at one position; `N_eff = 0` for an empty estimate.
fn position_loss(footprint: &Footprint, state: &[f64], n_meas: f64) -> f64 {
    let (a, b) = footprint_moments(footprint, state);
    let ne = if a > 0.0 { a * a / b } else { 0.0 };
    (n_meas - ne).powi(2)
}

/// Largest per-position loss over defined observations. Undefined
/// observations contribute the squared weighted mass left under their spot,
/// which is zero once they have been enforced.
pub fn max_loss(footprints: &[Footprint], n_meas: &[Option<f64>], state: &[f64]) -> f64 {
    footprints
        .iter()
        .zip(n_meas)
        .map(|(fp, nm)| match nm {
            Some(nm) => position_loss(fp, state, *nm),
            None => footprint_moments(fp, state).0.powi(2),
        })
        .fold(0.0, f64::max)
}

fn round_half_up(x: f64) -> u32 {
    (x.max(0.0) + 0.5).floor() as u32
}

fn initial_state(
    shape: &GridShape,
    footprints: &[Footprint],
    n_meas: &[Option<f64>],
    strategy: InitStrategy,
) -> Vec<f64> {
    match strategy {
        InitStrategy::Zeros => vec![0.0; shape.len()],
        InitStrategy::UniformFromMap => {
            let defined: Vec<(f64, usize)> = footprints
                .iter()
                .zip(n_meas)
                .filter_map(|(fp, nm)| nm.map(|nm| (nm, fp.len())))
                .collect();
            if defined.is_empty() {
                return vec![0.0; shape.len()];
            }
            let mean_n = defined.iter().map(|d| d.0).sum::<f64>() / defined.len() as f64;
            let mean_fp = defined.iter().map(|d| d.1 as f64).sum::<f64>() / defined.len() as f64;
            vec![mean_n / mean_fp; shape.len()]
        }
    }
}

/// Raster-sweep inversion of a g2(0) map.
pub fn reconstruct(
    map: &G2Map,
    geometry: &ScanGeometry,
    config: &ReconstructionConfig,
) -> Result<ReconstructionResult> {
    config.validate()?;
    geometry.validate()?;
    if map.meta.kind != MapKind::G2 {
        return Err(Error::InvalidParameter(
            "reconstruction needs a g2 map, not an intensity map".into(),
        ));
    }
    if !map.meta.geometry.approx_eq(geometry) {
        return Err(Error::GeometryMismatch(format!(
            "map was scanned with {:?}, reconstruction asked for {:?}",
            map.meta.geometry, geometry
        )));
    }
    let shape = map.meta.grid;
    let (cols, rows) = geometry.scan_dims(&shape);
    if (cols, rows) != (map.meta.scan_cols, map.meta.scan_rows) || map.values.len() != cols * rows {
        return Err(Error::GeometryMismatch(format!(
            "map holds {} values on a {}x{} lattice, geometry implies {cols}x{rows}",
            map.values.len(),
            map.meta.scan_cols,
            map.meta.scan_rows
        )));
    }

    let footprints = scan_footprints(&shape, geometry);
    let n_meas: Vec<Option<f64>> = map
        .values
        .iter()
        .map(|&g| (!g.is_nan()).then(|| n_meas_from_g2(g)))
        .collect();
    let mut state = initial_state(&shape, &footprints, &n_meas, config.init_strategy);

    let mut sweeps_used = 0;
    let mut loss = f64::INFINITY;
    while sweeps_used < config.max_sweeps {
        for (fp, nm) in footprints.iter().zip(&n_meas) {
            local_update(&mut state, fp, *nm, config.learning_rate);
        }
        sweeps_used += 1;
        loss = max_loss(&footprints, &n_meas, &state);
        if loss <= config.loss_tolerance {
            break;
        }
    }

    let counts = state.iter().map(|&x| round_half_up(x)).collect();
    Ok(ReconstructionResult {
        integer_counts: OccupancyGrid::from_counts(shape, counts)?,
        continuous_counts: state,
        final_max_loss: loss,
        sweeps_used,
        converged: loss <= config.loss_tolerance,
    })
}

/// `100 * sum |estimate - truth| / max(1, sum truth)`.
pub fn reconstruction_error(truth: &OccupancyGrid, estimate: &OccupancyGrid) -> Result<f64> {
    if (truth.width_px, truth.height_px) != (estimate.width_px, estimate.height_px) {
        return Err(Error::DimensionMismatch(format!(
            "truth is {}x{}, estimate is {}x{}",
            truth.width_px, truth.height_px, estimate.width_px, estimate.height_px
        )));
    }
    let l1: u64 = truth
        .counts
        .iter()
        .zip(&estimate.counts)
        .map(|(&t, &e)| (t as i64 - e as i64).unsigned_abs())
        .sum();
    Ok(100.0 * l1 as f64 / truth.total().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_model::scan_map_analytic;
    use crate::rng::RngSeed;
    use proptest::prelude::*;
    use rand::Rng;

    fn fd_gradient(weights: &[f64], counts: &[f64], h: f64) -> Vec<f64> {
        (0..counts.len())
            .map(|i| {
                let mut up = counts.to_vec();
                let mut dn = counts.to_vec();
                up[i] += h;
                dn[i] -= h;
                let f = |c: &[f64]| {
                    let a: f64 = weights.iter().zip(c).map(|(w, n)| w * n).sum();
                    let b: f64 = weights.iter().zip(c).map(|(w, n)| w * w * n).sum();
                    a * a / b
                };
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn n_eff_examples() {
        assert_eq!(n_eff(&[1.0], &[3.0]), Some(3.0));
        assert!((n_eff(&[1.0, 0.5], &[1.0, 1.0]).unwrap() - 1.8).abs() < 1e-15);
        assert!((n_eff(&[0.37], &[2.5]).unwrap() - 2.5).abs() < 1e-14);
        assert_eq!(n_eff(&[1.0, 0.5], &[0.0, 0.0]), None);
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(grad_n_eff(&[1.0], &[0.7]).unwrap(), vec![1.0]);
        // (2*1.5*1*1.25 - 2.25) / 1.5625 and (2*1.5*0.5*1.25 - 2.25*0.25) / 1.5625
        let g = grad_n_eff(&[1.0, 0.5], &[1.0, 1.0]).unwrap();
        assert!(
            (g[0] - 0.96).abs() < 1e-12 && (g[1] - 0.84).abs() < 1e-12,
            "{g:?}"
        );
        let fd = fd_gradient(&[1.0, 0.5], &[1.0, 1.0], 1e-6);
        assert!((g[0] - fd[0]).abs() < 1e-8 && (g[1] - fd[1]).abs() < 1e-8);
        assert!(matches!(
            grad_n_eff(&[1.0], &[0.0]),
            Err(Error::UndefinedGradient)
        ));
    }

    #[test]
    fn update_examples() {
        let fp = Footprint {
            pixels: vec![0],
            weights: vec![1.0],
        };
        let mut s = vec![0.5];
        local_update(&mut s, &fp, Some(1.0), 0.1);
        assert!((s[0] - 0.6).abs() < 1e-15);

        let mut s = vec![2.0];
        local_update(&mut s, &fp, Some(2.0), 0.1);
        assert_eq!(s, vec![2.0]);

        let fp2 = Footprint {
            pixels: vec![0, 2],
            weights: vec![1.0, 0.5],
        };
        let mut s = vec![1.0, 7.0, 1.0];
        local_update(&mut s, &fp2, None, 0.1);
        assert_eq!(s, vec![0.0, 7.0, 0.0]);
    }

    #[test]
    fn isolated_single_emitter_is_recovered() {
        let shape = GridShape::new(20, 20, 200.0).unwrap();
        let mut truth = OccupancyGrid::zeros(shape);
        truth.set(6, 13, 1);
        let geo = ScanGeometry::default();
        let map = scan_map_analytic(&truth, &geo).unwrap();
        let res = reconstruct(&map, &geo, &ReconstructionConfig::default()).unwrap();
        assert_eq!(res.integer_counts, truth);
        assert!(res.converged);
    }

    #[test]
    fn all_undefined_map_gives_zeros() {
        let shape = GridShape::new(10, 10, 200.0).unwrap();
        let geo = ScanGeometry::default();
        let map = scan_map_analytic(&OccupancyGrid::zeros(shape), &geo).unwrap();
        for init in [InitStrategy::Zeros, InitStrategy::UniformFromMap] {
            let cfg = ReconstructionConfig {
                init_strategy: init,
                ..Default::default()
            };
            let res = reconstruct(&map, &geo, &cfg).unwrap();
            assert!(res.converged);
            assert_eq!(res.sweeps_used, 1);
            assert!(res.continuous_counts.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let shape = GridShape::new(10, 10, 200.0).unwrap();
        let map =
            scan_map_analytic(&OccupancyGrid::zeros(shape), &ScanGeometry::default()).unwrap();
        let other = ScanGeometry::from_radius(600.0, 200.0);
        assert!(matches!(
            reconstruct(&map, &other, &ReconstructionConfig::default()),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn error_metric_examples() {
        let shape = GridShape::new(2, 1, 200.0).unwrap();
        let g = |c: Vec<u32>| OccupancyGrid::from_counts(shape, c).unwrap();
        assert_eq!(
            reconstruction_error(&g(vec![1, 3]), &g(vec![1, 3])).unwrap(),
            0.0
        );
        assert_eq!(
            reconstruction_error(&g(vec![2, 0]), &g(vec![1, 0])).unwrap(),
            50.0
        );
        assert_eq!(
            reconstruction_error(&g(vec![1, 1]), &g(vec![0, 2])).unwrap(),
            100.0
        );
        assert_eq!(
            reconstruction_error(&g(vec![0, 0]), &g(vec![0, 1])).unwrap(),
            100.0
        );
        let other = OccupancyGrid::zeros(GridShape::new(1, 2, 200.0).unwrap());
        assert!(reconstruction_error(&g(vec![0, 0]), &other).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(0.5), 1);
        assert_eq!(round_half_up(1.4999), 1);
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(0.0), 0);
    }

    #[test]
    fn fixed_point_sweep_is_bit_identical() {
        let mut rng = RngSeed(77).rng();
        let truth = crate::field_model::random_field(12, 12, 200.0, 15, 3, &mut rng).unwrap();
        let geo = ScanGeometry::default();
        let map = scan_map_analytic(&truth, &geo).unwrap();
        let footprints = scan_footprints(&truth.shape(), &geo);
        let n_meas: Vec<Option<f64>> = map
            .values
            .iter()
            .map(|&g| (!g.is_nan()).then(|| n_meas_from_g2(g)))
            .collect();
        let mut state: Vec<f64> = truth.counts.iter().map(|&c| c as f64).collect();
        let before = state.clone();
        for (fp, nm) in footprints.iter().zip(&n_meas) {
            local_update(&mut state, fp, *nm, 0.05);
        }
        assert_eq!(state, before);
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            weights in proptest::collection::vec(0.05f64..=1.0, 1..14),
            seed in any::<u64>(),
        ) {
            let mut rng = RngSeed(seed).rng();
            let counts: Vec<f64> = weights.iter().map(|_| rng.random_range(0.2..4.0)).collect();
            let g = grad_n_eff(&weights, &counts).unwrap();
            let fd = fd_gradient(&weights, &counts, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3), "{} vs {}", a, b);
            }
        }

        #[test]
        fn small_steps_do_not_increase_local_loss(
            weights in proptest::collection::vec(0.05f64..=1.0, 2..14),
            seed in any::<u64>(),
            n_meas in 1.0f64..8.0,
        ) {
            let mut rng = RngSeed(seed).rng();
            let mut state: Vec<f64> = weights.iter().map(|_| rng.random_range(0.0..3.0)).collect();
            state[0] += 0.1;
            let fp = Footprint { pixels: (0..weights.len()).collect(), weights: weights.clone() };
            let before = position_loss(&fp, &state, n_meas);
            local_update(&mut state, &fp, Some(n_meas), 1e-3);
            prop_assert!(state.iter().all(|&x| x >= 0.0));
            prop_assert!(position_loss(&fp, &state, n_meas) <= before + 1e-12);
        }
    }
}
