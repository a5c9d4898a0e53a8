use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use g2recon::{
    CorrelationConfig, EmitterPhysics, ReconstructionConfig, RngSeed, ScanGeometry, ScanMode,
};
use serde::{Deserialize, Serialize};

/// Settings shared by every command. Missing keys fall back to defaults,
/// unknown keys are rejected.
///
/// ```json
/// {
///   "physics": {"lifetime_ns": 14, "reexcitation_rate_per_ns": 0.0714, "acquisition_ns": 1e8},
///   "correlation": {"bin_width_ns": 1, "max_lag_ns": 100},
///   "geometry": {"spot_radius_nm": 400, "sigma_nm": 200, "step_nm": 200},
///   "reconstruction": {"learning_rate": 0.02, "max_sweeps": 500,
///                      "loss_tolerance": 1e-4, "init_strategy": "zeros"},
///   "seed": 2025,
///   "mode": "analytic"
/// }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub physics: EmitterPhysics,
    pub correlation: CorrelationConfig,
    /// `None` when the file does not pin a geometry, so commands reading a
    /// map can take the one recorded beside it.
    pub geometry: Option<ScanGeometry>,
    pub reconstruction: ReconstructionConfig,
    pub seed: RngSeed,
    pub mode: ScanMode,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        self.correlation.validate()?;
        self.reconstruction.validate()?;
        self.geometry().validate()?;
        Ok(())
    }

    pub fn geometry(&self) -> ScanGeometry {
        self.geometry.unwrap_or_default()
    }

    pub fn with_overrides(mut self, seed: Option<u64>, mode: Option<ScanMode>) -> Self {
        if let Some(seed) = seed {
            self.seed = RngSeed(seed);
        }
        if let Some(mode) = mode {
            self.mode = mode;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.geometry(), ScanGeometry::default());
        assert_eq!(c.seed, RngSeed(2025));
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"physics": {"lifetime_ns": 10}, "mode": "sampled"}"#).unwrap();
        assert_eq!(c.physics.lifetime_ns, 10.0);
        assert_eq!(
            c.physics.reexcitation_rate_per_ns,
            EmitterPhysics::default().reexcitation_rate_per_ns
        );
        assert_eq!(c.mode, ScanMode::Sampled);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"physics": {"tau": 1}}"#).is_err());
    }

    #[test]
    fn flags_override_file() {
        let c = RunConfig::default().with_overrides(Some(7), Some(ScanMode::Sampled));
        assert_eq!((c.seed, c.mode), (RngSeed(7), ScanMode::Sampled));
        let c = c.with_overrides(None, None);
        assert_eq!(c.seed, RngSeed(7));
    }
}
