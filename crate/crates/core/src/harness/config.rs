use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ue_assist::TimingMode;

/// How range measurements are produced in networked trials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Exact range plus Gaussian noise with std `Δr / 6`.
    Fast,
    /// Full CSI synthesis followed by the range periodogram.
    Csi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkedConfig {
    pub seed: u64,
    pub trials: usize,
    #[serde(default = "default_radius")]
    pub detection_radius: f64,
    /// Store wall-clock time per trial in the output (breaks byte-identical reruns).
    #[serde(default)]
    pub record_runtime: bool,
    /// Hz
    pub bandwidths: Vec<f64>,
    pub target_counts: Vec<usize>,
    #[serde(default = "default_num_bs")]
    pub num_bs: usize,
    /// Stations sit evenly on a circle of this radius around the origin, meters.
    #[serde(default = "default_bs_ring")]
    pub bs_ring_radius: f64,
    /// Targets are uniform in `[-h, h]²`, meters.
    #[serde(default = "default_half_width")]
    pub region_half_width: f64,
    #[serde(default = "default_noise_mode")]
    pub noise_mode: NoiseMode,
    /// Per-sample SNR of a unit path in CSI mode, dB.
    #[serde(default = "default_snr")]
    pub snr_db: f64,
    #[serde(default = "default_antennas")]
    pub num_antennas: usize,
    #[serde(default = "default_subcarriers")]
    pub num_subcarriers: usize,
    #[serde(default = "default_symbols")]
    pub num_symbols: usize,
    #[serde(default = "default_carrier")]
    pub carrier_frequency: f64,
    /// Range noise std as a fraction of the resolution `Δr`.
    #[serde(default = "default_range_noise_fraction")]
    pub range_noise_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UeSelectionConfig {
    pub seed: u64,
    pub trials: usize,
    #[serde(default = "default_radius")]
    pub detection_radius: f64,
    #[serde(default)]
    pub record_runtime: bool,
    /// Sweep over the number of UEs with badly wrong reported positions.
    pub erroneous_counts: Vec<usize>,
    #[serde(default = "default_accurate")]
    pub num_accurate: usize,
    /// meters
    #[serde(default = "default_accurate_std")]
    pub accurate_std: f64,
    /// meters
    #[serde(default = "default_erroneous_std")]
    pub erroneous_std: f64,
    /// seconds
    #[serde(default = "default_delay_noise")]
    pub delay_noise_std: f64,
    /// Offsets are uniform in `[0, max]`, seconds.
    #[serde(default = "default_max_offset")]
    pub max_timing_offset: f64,
    #[serde(default = "default_timing")]
    pub timing: TimingMode,
    /// UEs are placed in an annulus around the target, meters.
    #[serde(default = "default_ue_inner")]
    pub ue_inner_radius: f64,
    #[serde(default = "default_ue_outer")]
    pub ue_outer_radius: f64,
    /// Half-width of the angular sector (around the target→BS direction)
    /// holding the UEs, degrees.
    #[serde(default = "default_sector")]
    pub ue_sector_half_width_deg: f64,
    /// Distance between the BS and the target, meters.
    #[serde(default = "default_target_distance")]
    pub target_distance: f64,
    /// Add the BS's own round-trip range as an anchor that is never removed.
    #[serde(default = "default_true")]
    pub include_monostatic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Networked(NetworkedConfig),
    UeSelection(UeSelectionConfig),
}

fn default_true() -> bool {
    true
}
fn default_radius() -> f64 {
    1.0
}
fn default_num_bs() -> usize {
    5
}
fn default_bs_ring() -> f64 {
    80.0
}
fn default_half_width() -> f64 {
    50.0
}
fn default_noise_mode() -> NoiseMode {
    NoiseMode::Csi
}
fn default_snr() -> f64 {
    10.0
}
fn default_antennas() -> usize {
    4
}
fn default_subcarriers() -> usize {
    1024
}
fn default_symbols() -> usize {
    4
}
fn default_carrier() -> f64 {
    28e9
}
fn default_range_noise_fraction() -> f64 {
    1.0 / 6.0
}
fn default_accurate() -> usize {
    5
}
fn default_accurate_std() -> f64 {
    0.1
}
fn default_erroneous_std() -> f64 {
    10.0
}
fn default_delay_noise() -> f64 {
    0.1e-9
}
fn default_max_offset() -> f64 {
    50e-9
}
fn default_timing() -> TimingMode {
    TimingMode::LosCalibration
}
fn default_ue_inner() -> f64 {
    15.0
}
fn default_ue_outer() -> f64 {
    45.0
}
fn default_sector() -> f64 {
    90.0
}
fn default_target_distance() -> f64 {
    100.0
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invariant(field, format!("must be positive, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invariant(field, format!("must be nonnegative, got {v}")))
    }
}

impl NetworkedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invariant("trials", "must be at least 1"));
        }
        if self.bandwidths.is_empty() {
            return Err(Error::invariant("bandwidths", "sweep list is empty"));
        }
        if self.target_counts.is_empty() {
            return Err(Error::invariant("target_counts", "sweep list is empty"));
        }
        if self.target_counts.contains(&0) {
            return Err(Error::invariant("target_counts", "counts must be at least 1"));
        }
        if self.num_bs < 3 {
            return Err(Error::invariant("num_bs", "need at least 3 stations"));
        }
        for b in &self.bandwidths {
            positive("bandwidths", *b)?;
        }
        positive("detection_radius", self.detection_radius)?;
        positive("bs_ring_radius", self.bs_ring_radius)?;
        positive("region_half_width", self.region_half_width)?;
        positive("carrier_frequency", self.carrier_frequency)?;
        nonnegative("range_noise_fraction", self.range_noise_fraction)?;
        if !self.snr_db.is_finite() && self.snr_db != f64::INFINITY {
            return Err(Error::invariant("snr_db", "must be a number"));
        }
        if self.num_antennas == 0 || self.num_symbols == 0 {
            return Err(Error::invariant("num_antennas", "antennas and symbols must be at least 1"));
        }
        let k_max = self.target_counts.iter().copied().max().unwrap_or(1);
        if self.num_subcarriers <= 2 * k_max {
            return Err(Error::invariant("num_subcarriers", "too few subcarriers for the target counts"));
        }
        Ok(())
    }
}

impl UeSelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invariant("trials", "must be at least 1"));
        }
        if self.erroneous_counts.is_empty() {
            return Err(Error::invariant("erroneous_counts", "sweep list is empty"));
        }
        if self.num_accurate < 3 {
            return Err(Error::invariant("num_accurate", "need at least 3 accurate UEs"));
        }
        positive("detection_radius", self.detection_radius)?;
        nonnegative("accurate_std", self.accurate_std)?;
        nonnegative("erroneous_std", self.erroneous_std)?;
        nonnegative("delay_noise_std", self.delay_noise_std)?;
        nonnegative("max_timing_offset", self.max_timing_offset)?;
        positive("ue_inner_radius", self.ue_inner_radius)?;
        positive("target_distance", self.target_distance)?;
        if self.ue_outer_radius < self.ue_inner_radius {
            return Err(Error::invariant("ue_outer_radius", "must not be below ue_inner_radius"));
        }
        if !(0.0..=180.0).contains(&self.ue_sector_half_width_deg) {
            return Err(Error::invariant("ue_sector_half_width_deg", "must lie in [0, 180]"));
        }
        if self.timing == TimingMode::JointMl {
            return Err(Error::invariant("timing", "joint estimation needs several targets; use synchronized or los_calibration"));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentConfig::Networked(c) => c.validate(),
            ExperimentConfig::UeSelection(c) => c.validate(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentConfig::Networked(c) => c.seed,
            ExperimentConfig::UeSelection(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::Networked(c) => c.seed = seed,
            ExperimentConfig::UeSelection(c) => c.seed = seed,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_str(&text)
    }
}
