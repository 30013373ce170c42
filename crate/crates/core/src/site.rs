//! Client hardware profiles, efficiency tiers and grid regions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tracker::PhaseKind;
use crate::units::{CarbonIntensity, EnergyKwh, PowerDrawW, SimDuration, UnitError};

/// Runtime ratio between the V100 and H100 retinal segmentation runs
/// (503.02 min vs 290.02 min, site 1).
pub const V100_H100_RUNTIME_RATIO: f64 = 503.02 / 290.02;

const TIER_PRESETS_JSON: &str = include_str!("../configs/tier_presets.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SiteError {
    #[error("hardware profile `{name}`: {reason}")]
    InvalidProfile { name: String, reason: String },
    #[error("tier `{label}`: {reason}")]
    InvalidTier { label: String, reason: String },
    #[error(transparent)]
    Unit(#[from] UnitError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    pub train_power: PowerDrawW,
    pub idle_power: PowerDrawW,
    /// One-time startup energy charged to the `init` span.
    pub init_spike_energy: EnergyKwh,
    /// Training steps per simulated second.
    pub throughput: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), SiteError> {
        let bad = |reason: &str| {
            Err(SiteError::InvalidProfile {
                name: self.name.clone(),
                reason: reason.into(),
            })
        };
        self.train_power.validate()?;
        self.idle_power.validate()?;
        if !(self.throughput.is_finite() && self.throughput > 0.0) {
            return bad("throughput must be > 0");
        }
        if self.idle_power.total_w() > self.train_power.total_w() {
            return bad("idle power exceeds training power");
        }
        Ok(())
    }

    /// Length of the init span: the spike energy drawn at training power.
    pub fn init_duration(&self) -> SimDuration {
        let w = self.train_power.total_w();
        if w == 0.0 {
            return SimDuration::ZERO;
        }
        SimDuration::new(self.init_spike_energy.joules() / w).unwrap_or(SimDuration::ZERO)
    }

    /// The same profile with throughput divided by `ratio`.
    pub fn slower_by(&self, name: &str, ratio: f64) -> Self {
        Self {
            name: name.into(),
            throughput: self.throughput / ratio,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierLabel {
    High,
    Medium,
    Low,
}

impl TierLabel {
    pub const ALL: [TierLabel; 3] = [TierLabel::High, TierLabel::Medium, TierLabel::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            TierLabel::High => "high",
            TierLabel::Medium => "medium",
            TierLabel::Low => "low",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl std::fmt::Display for TierLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyTier {
    pub label: TierLabel,
    /// Multiplier on training duration, >= 1.
    pub slowdown_factor: f64,
    /// Multiplier on training and evaluation power, > 0.
    pub power_scale: f64,
}

impl EfficiencyTier {
    pub fn high() -> Self {
        Self {
            label: TierLabel::High,
            slowdown_factor: 1.0,
            power_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SiteError> {
        let bad = |reason: &str| {
            Err(SiteError::InvalidTier {
                label: self.label.to_string(),
                reason: reason.into(),
            })
        };
        if !(self.slowdown_factor.is_finite() && self.slowdown_factor >= 1.0) {
            return bad("slowdown_factor must be >= 1");
        }
        if !(self.power_scale.is_finite() && self.power_scale > 0.0) {
            return bad("power_scale must be > 0");
        }
        if self.label == TierLabel::High && (self.slowdown_factor != 1.0 || self.power_scale != 1.0)
        {
            return bad("the high tier is the unscaled reference");
        }
        Ok(())
    }
}

/// Tier presets as stored on disk (`tier_presets.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierPresets {
    pub tiers: BTreeMap<TierLabel, EfficiencyTier>,
}

impl TierPresets {
    pub fn get(&self, label: TierLabel) -> Option<EfficiencyTier> {
        self.tiers.get(&label).copied()
    }

    pub fn validate(&self) -> Result<(), SiteError> {
        for (label, tier) in &self.tiers {
            if *label != tier.label {
                return Err(SiteError::InvalidTier {
                    label: label.to_string(),
                    reason: format!("entry carries label `{}`", tier.label),
                });
            }
            tier.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRegion {
    pub code: String,
    pub ci: CarbonIntensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub site_id: String,
    pub hardware: HardwareProfile,
    pub tier: EfficiencyTier,
    pub region: GridRegion,
    /// Informational share of the dataset this site is expected to hold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_fraction: Option<f64>,
}

/// Simulated time for `steps` training steps: `steps / throughput * slowdown`.
pub fn effective_train_duration(
    profile: &HardwareProfile,
    tier: &EfficiencyTier,
    steps: f64,
) -> SimDuration {
    SimDuration::new(steps / profile.throughput * tier.slowdown_factor).unwrap_or(SimDuration::ZERO)
}

/// Power drawn during `phase`. Idle draw ignores the tier's power scale.
pub fn effective_power(
    profile: &HardwareProfile,
    tier: &EfficiencyTier,
    phase: PhaseKind,
) -> PowerDrawW {
    match phase {
        PhaseKind::Round(_) | PhaseKind::Evaluate(_) => profile
            .train_power
            .scaled(tier.power_scale)
            .unwrap_or(profile.train_power),
        PhaseKind::Idle(_) => profile.idle_power,
        PhaseKind::Init => profile.train_power,
    }
}

/// Named presets shipped with the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Presets {
    pub hardware: BTreeMap<String, HardwareProfile>,
    pub tiers: TierPresets,
    pub regions: BTreeMap<String, CarbonIntensity>,
}

fn watts(cpu: f64, gpu: f64, ram: f64) -> PowerDrawW {
    PowerDrawW::new(cpu, gpu, ram).expect("preset power")
}

fn kwh(v: f64) -> EnergyKwh {
    EnergyKwh::new(v).expect("preset energy")
}

fn builtin_hardware() -> BTreeMap<String, HardwareProfile> {
    // Desk-scale client for the CIFAR-style tier scenarios; sized so the
    // high tier lands near 0.75 min and 6.2e-5 kWh per site-round.
    let cifar = HardwareProfile {
        name: "cifar_client".into(),
        train_power: watts(23.0, 42.0, 5.0),
        idle_power: watts(4.0, 3.0, 1.0),
        init_spike_energy: kwh(0.000_012),
        throughput: 990.0,
    };
    // Retinal segmentation clients; throughput is in steps of the synthetic
    // stand-in workload.
    let h100 = HardwareProfile {
        name: "h100_like".into(),
        train_power: watts(18.0, 50.0, 6.0),
        idle_power: watts(8.0, 10.0, 4.0),
        init_spike_energy: kwh(0.000_5),
        throughput: 0.32,
    };
    let mut v100 = h100.slower_by("v100_like", V100_H100_RUNTIME_RATIO);
    v100.train_power = watts(14.0, 26.0, 5.0);
    v100.idle_power = watts(7.0, 6.0, 4.0);
    // Keep the init span length proportional to the throughput ratio.
    let h100_init_s = h100.init_duration().seconds();
    v100.init_spike_energy =
        kwh(h100_init_s * V100_H100_RUNTIME_RATIO * v100.train_power.total_w() / 3_600_000.0);

    [cifar, h100, v100]
        .into_iter()
        .map(|p| (p.name.clone(), p))
        .collect()
}

/// Illustrative annual-average grid intensities (kg CO2e/kWh).
fn builtin_regions() -> BTreeMap<String, CarbonIntensity> {
    [
        ("AUS", 0.56),
        ("BRA", 0.10),
        ("CAN", 0.12),
        ("CHN", 0.58),
        ("DEU", 0.38),
        ("FRA", 0.056),
        ("GBR", 0.21),
        ("IND", 0.72),
        ("JPN", 0.46),
        ("POL", 0.78),
        ("SWE", 0.013),
        ("USA", 0.39),
    ]
    .into_iter()
    .map(|(code, ci)| (code.to_owned(), CarbonIntensity::new(ci).expect("preset ci")))
    .collect()
}

/// Tier values from the bundled calibration output.
pub fn builtin_tiers() -> TierPresets {
    serde_json::from_str(TIER_PRESETS_JSON).expect("bundled tier presets parse")
}

pub fn builtin_presets() -> Presets {
    Presets {
        hardware: builtin_hardware(),
        tiers: builtin_tiers(),
        regions: builtin_regions(),
    }
}

/// Default region when a site names none.
pub const DEFAULT_REGION: &str = "USA";
