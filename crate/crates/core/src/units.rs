//! Physical quantities and the two elementary conversions every accounting
//! step is built from: power x time -> energy, energy x intensity -> emissions.
//!
//! All values are stored in base units (seconds, watts, kWh, kg, kg/kWh).
//! Constructors reject negative or non-finite values, so operations on
//! already-built values cannot fail.

use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const JOULES_PER_KWH: f64 = 3_600_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{quantity} must be a finite non-negative number, got {value}")]
pub struct UnitError {
    pub quantity: &'static str,
    pub value: f64,
}

fn check(quantity: &'static str, value: f64) -> Result<f64, UnitError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(UnitError { quantity, value })
    }
}

macro_rules! scalar_unit {
    ($(#[$doc:meta])* $name:ident, $label:literal, $suffix:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
        #[serde(try_from = "f64", into = "f64")]
        pub struct $name(f64);

        impl $name {
            pub const ZERO: Self = Self(0.0);

            pub fn new(value: f64) -> Result<Self, UnitError> {
                check($label, value).map(Self)
            }

            pub fn value(self) -> f64 {
                self.0
            }
        }

        impl TryFrom<f64> for $name {
            type Error = UnitError;

            fn try_from(value: f64) -> Result<Self, UnitError> {
                Self::new(value)
            }
        }

        impl From<$name> for f64 {
            fn from(v: $name) -> f64 {
                v.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{} {}", self.0, $suffix)
            }
        }
    };
}

scalar_unit!(
    /// Energy in kilowatt-hours.
    EnergyKwh,
    "energy (kWh)",
    "kWh"
);
scalar_unit!(
    /// Emissions in kilograms of CO2-equivalent.
    EmissionsKg,
    "emissions (kg CO2e)",
    "kg CO2e"
);
scalar_unit!(
    /// Grid carbon intensity in kg CO2e per kWh.
    CarbonIntensity,
    "carbon intensity (kg/kWh)",
    "kg/kWh"
);
scalar_unit!(
    /// A span of simulated time in seconds.
    SimDuration,
    "duration (s)",
    "s"
);

impl Add for EnergyKwh {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl Add for EmissionsKg {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl Add for SimDuration {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl std::iter::Sum for EnergyKwh {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, Add::add)
    }
}

impl std::iter::Sum for EmissionsKg {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, Add::add)
    }
}

impl SimDuration {
    pub fn seconds(self) -> f64 {
        self.0
    }

    pub fn minutes(self) -> f64 {
        self.0 / 60.0
    }
}

impl EnergyKwh {
    /// Scales by a non-negative factor.
    pub fn scaled(self, k: f64) -> Result<Self, UnitError> {
        Self::new(self.0 * k)
    }

    pub fn joules(self) -> f64 {
        self.0 * JOULES_PER_KWH
    }
}

/// Instantaneous power split by component, in watts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerDrawW {
    cpu_w: f64,
    gpu_w: f64,
    ram_w: f64,
}

impl PowerDrawW {
    pub const ZERO: Self = Self {
        cpu_w: 0.0,
        gpu_w: 0.0,
        ram_w: 0.0,
    };

    pub fn new(cpu_w: f64, gpu_w: f64, ram_w: f64) -> Result<Self, UnitError> {
        Ok(Self {
            cpu_w: check("cpu power (W)", cpu_w)?,
            gpu_w: check("gpu power (W)", gpu_w)?,
            ram_w: check("ram power (W)", ram_w)?,
        })
    }

    pub fn cpu_w(&self) -> f64 {
        self.cpu_w
    }

    pub fn gpu_w(&self) -> f64 {
        self.gpu_w
    }

    pub fn ram_w(&self) -> f64 {
        self.ram_w
    }

    pub fn total_w(&self) -> f64 {
        self.cpu_w + self.gpu_w + self.ram_w
    }

    /// Every component multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Self, UnitError> {
        Self::new(self.cpu_w * k, self.gpu_w * k, self.ram_w * k)
    }

    /// Re-checks the invariants; used after deserialization.
    pub fn validate(&self) -> Result<(), UnitError> {
        Self::new(self.cpu_w, self.gpu_w, self.ram_w).map(|_| ())
    }
}

/// Energy drawn at constant `power` for `duration`.
pub fn energy_of(power: PowerDrawW, duration: SimDuration) -> EnergyKwh {
    EnergyKwh(power.total_w() * duration.0 / JOULES_PER_KWH)
}

/// Emissions caused by `energy` on a grid with intensity `ci`.
pub fn emissions_of(energy: EnergyKwh, ci: CarbonIntensity) -> EmissionsKg {
    EmissionsKg(energy.0 * ci.0)
}
