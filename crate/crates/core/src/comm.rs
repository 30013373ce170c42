//! Communication energy and emissions estimated from transmitted update sizes:
//! `E = 2 * D_GB * I_net`, `C = E * F_grid`.

use serde::{Deserialize, Serialize};

use crate::site::GridRegion;
use crate::units::{emissions_of, CarbonIntensity, EmissionsKg, EnergyKwh, UnitError};

pub const BYTES_PER_GB: f64 = 1e9;

/// Default network intensity. An assumption, not a measured constant.
pub const DEFAULT_NET_INTENSITY_KWH_PER_GB: f64 = 0.006;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommEnergyModel {
    net_intensity_kwh_per_gb: f64,
}

impl CommEnergyModel {
    /// Upload and download of every update.
    pub const BIDIRECTIONAL_FACTOR: f64 = 2.0;

    pub fn new(net_intensity_kwh_per_gb: f64) -> Result<Self, UnitError> {
        if net_intensity_kwh_per_gb.is_finite() && net_intensity_kwh_per_gb >= 0.0 {
            Ok(Self {
                net_intensity_kwh_per_gb,
            })
        } else {
            Err(UnitError {
                quantity: "network intensity (kWh/GB)",
                value: net_intensity_kwh_per_gb,
            })
        }
    }

    pub fn net_intensity(&self) -> f64 {
        self.net_intensity_kwh_per_gb
    }
}

impl Default for CommEnergyModel {
    fn default() -> Self {
        Self {
            net_intensity_kwh_per_gb: DEFAULT_NET_INTENSITY_KWH_PER_GB,
        }
    }
}

/// Which grid the communication energy is charged to.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", deny_unknown_fields)]
pub enum AttributionPolicy {
    /// The sending client's region.
    #[default]
    Client,
    /// A single server region for all traffic.
    Server { region: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdatePayload {
    pub site_id: String,
    pub round_index: u32,
    pub bytes: u64,
}

impl UpdatePayload {
    pub fn gigabytes(&self) -> f64 {
        self.bytes as f64 / BYTES_PER_GB
    }
}

pub fn comm_energy(payload: &UpdatePayload, model: &CommEnergyModel) -> EnergyKwh {
    comm_energy_bytes(payload.bytes, model)
}

pub fn comm_energy_bytes(bytes: u64, model: &CommEnergyModel) -> EnergyKwh {
    let kwh = CommEnergyModel::BIDIRECTIONAL_FACTOR * (bytes as f64 / BYTES_PER_GB)
        * model.net_intensity_kwh_per_gb;
    EnergyKwh::new(kwh).unwrap_or(EnergyKwh::ZERO)
}

pub fn comm_emissions(energy: EnergyKwh, grid: &GridRegion) -> EmissionsKg {
    emissions_of(energy, grid.ci)
}

/// Sum over one round's payloads; `grid_for` resolves the grid charged for each site.
pub fn round_comm_total<'a>(
    payloads: &[UpdatePayload],
    model: &CommEnergyModel,
    mut grid_for: impl FnMut(&str) -> &'a GridRegion,
) -> (EnergyKwh, EmissionsKg) {
    payloads
        .iter()
        .fold((EnergyKwh::ZERO, EmissionsKg::ZERO), |(e, c), p| {
            let energy = comm_energy(p, model);
            (e + energy, c + comm_emissions(energy, grid_for(&p.site_id)))
        })
}

/// Intensity charged for traffic sent by a client whose own grid is `client_ci`.
pub fn attributed_ci(
    policy: &AttributionPolicy,
    client_ci: CarbonIntensity,
    server_ci: Option<CarbonIntensity>,
) -> CarbonIntensity {
    match policy {
        AttributionPolicy::Client => client_ci,
        AttributionPolicy::Server { .. } => server_ci.unwrap_or(client_ci),
    }
}
