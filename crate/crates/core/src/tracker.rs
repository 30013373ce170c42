//! Phase-aware emissions ledger.
//!
//! Each site owns a timeline of named task spans (`init`, `round`,
//! `evaluate`, `idle_time`). A span is opened with [`EmissionsTracker::start_task`]
//! and closed with [`EmissionsTracker::stop_task`], which integrates energy
//! over simulated sampling quanta and stamps the record with the grid
//! intensity in force at that moment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{
    emissions_of, energy_of, CarbonIntensity, EmissionsKg, EnergyKwh, PowerDrawW, SimDuration,
    UnitError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackerError {
    #[error("site `{0}` already has an open span")]
    OverlappingSpan(String),
    #[error("site `{0}` already recorded an init span")]
    DuplicateInit(String),
    #[error("stop time {at} s precedes span start {start} s")]
    ClockRegression { start: f64, at: f64 },
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("site `{0}` has an open span")]
    OpenSpanPending(String),
    #[error("span handle does not match the open span of site `{0}`")]
    StaleHandle(String),
    #[error("round index must be >= 1")]
    InvalidRoundIndex,
    #[error(transparent)]
    Unit(#[from] UnitError),
}

/// Which task a span measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhaseKind {
    Init,
    Idle(u32),
    Round(u32),
    Evaluate(u32),
}

impl PhaseKind {
    /// Round index, 0 for `Init`.
    pub fn round_index(self) -> u32 {
        match self {
            PhaseKind::Init => 0,
            PhaseKind::Idle(r) | PhaseKind::Round(r) | PhaseKind::Evaluate(r) => r,
        }
    }

    /// Task name as written to round logs.
    pub fn task_name(self) -> &'static str {
        match self {
            PhaseKind::Init => "init",
            PhaseKind::Idle(_) => "idle_time",
            PhaseKind::Round(_) => "round",
            PhaseKind::Evaluate(_) => "evaluate",
        }
    }

    /// Rebuilds a phase from its task name and round index.
    pub fn from_parts(name: &str, round: u32) -> Option<Self> {
        let phase = match name {
            "init" if round == 0 => PhaseKind::Init,
            "idle_time" => PhaseKind::Idle(round),
            "round" => PhaseKind::Round(round),
            "evaluate" => PhaseKind::Evaluate(round),
            _ => return None,
        };
        phase.is_valid().then_some(phase)
    }

    fn is_valid(self) -> bool {
        matches!(self, PhaseKind::Init) || self.round_index() >= 1
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseKind::Init => f.write_str("init"),
            PhaseKind::Round(r) => write!(f, "round_{r}"),
            other => write!(f, "{}[{}]", other.task_name(), other.round_index()),
        }
    }
}

/// Length of one simulated power-sampling quantum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SamplingPolicy {
    interval: SimDuration,
}

impl SamplingPolicy {
    pub fn new(interval_s: f64) -> Result<Self, UnitError> {
        let interval = SimDuration::new(interval_s)?;
        if interval.seconds() == 0.0 {
            return Err(UnitError {
                quantity: "sampling interval (s)",
                value: interval_s,
            });
        }
        Ok(Self { interval })
    }

    pub fn interval(&self) -> SimDuration {
        self.interval
    }

    /// Energy over `duration` at constant `power`: whole quanta first, then
    /// the trailing partial quantum pro-rated.
    pub fn integrate(&self, power: PowerDrawW, duration: SimDuration) -> EnergyKwh {
        let q = self.interval.seconds();
        let d = duration.seconds();
        let full = (d / q).floor();
        let remainder = (d - full * q).max(0.0);
        let per_quantum = energy_of(power, self.interval).value();
        let tail = energy_of(power, SimDuration::new(remainder).unwrap_or(SimDuration::ZERO));
        EnergyKwh::new(full * per_quantum + tail.value()).unwrap_or(EnergyKwh::ZERO)
    }
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            interval: SimDuration::new(1.0).expect("positive"),
        }
    }
}

impl TryFrom<f64> for SamplingPolicy {
    type Error = UnitError;

    fn try_from(v: f64) -> Result<Self, UnitError> {
        Self::new(v)
    }
}

impl From<SamplingPolicy> for f64 {
    fn from(p: SamplingPolicy) -> f64 {
        p.interval.seconds()
    }
}

/// One closed span with its energy and emissions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionsRecord {
    pub site_id: String,
    pub phase: PhaseKind,
    pub start: SimDuration,
    pub duration: SimDuration,
    pub energy: EnergyKwh,
    pub co2e: EmissionsKg,
    pub ci: CarbonIntensity,
}

impl EmissionsRecord {
    pub fn end_s(&self) -> f64 {
        self.start.seconds() + self.duration.seconds()
    }
}

/// Handle to an open span, returned by `start_task`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanHandle {
    site_id: String,
    serial: u64,
}

impl SpanHandle {
    pub fn site_id(&self) -> &str {
        &self.site_id
    }
}

#[derive(Debug, Clone)]
struct OpenSpan {
    serial: u64,
    phase: PhaseKind,
    start: SimDuration,
}

#[derive(Debug, Clone, Default)]
struct SiteLedger {
    records: Vec<EmissionsRecord>,
    open: Option<OpenSpan>,
    has_init: bool,
}

impl SiteLedger {
    fn last_end(&self) -> f64 {
        self.records.last().map_or(0.0, EmissionsRecord::end_s)
    }
}

/// Per-run ledger of task spans, keyed by site.
#[derive(Debug, Clone, Default)]
pub struct EmissionsTracker {
    sampling: SamplingPolicy,
    sites: BTreeMap<String, SiteLedger>,
    next_serial: u64,
}

impl EmissionsTracker {
    pub fn new(sampling: SamplingPolicy) -> Self {
        Self {
            sampling,
            sites: BTreeMap::new(),
            next_serial: 0,
        }
    }

    pub fn sampling(&self) -> SamplingPolicy {
        self.sampling
    }

    /// Makes `site_id` known so that its (possibly empty) ledger can be read.
    pub fn register_site(&mut self, site_id: &str) {
        self.sites.entry(site_id.to_owned()).or_default();
    }

    pub fn start_task(
        &mut self,
        site_id: &str,
        phase: PhaseKind,
        at: SimDuration,
    ) -> Result<SpanHandle, TrackerError> {
        if !phase.is_valid() {
            return Err(TrackerError::InvalidRoundIndex);
        }
        let ledger = self.sites.entry(site_id.to_owned()).or_default();
        if ledger.open.is_some() || at.seconds() < ledger.last_end() {
            return Err(TrackerError::OverlappingSpan(site_id.to_owned()));
        }
        if phase == PhaseKind::Init && ledger.has_init {
            return Err(TrackerError::DuplicateInit(site_id.to_owned()));
        }
        let serial = self.next_serial;
        self.next_serial += 1;
        ledger.open = Some(OpenSpan {
            serial,
            phase,
            start: at,
        });
        Ok(SpanHandle {
            site_id: site_id.to_owned(),
            serial,
        })
    }

    pub fn stop_task(
        &mut self,
        handle: &SpanHandle,
        at: SimDuration,
        power: PowerDrawW,
        ci: CarbonIntensity,
    ) -> Result<EmissionsRecord, TrackerError> {
        let sampling = self.sampling;
        let ledger = self
            .sites
            .get_mut(&handle.site_id)
            .ok_or_else(|| TrackerError::UnknownSite(handle.site_id.clone()))?;
        let open = match &ledger.open {
            Some(open) if open.serial == handle.serial => open.clone(),
            _ => return Err(TrackerError::StaleHandle(handle.site_id.clone())),
        };
        if at < open.start {
            return Err(TrackerError::ClockRegression {
                start: open.start.seconds(),
                at: at.seconds(),
            });
        }
        let duration = SimDuration::new(at.seconds() - open.start.seconds())?;
        let energy = sampling.integrate(power, duration);
        let record = EmissionsRecord {
            site_id: handle.site_id.clone(),
            phase: open.phase,
            start: open.start,
            duration,
            energy,
            co2e: emissions_of(energy, ci),
            ci,
        };
        ledger.open = None;
        ledger.has_init |= open.phase == PhaseKind::Init;
        ledger.records.push(record.clone());
        Ok(record)
    }

    /// Closed records of one site, in start-time order.
    pub fn ledger(&self, site_id: &str) -> Result<&[EmissionsRecord], TrackerError> {
        self.sites
            .get(site_id)
            .map(|l| l.records.as_slice())
            .ok_or_else(|| TrackerError::UnknownSite(site_id.to_owned()))
    }

    /// Element-wise sums of energy, emissions and measured time for one site.
    pub fn run_totals(
        &self,
        site_id: &str,
    ) -> Result<(EnergyKwh, EmissionsKg, SimDuration), TrackerError> {
        let ledger = self
            .sites
            .get(site_id)
            .ok_or_else(|| TrackerError::UnknownSite(site_id.to_owned()))?;
        if ledger.open.is_some() {
            return Err(TrackerError::OpenSpanPending(site_id.to_owned()));
        }
        Ok(ledger.records.iter().fold(
            (EnergyKwh::ZERO, EmissionsKg::ZERO, SimDuration::ZERO),
            |(e, c, d), r| (e + r.energy, c + r.co2e, d + r.duration),
        ))
    }

    pub fn site_ids(&self) -> impl Iterator<Item = &str> {
        self.sites.keys().map(String::as_str)
    }

    pub fn has_open_spans(&self) -> bool {
        self.sites.values().any(|l| l.open.is_some())
    }

    /// Every record of every site, sites in `order`, each ledger in time order.
    pub fn records_in_order<'a>(
        &'a self,
        order: impl IntoIterator<Item = &'a str>,
    ) -> Result<Vec<EmissionsRecord>, TrackerError> {
        let mut out = Vec::new();
        for site in order {
            out.extend_from_slice(self.ledger(site)?);
        }
        Ok(out)
    }
}

impl FromStr for PhaseKind {
    type Err = String;

    /// Parses the `Display` form (`init`, `round_3`, `idle_time[3]`, `evaluate[3]`).
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "init" {
            return Ok(PhaseKind::Init);
        }
        let parsed = if let Some(r) = s.strip_prefix("round_") {
            r.parse().ok().and_then(|r| PhaseKind::from_parts("round", r))
        } else {
            s.strip_suffix(']')
                .and_then(|body| body.split_once('['))
                .and_then(|(name, r)| PhaseKind::from_parts(name, r.parse().ok()?))
        };
        parsed.ok_or_else(|| format!("unrecognized phase `{s}`"))
    }
}
