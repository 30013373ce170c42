//! Synchronous FedAvg over a simulated clock.
//!
//! Learning and accounting are kept apart: [`train_round`] does the real
//! local training and aggregation and returns the work each client did
//! (steps, evaluation cost, payload size); [`account_round`] turns that work
//! into tracker spans using each site's hardware, tier and grid. Tiers and
//! hardware therefore never influence model parameters, and a recorded
//! [`RoundWork`] trace can be replayed under different site settings.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{comm_energy_bytes, AttributionPolicy, CommEnergyModel};
use crate::partition::ClientPartition;
use crate::rng::derive_seed;
use crate::site::{effective_power, effective_train_duration, GridRegion, SiteConfig, SiteError};
use crate::tracker::{EmissionsRecord, EmissionsTracker, PhaseKind, SamplingPolicy, TrackerError};
use crate::units::{emissions_of, EmissionsKg, EnergyKwh, SimDuration};
use crate::workload::{
    eval_step_equivalents, evaluate, local_train, update_payload_bytes, Dataset, ModelParams,
    TrainConfig, WorkloadError,
};

const TRAIN_STREAM: u64 = 0x006c_6f63_616c;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("invalid run plan: {0}")]
    InvalidPlan(String),
    #[error("no updates to aggregate")]
    EmptyUpdateSet,
    #[error("update {index} has shape {got}, expected {expected}")]
    ShapeMismatch {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("sample counts sum to zero")]
    ZeroTotalWeight,
    #[error("round {round} is past the planned {planned} rounds")]
    RoundOutOfRange { round: u32, planned: u32 },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Site(#[from] SiteError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub num_rounds: u32,
    pub sites: Vec<SiteConfig>,
    pub train_cfg: TrainConfig,
    pub evaluate_each_round: bool,
    pub sampling: SamplingPolicy,
    pub comm: CommEnergyModel,
    pub attribution: AttributionPolicy,
    /// Required when `attribution` is `Server`.
    pub server_region: Option<GridRegion>,
    pub seed: u64,
}

impl RunPlan {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::InvalidPlan(m));
        if self.num_rounds == 0 {
            return bad("num_rounds must be >= 1".into());
        }
        if self.sites.is_empty() {
            return bad("at least one site is required".into());
        }
        let mut ids = BTreeSet::new();
        for s in &self.sites {
            if !ids.insert(s.site_id.as_str()) {
                return bad(format!("duplicate site id `{}`", s.site_id));
            }
            s.hardware.validate()?;
            s.tier.validate()?;
        }
        self.train_cfg.validate()?;
        if let AttributionPolicy::Server { region } = &self.attribution {
            match &self.server_region {
                Some(g) if &g.code == region => {}
                _ => return bad(format!("server region `{region}` is not resolved")),
            }
        }
        Ok(())
    }

    pub fn site_ids(&self) -> impl Iterator<Item = &str> {
        self.sites.iter().map(|s| s.site_id.as_str())
    }

    fn comm_grid<'a>(&'a self, site: &'a SiteConfig) -> &'a GridRegion {
        match (&self.attribution, &self.server_region) {
            (AttributionPolicy::Server { .. }, Some(g)) => g,
            _ => &site.region,
        }
    }
}

/// Client training sets in plan site order, plus the server's held-out test set.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub clients: Vec<Dataset>,
    pub test: Dataset,
}

impl FederatedData {
    pub fn from_partitions(train: &Dataset, test: Dataset, partitions: &[ClientPartition]) -> Self {
        Self {
            clients: partitions.iter().map(|p| train.subset(&p.sample_indices)).collect(),
            test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_params: ModelParams,
    /// Index of the next round to run, starting at 1.
    pub round_index: u32,
}

impl ServerState {
    pub fn new(global_params: ModelParams) -> Self {
        Self {
            global_params,
            round_index: 1,
        }
    }
}

/// Sample-count weighted mean, accumulated left to right.
pub fn fedavg_aggregate(updates: &[(ModelParams, usize)]) -> Result<ModelParams, OrchestratorError> {
    let (first, _) = updates.first().ok_or(OrchestratorError::EmptyUpdateSet)?;
    for (index, (p, _)) in updates.iter().enumerate() {
        if !p.same_shape(first) {
            return Err(OrchestratorError::ShapeMismatch {
                index,
                expected: first.shape(),
                got: p.shape(),
            });
        }
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(OrchestratorError::ZeroTotalWeight);
    }
    let mut acc = vec![0.0; first.num_params()];
    for (p, n) in updates {
        let w = *n as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(p.iter()) {
            *a += w * v;
        }
    }
    let split = first.weights().len();
    let bias = acc.split_off(split);
    Ok(ModelParams::from_parts(first.num_classes(), first.num_features(), acc, bias)?)
}

/// What one client did in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientWork {
    pub steps: u64,
    /// Evaluation cost in training-step equivalents; 0 when evaluation is off.
    pub eval_steps: f64,
    pub num_samples: usize,
    pub payload_bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub local_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundWork {
    pub round_index: u32,
    /// Plan site order.
    pub clients: Vec<ClientWork>,
    pub global_accuracy: f64,
}

/// Broadcast, local training, optional local evaluation, FedAvg.
pub fn train_round(
    server: &mut ServerState,
    plan: &RunPlan,
    data: &FederatedData,
) -> Result<RoundWork, OrchestratorError> {
    let round = server.round_index;
    if round > plan.num_rounds {
        return Err(OrchestratorError::RoundOutOfRange {
            round,
            planned: plan.num_rounds,
        });
    }
    if data.clients.len() != plan.sites.len() {
        return Err(OrchestratorError::InvalidPlan(format!(
            "{} sites but {} client datasets",
            plan.sites.len(),
            data.clients.len()
        )));
    }
    let mut updates = Vec::with_capacity(plan.sites.len());
    let mut clients = Vec::with_capacity(plan.sites.len());
    for (i, client_data) in data.clients.iter().enumerate() {
        let cfg = TrainConfig {
            seed: derive_seed(plan.seed, &[TRAIN_STREAM, round as u64, i as u64]),
            ..plan.train_cfg
        };
        let (params, steps) = local_train(&server.global_params, client_data, &cfg)?;
        let (eval_steps, local_accuracy) = if plan.evaluate_each_round {
            (
                eval_step_equivalents(client_data.len(), cfg.batch_size),
                Some(evaluate(&params, client_data)?),
            )
        } else {
            (0.0, None)
        };
        clients.push(ClientWork {
            steps,
            eval_steps,
            num_samples: client_data.len(),
            payload_bytes: update_payload_bytes(&params),
            local_accuracy,
        });
        updates.push((params, client_data.len()));
    }
    server.global_params = fedavg_aggregate(&updates)?;
    server.round_index += 1;
    Ok(RoundWork {
        round_index: round,
        clients,
        global_accuracy: evaluate(&server.global_params, &data.test)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteRoundOutcome {
    pub site_id: String,
    pub steps: u64,
    pub train_s: f64,
    pub eval_s: f64,
    pub idle_s: f64,
    /// Compute energy of the round: training, evaluation and idle spans.
    pub energy_kwh: f64,
    pub co2e_kg: f64,
    pub payload_bytes: u64,
    pub comm_energy_kwh: f64,
    pub comm_co2e_kg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundOutcome {
    pub round_index: u32,
    pub start_s: f64,
    pub barrier_s: f64,
    pub sites: Vec<SiteRoundOutcome>,
    pub global_accuracy: f64,
}

fn secs(v: f64) -> SimDuration {
    SimDuration::new(v).unwrap_or(SimDuration::ZERO)
}

/// Opens and closes the init span of every site at t = 0; returns the
/// time at which round 1 starts (the slowest site's init end).
pub fn account_init(
    plan: &RunPlan,
    tracker: &mut EmissionsTracker,
) -> Result<f64, OrchestratorError> {
    let mut start = 0.0f64;
    for site in &plan.sites {
        tracker.register_site(&site.site_id);
        let h = tracker.start_task(&site.site_id, PhaseKind::Init, SimDuration::ZERO)?;
        let end = site.hardware.init_duration();
        let power = effective_power(&site.hardware, &site.tier, PhaseKind::Init);
        tracker.stop_task(&h, end, power, site.region.ci)?;
        start = start.max(end.seconds());
    }
    Ok(start)
}

/// Charges one round of client work to the tracker, starting every site at
/// `start_s`. Each client trains, evaluates, then idles until the slowest
/// client reaches the aggregation barrier.
pub fn account_round(
    work: &RoundWork,
    plan: &RunPlan,
    tracker: &mut EmissionsTracker,
    start_s: f64,
) -> Result<RoundOutcome, OrchestratorError> {
    if work.clients.len() != plan.sites.len() {
        return Err(OrchestratorError::InvalidPlan(format!(
            "round {} has work for {} clients, plan has {} sites",
            work.round_index,
            work.clients.len(),
            plan.sites.len()
        )));
    }
    let round = work.round_index;
    let timings: Vec<(f64, f64, f64)> = plan
        .sites
        .iter()
        .zip(&work.clients)
        .map(|(site, w)| {
            let train = effective_train_duration(&site.hardware, &site.tier, w.steps as f64);
            let train_end = start_s + train.seconds();
            let eval_end = train_end + w.eval_steps / site.hardware.throughput;
            (train_end, eval_end, train.seconds())
        })
        .collect();
    let barrier = timings.iter().map(|t| t.1).fold(start_s, f64::max);

    let mut sites = Vec::with_capacity(plan.sites.len());
    for ((site, w), &(train_end, eval_end, _)) in plan.sites.iter().zip(&work.clients).zip(&timings)
    {
        let id = &site.site_id;
        let ci = site.region.ci;
        let mut spans: Vec<EmissionsRecord> = Vec::with_capacity(3);

        let h = tracker.start_task(id, PhaseKind::Round(round), secs(start_s))?;
        let p = effective_power(&site.hardware, &site.tier, PhaseKind::Round(round));
        spans.push(tracker.stop_task(&h, secs(train_end), p, ci)?);

        if plan.evaluate_each_round {
            let h = tracker.start_task(id, PhaseKind::Evaluate(round), secs(train_end))?;
            let p = effective_power(&site.hardware, &site.tier, PhaseKind::Evaluate(round));
            spans.push(tracker.stop_task(&h, secs(eval_end), p, ci)?);
        }

        if barrier > eval_end {
            let h = tracker.start_task(id, PhaseKind::Idle(round), secs(eval_end))?;
            let p = effective_power(&site.hardware, &site.tier, PhaseKind::Idle(round));
            spans.push(tracker.stop_task(&h, secs(barrier), p, ci)?);
        }

        let duration_of = |kind: fn(PhaseKind) -> bool| {
            spans
                .iter()
                .filter(|r| kind(r.phase))
                .map(|r| r.duration.seconds())
                .sum::<f64>()
        };
        let comm_energy = comm_energy_bytes(w.payload_bytes, &plan.comm);
        let comm_ci = plan.comm_grid(site).ci;
        sites.push(SiteRoundOutcome {
            site_id: id.clone(),
            steps: w.steps,
            train_s: duration_of(|p| matches!(p, PhaseKind::Round(_))),
            eval_s: duration_of(|p| matches!(p, PhaseKind::Evaluate(_))),
            idle_s: duration_of(|p| matches!(p, PhaseKind::Idle(_))),
            energy_kwh: spans.iter().map(|r| r.energy).sum::<EnergyKwh>().value(),
            co2e_kg: spans.iter().map(|r| r.co2e).sum::<EmissionsKg>().value(),
            payload_bytes: w.payload_bytes,
            comm_energy_kwh: comm_energy.value(),
            comm_co2e_kg: emissions_of(comm_energy, comm_ci).value(),
        });
    }
    Ok(RoundOutcome {
        round_index: round,
        start_s,
        barrier_s: barrier,
        sites,
        global_accuracy: work.global_accuracy,
    })
}

/// One full round: training and aggregation, then accounting.
pub fn run_round(
    server: &mut ServerState,
    plan: &RunPlan,
    data: &FederatedData,
    tracker: &mut EmissionsTracker,
    start_s: f64,
) -> Result<(RoundWork, RoundOutcome), OrchestratorError> {
    let work = train_round(server, plan, data)?;
    let outcome = account_round(&work, plan, tracker, start_s)?;
    Ok((work, outcome))
}

#[derive(Debug, Clone)]
pub struct JobOutput {
    pub tracker: EmissionsTracker,
    pub outcomes: Vec<RoundOutcome>,
    pub trace: Vec<RoundWork>,
    pub final_params: ModelParams,
}

impl JobOutput {
    /// All records, sites in plan order, each in time order.
    pub fn records(&self, plan: &RunPlan) -> Result<Vec<EmissionsRecord>, TrackerError> {
        self.tracker.records_in_order(plan.site_ids())
    }

    pub fn accuracy_trajectory(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.global_accuracy).collect()
    }

    /// Wall-clock end of the simulation (the final barrier).
    pub fn runtime_s(&self) -> f64 {
        self.outcomes.last().map_or(0.0, |o| o.barrier_s)
    }
}

pub fn run_job(plan: &RunPlan, data: &FederatedData) -> Result<JobOutput, OrchestratorError> {
    plan.validate()?;
    let first = data
        .clients
        .first()
        .ok_or_else(|| OrchestratorError::InvalidPlan("no client data".into()))?;
    let mut server = ServerState::new(ModelParams::zeros(first.num_classes(), first.num_features()));
    let mut tracker = EmissionsTracker::new(plan.sampling);
    let mut clock = account_init(plan, &mut tracker)?;
    let mut outcomes = Vec::with_capacity(plan.num_rounds as usize);
    let mut trace = Vec::with_capacity(plan.num_rounds as usize);
    for _ in 0..plan.num_rounds {
        let (work, outcome) = run_round(&mut server, plan, data, &mut tracker, clock)?;
        clock = outcome.barrier_s;
        outcomes.push(outcome);
        trace.push(work);
    }
    Ok(JobOutput {
        tracker,
        outcomes,
        trace,
        final_params: server.global_params,
    })
}

/// Re-accounts a recorded trace under `plan`'s site settings without training.
pub fn replay_trace(
    plan: &RunPlan,
    trace: &[RoundWork],
) -> Result<(EmissionsTracker, Vec<RoundOutcome>), OrchestratorError> {
    plan.validate()?;
    let mut tracker = EmissionsTracker::new(plan.sampling);
    let mut clock = account_init(plan, &mut tracker)?;
    let mut outcomes = Vec::with_capacity(trace.len());
    for work in trace {
        let outcome = account_round(work, plan, &mut tracker, clock)?;
        clock = outcome.barrier_s;
        outcomes.push(outcome);
    }
    Ok((tracker, outcomes))
}
