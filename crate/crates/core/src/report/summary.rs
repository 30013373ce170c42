use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::log::{RoundRecord, SCHEMA_VERSION};
use super::ReportError;
use crate::comm::{comm_energy_bytes, AttributionPolicy, CommEnergyModel};
use crate::orchestrator::{JobOutput, RunPlan};
use crate::tracker::PhaseKind;
use crate::units::{emissions_of, CarbonIntensity, EnergyKwh};

/// Run-level facts that are not in the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub scenario: String,
    pub seed: u64,
    pub num_rounds: u32,
    pub attribution: AttributionPolicy,
    /// Region and intensity charged for communication under server attribution.
    pub server_region: Option<RegionIntensity>,
    /// Global test accuracy after each round's aggregation.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionIntensity {
    pub code: String,
    pub ci_kg_per_kwh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyCo2e {
    pub energy_kwh: f64,
    pub co2e_kg: f64,
}

impl EnergyCo2e {
    fn add(&mut self, energy: f64, co2e: f64) {
        self.energy_kwh += energy;
        self.co2e_kg += co2e;
    }
}

/// Totals split by measurement-boundary category.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryTotals {
    pub init: EnergyCo2e,
    pub train: EnergyCo2e,
    pub evaluate: EnergyCo2e,
    pub idle: EnergyCo2e,
    /// Sum of the four measured categories above.
    pub compute: EnergyCo2e,
    /// Estimated communication.
    pub communication: EnergyCo2e,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTotals {
    pub site_id: String,
    pub region_code: String,
    pub hardware_name: String,
    pub tier_label: String,
    pub compute_energy_kwh: f64,
    pub compute_co2e_kg: f64,
    pub comm_energy_kwh: f64,
    pub comm_co2e_kg: f64,
    pub total_energy_kwh: f64,
    pub total_co2e_kg: f64,
    /// End of the site's last span.
    pub runtime_s: f64,
    /// Time spent in init, training and evaluation.
    pub busy_s: f64,
    pub idle_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round_index: u32,
    /// Training (`round` phase) energy summed over sites.
    pub train_energy_kwh: f64,
    pub train_co2e_kg: f64,
    /// All measured phases of the round summed over sites.
    pub compute_energy_kwh: f64,
    pub compute_co2e_kg: f64,
    pub comm_energy_kwh: f64,
    pub comm_co2e_kg: f64,
    pub end_s: f64,
    pub accuracy: Option<f64>,
}

/// Summary of one run, folded from its round records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub run_id: String,
    pub scenario: String,
    pub seed: u64,
    pub num_rounds: u32,
    pub num_sites: usize,
    /// Set when every site runs the same tier.
    pub tier_label: Option<String>,
    pub attribution: AttributionPolicy,
    pub server_region: Option<RegionIntensity>,
    pub sites: Vec<SiteTotals>,
    pub rounds: Vec<RoundSummary>,
    pub categories: CategoryTotals,
    /// Training energy over all sites and rounds, divided by the round count.
    pub mean_energy_per_round_kwh: f64,
    pub mean_co2e_per_round_kg: f64,
    /// Training energy per site per round.
    pub mean_energy_per_site_round_kwh: f64,
    pub mean_co2e_per_site_round_kg: f64,
    pub total_energy_kwh: f64,
    pub total_co2e_kg: f64,
    /// End of the last span of any site (the final aggregation barrier).
    pub runtime_s: f64,
    pub runtime_min: f64,
    /// Longest per-site sum of init, training and evaluation time.
    pub max_client_busy_s: f64,
    pub accuracy: Vec<f64>,
    #[serde(skip)]
    pub records: Vec<RoundRecord>,
}

impl RunReport {
    pub fn meta(&self) -> RunMeta {
        RunMeta {
            run_id: self.run_id.clone(),
            scenario: self.scenario.clone(),
            seed: self.seed,
            num_rounds: self.num_rounds,
            attribution: self.attribution.clone(),
            server_region: self.server_region.clone(),
            accuracy: self.accuracy.clone(),
        }
    }

    /// Intensity currently applied to each region (including the server region).
    pub fn region_intensities(&self) -> BTreeMap<String, CarbonIntensity> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            out.entry(r.region_code.clone())
                .or_insert(CarbonIntensity::new(r.ci_kg_per_kwh).unwrap_or(CarbonIntensity::ZERO));
        }
        if let Some(s) = &self.server_region {
            out.entry(s.code.clone())
                .or_insert(CarbonIntensity::new(s.ci_kg_per_kwh).unwrap_or(CarbonIntensity::ZERO));
        }
        out
    }

    pub fn site(&self, site_id: &str) -> Option<&SiteTotals> {
        self.sites.iter().find(|s| s.site_id == site_id)
    }
}

/// Communication energy and emissions implied by a `round` record.
pub fn record_comm(record: &RoundRecord, meta_server_ci: Option<f64>) -> (f64, f64) {
    let Some(bytes) = record.payload_bytes else {
        return (0.0, 0.0);
    };
    let model = CommEnergyModel::new(record.net_intensity_kwh_per_gb).unwrap_or_default();
    let energy = comm_energy_bytes(bytes, &model);
    let ci = meta_server_ci.unwrap_or(record.ci_kg_per_kwh);
    let co2e = emissions_of(energy, CarbonIntensity::new(ci).unwrap_or(CarbonIntensity::ZERO));
    (energy.value(), co2e.value())
}

fn server_ci(meta: &RunMeta) -> Option<f64> {
    match meta.attribution {
        AttributionPolicy::Server { .. } => meta.server_region.as_ref().map(|s| s.ci_kg_per_kwh),
        AttributionPolicy::Client => None,
    }
}

/// Folds round records, in the given order, into a run report.
pub fn summarize_run(records: &[RoundRecord], meta: &RunMeta) -> Result<RunReport, ReportError> {
    for r in records {
        r.validate()?;
    }
    if meta.num_rounds == 0 {
        return Err(ReportError::Inconsistent("num_rounds must be >= 1".into()));
    }
    let server = server_ci(meta);
    let mut site_order: Vec<String> = Vec::new();
    let mut sites: BTreeMap<String, SiteTotals> = BTreeMap::new();
    let mut rounds: BTreeMap<u32, RoundSummary> = BTreeMap::new();
    let mut cat = CategoryTotals::default();
    let mut tiers = BTreeSet::new();

    for r in records {
        if r.round_index > meta.num_rounds {
            return Err(ReportError::Inconsistent(format!(
                "record for round {} in a {}-round run",
                r.round_index, meta.num_rounds
            )));
        }
        tiers.insert(r.tier_label.clone());
        let site = sites.entry(r.site_id.clone()).or_insert_with(|| {
            site_order.push(r.site_id.clone());
            SiteTotals {
                site_id: r.site_id.clone(),
                region_code: r.region_code.clone(),
                hardware_name: r.hardware_name.clone(),
                tier_label: r.tier_label.clone(),
                compute_energy_kwh: 0.0,
                compute_co2e_kg: 0.0,
                comm_energy_kwh: 0.0,
                comm_co2e_kg: 0.0,
                total_energy_kwh: 0.0,
                total_co2e_kg: 0.0,
                runtime_s: 0.0,
                busy_s: 0.0,
                idle_s: 0.0,
            }
        });
        let (comm_e, comm_c) = record_comm(r, server);
        site.compute_energy_kwh += r.energy_kwh;
        site.compute_co2e_kg += r.co2e_kg;
        site.comm_energy_kwh += comm_e;
        site.comm_co2e_kg += comm_c;
        site.runtime_s = site.runtime_s.max(r.end_s());
        match r.phase {
            PhaseKind::Idle(_) => site.idle_s += r.duration_s,
            _ => site.busy_s += r.duration_s,
        }

        match r.phase {
            PhaseKind::Init => cat.init.add(r.energy_kwh, r.co2e_kg),
            PhaseKind::Round(_) => cat.train.add(r.energy_kwh, r.co2e_kg),
            PhaseKind::Evaluate(_) => cat.evaluate.add(r.energy_kwh, r.co2e_kg),
            PhaseKind::Idle(_) => cat.idle.add(r.energy_kwh, r.co2e_kg),
        }
        cat.compute.add(r.energy_kwh, r.co2e_kg);
        cat.communication.add(comm_e, comm_c);

        if r.round_index >= 1 {
            let idx = r.round_index;
            let acc = meta.accuracy.get(idx as usize - 1).copied();
            let round = rounds.entry(idx).or_insert_with(|| RoundSummary {
                round_index: idx,
                train_energy_kwh: 0.0,
                train_co2e_kg: 0.0,
                compute_energy_kwh: 0.0,
                compute_co2e_kg: 0.0,
                comm_energy_kwh: 0.0,
                comm_co2e_kg: 0.0,
                end_s: 0.0,
                accuracy: acc,
            });
            if let PhaseKind::Round(_) = r.phase {
                round.train_energy_kwh += r.energy_kwh;
                round.train_co2e_kg += r.co2e_kg;
            }
            round.compute_energy_kwh += r.energy_kwh;
            round.compute_co2e_kg += r.co2e_kg;
            round.comm_energy_kwh += comm_e;
            round.comm_co2e_kg += comm_c;
            round.end_s = round.end_s.max(r.end_s());
        }
    }

    let mut site_list: Vec<SiteTotals> = site_order
        .iter()
        .map(|id| sites.remove(id).expect("site seen"))
        .collect();
    for s in &mut site_list {
        s.total_energy_kwh = s.compute_energy_kwh + s.comm_energy_kwh;
        s.total_co2e_kg = s.compute_co2e_kg + s.comm_co2e_kg;
    }
    let num_sites = site_list.len();
    let n_rounds = meta.num_rounds as f64;
    let site_rounds = (num_sites.max(1) as f64) * n_rounds;
    let runtime_s = site_list.iter().map(|s| s.runtime_s).fold(0.0, f64::max);
    let max_client_busy_s = site_list.iter().map(|s| s.busy_s).fold(0.0, f64::max);

    Ok(RunReport {
        schema_version: SCHEMA_VERSION.into(),
        run_id: meta.run_id.clone(),
        scenario: meta.scenario.clone(),
        seed: meta.seed,
        num_rounds: meta.num_rounds,
        num_sites,
        tier_label: (tiers.len() == 1).then(|| tiers.into_iter().next().expect("one tier")),
        attribution: meta.attribution.clone(),
        server_region: meta.server_region.clone(),
        sites: site_list,
        rounds: rounds.into_values().collect(),
        categories: cat,
        mean_energy_per_round_kwh: cat.train.energy_kwh / n_rounds,
        mean_co2e_per_round_kg: cat.train.co2e_kg / n_rounds,
        mean_energy_per_site_round_kwh: cat.train.energy_kwh / site_rounds,
        mean_co2e_per_site_round_kg: cat.train.co2e_kg / site_rounds,
        total_energy_kwh: cat.compute.energy_kwh + cat.communication.energy_kwh,
        total_co2e_kg: cat.compute.co2e_kg + cat.communication.co2e_kg,
        runtime_s,
        runtime_min: runtime_s / 60.0,
        max_client_busy_s,
        accuracy: meta.accuracy.clone(),
        records: records.to_vec(),
    })
}

/// Recomputes every emissions figure with new intensities for the given
/// regions; energies are untouched. Regions not in the map keep their intensity.
pub fn remap_grid_intensity(
    report: &RunReport,
    new_ci_by_region: &BTreeMap<String, CarbonIntensity>,
) -> Result<RunReport, ReportError> {
    let known = report.region_intensities();
    if let Some(unknown) = new_ci_by_region.keys().find(|k| !known.contains_key(*k)) {
        return Err(ReportError::UnknownRegion(unknown.clone()));
    }
    let records: Vec<RoundRecord> = report
        .records
        .iter()
        .map(|r| match new_ci_by_region.get(&r.region_code) {
            Some(&ci) => {
                let energy = EnergyKwh::new(r.energy_kwh).unwrap_or(EnergyKwh::ZERO);
                RoundRecord {
                    ci_kg_per_kwh: ci.value(),
                    co2e_kg: emissions_of(energy, ci).value(),
                    ..r.clone()
                }
            }
            None => r.clone(),
        })
        .collect();
    let mut meta = report.meta();
    if let Some(server) = &mut meta.server_region {
        if let Some(ci) = new_ci_by_region.get(&server.code) {
            server.ci_kg_per_kwh = ci.value();
        }
    }
    summarize_run(&records, &meta)
}

/// Builds the round records of a finished job, rows ordered by round, then
/// plan site order, then start time.
pub fn records_from_job(
    plan: &RunPlan,
    job: &JobOutput,
    run_id: &str,
) -> Result<Vec<RoundRecord>, ReportError> {
    let mut rows: Vec<(u32, usize, RoundRecord)> = Vec::new();
    for (pos, site) in plan.sites.iter().enumerate() {
        let ledger = job.tracker.ledger(&site.site_id)?;
        for rec in ledger {
            let round = rec.phase.round_index();
            let payload_bytes = match rec.phase {
                PhaseKind::Round(r) => Some(
                    job.trace
                        .get(r as usize - 1)
                        .and_then(|w| w.clients.get(pos))
                        .map(|c| c.payload_bytes)
                        .ok_or_else(|| {
                            ReportError::Inconsistent(format!("no work recorded for round {r}"))
                        })?,
                ),
                _ => None,
            };
            rows.push((
                round,
                pos,
                RoundRecord {
                    run_id: run_id.to_owned(),
                    site_id: site.site_id.clone(),
                    round_index: round,
                    phase: rec.phase,
                    start_s: rec.start.seconds(),
                    duration_s: rec.duration.seconds(),
                    energy_kwh: rec.energy.value(),
                    co2e_kg: rec.co2e.value(),
                    ci_kg_per_kwh: rec.ci.value(),
                    region_code: site.region.code.clone(),
                    hardware_name: site.hardware.name.clone(),
                    tier_label: site.tier.label.to_string(),
                    payload_bytes,
                    net_intensity_kwh_per_gb: plan.comm.net_intensity(),
                    seed: plan.seed,
                    schema_version: SCHEMA_VERSION.into(),
                },
            ));
        }
    }
    // Stable: ledger order is kept within (round, site).
    rows.sort_by_key(|(round, pos, _)| (*round, *pos));
    Ok(rows.into_iter().map(|(_, _, r)| r).collect())
}

/// Run metadata for a job produced from `plan`.
pub fn meta_for_job(plan: &RunPlan, job: &JobOutput, run_id: &str, scenario: &str) -> RunMeta {
    RunMeta {
        run_id: run_id.to_owned(),
        scenario: scenario.to_owned(),
        seed: plan.seed,
        num_rounds: plan.num_rounds,
        attribution: plan.attribution.clone(),
        server_region: match plan.attribution {
            AttributionPolicy::Server { .. } => plan.server_region.as_ref().map(|g| RegionIntensity {
                code: g.code.clone(),
                ci_kg_per_kwh: g.ci.value(),
            }),
            AttributionPolicy::Client => None,
        },
        accuracy: job.accuracy_trajectory(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(site: &str, phase: PhaseKind, start: f64, dur: f64, energy: f64, ci: f64) -> RoundRecord {
        RoundRecord {
            run_id: "r".into(),
            site_id: site.into(),
            round_index: phase.round_index(),
            phase,
            start_s: start,
            duration_s: dur,
            energy_kwh: energy,
            co2e_kg: energy * ci,
            ci_kg_per_kwh: ci,
            region_code: if ci == 0.39 { "USA".into() } else { "FRA".into() },
            hardware_name: "hw".into(),
            tier_label: "high".into(),
            payload_bytes: matches!(phase, PhaseKind::Round(_)).then_some(3640),
            net_intensity_kwh_per_gb: 0.006,
            seed: 0,
            schema_version: SCHEMA_VERSION.into(),
        }
    }

    fn meta(rounds: u32) -> RunMeta {
        RunMeta {
            run_id: "r".into(),
            scenario: "s".into(),
            seed: 0,
            num_rounds: rounds,
            attribution: AttributionPolicy::Client,
            server_region: None,
            accuracy: vec![],
        }
    }

    #[test]
    fn mean_per_round_sums_sites() {
        let e = 0.001;
        let mut records = Vec::new();
        for s in 0..6 {
            for r in 1..=10u32 {
                records.push(rec(&format!("s{s}"), PhaseKind::Round(r), r as f64 * 10.0, 5.0, e, 0.39));
            }
        }
        let rep = summarize_run(&records, &meta(10)).unwrap();
        assert!((rep.mean_energy_per_round_kwh - 6.0 * e).abs() < 1e-15);
        assert!((rep.mean_energy_per_site_round_kwh - e).abs() < 1e-15);
        assert_eq!(rep.num_sites, 6);
        assert_eq!(rep.rounds.len(), 10);
        assert_eq!(rep.tier_label.as_deref(), Some("high"));
    }

    #[test]
    fn comm_is_a_separate_category() {
        let records = vec![
            rec("a", PhaseKind::Init, 0.0, 1.0, 0.01, 0.39),
            rec("a", PhaseKind::Round(1), 1.0, 2.0, 0.02, 0.39),
            rec("a", PhaseKind::Idle(1), 3.0, 1.0, 0.001, 0.39),
        ];
        let rep = summarize_run(&records, &meta(1)).unwrap();
        let comm = 2.0 * 3640.0 / 1e9 * 0.006;
        assert!((rep.categories.communication.energy_kwh - comm).abs() < 1e-20);
        assert!((rep.categories.compute.energy_kwh - 0.031).abs() < 1e-15);
        assert!((rep.total_energy_kwh - 0.031 - comm).abs() < 1e-15);
        assert_eq!(rep.runtime_s, 4.0);
        assert_eq!(rep.sites[0].idle_s, 1.0);
        assert_eq!(rep.sites[0].busy_s, 3.0);
    }

    #[test]
    fn remap_examples() {
        let records = vec![rec("a", PhaseKind::Round(1), 0.0, 1.0, 0.32, 0.39)];
        let rep = summarize_run(&records, &meta(1)).unwrap();

        let to = |ci: f64| BTreeMap::from([("USA".to_string(), CarbonIntensity::new(ci).unwrap())]);
        let remapped = remap_grid_intensity(&rep, &to(0.40625)).unwrap();
        assert!((remapped.categories.compute.co2e_kg - 0.13).abs() < 1e-12);
        assert_eq!(remapped.categories.compute.energy_kwh, 0.32);

        assert_eq!(remap_grid_intensity(&rep, &to(0.39)).unwrap(), rep);

        let a = remap_grid_intensity(&rep, &to(0.05)).unwrap();
        let b = remap_grid_intensity(&rep, &to(0.7)).unwrap();
        assert!((b.total_co2e_kg / a.total_co2e_kg - 14.0).abs() < 1e-12);

        let unknown = BTreeMap::from([("ZZZ".to_string(), CarbonIntensity::ZERO)]);
        assert!(matches!(
            remap_grid_intensity(&rep, &unknown),
            Err(ReportError::UnknownRegion(r)) if r == "ZZZ"
        ));
    }

    #[test]
    fn remap_then_back_is_identity() {
        let records = vec![
            rec("a", PhaseKind::Init, 0.0, 1.0, 0.013, 0.39),
            rec("a", PhaseKind::Round(1), 1.0, 2.0, 0.0217, 0.39),
            rec("b", PhaseKind::Round(1), 1.0, 2.5, 0.0311, 0.056),
            rec("b", PhaseKind::Idle(1), 3.5, 0.5, 0.0009, 0.056),
        ];
        let rep = summarize_run(&records, &meta(1)).unwrap();
        let original = rep.region_intensities();
        let new = BTreeMap::from([
            ("USA".to_string(), CarbonIntensity::new(0.123).unwrap()),
            ("FRA".to_string(), CarbonIntensity::new(0.777).unwrap()),
        ]);
        let there = remap_grid_intensity(&rep, &new).unwrap();
        assert_ne!(there, rep);
        assert_eq!(remap_grid_intensity(&there, &original).unwrap(), rep);
    }

    #[test]
    fn round_past_plan_rejected() {
        let records = vec![rec("a", PhaseKind::Round(3), 0.0, 1.0, 0.1, 0.39)];
        assert!(matches!(
            summarize_run(&records, &meta(2)),
            Err(ReportError::Inconsistent(_))
        ));
    }
}
