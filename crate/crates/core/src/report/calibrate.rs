//! Fits tier knobs so that simulated runs reproduce published tier ratios.
//!
//! Targets are per-tier mean training energy per round and runtime. Both are
//! matched as ratios to the `high` tier, against a simulated high-tier
//! baseline: the slowdown factor is bisected until the runtime ratio matches,
//! then the power scale is bisected (on a log scale) until the mean-energy
//! ratio matches. Each probe replays the baseline's recorded work trace, so no
//! model is retrained.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::orchestrator::{replay_trace, RoundWork, RunPlan};
use crate::site::{EfficiencyTier, TierLabel, TierPresets};
use crate::tracker::{EmissionsTracker, PhaseKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierTarget {
    pub mean_energy_kwh_per_round: f64,
    pub runtime_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTargets {
    pub tiers: BTreeMap<TierLabel, TierTarget>,
}

impl CalibrationTargets {
    /// The CIFAR-10 per-round means and runtimes of the three efficiency tiers.
    pub fn reference() -> Self {
        let t = |e, m| TierTarget {
            mean_energy_kwh_per_round: e,
            runtime_min: m,
        };
        Self {
            tiers: BTreeMap::from([
                (TierLabel::High, t(0.000062, 0.75)),
                (TierLabel::Medium, t(0.000563, 1.52)),
                (TierLabel::Low, t(0.001449, 4.23)),
            ]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSearch {
    /// Accepted relative error on both matched ratios.
    pub tolerance: f64,
    pub max_iterations: u32,
    pub max_slowdown: f64,
    pub min_power_scale: f64,
    pub max_power_scale: f64,
}

impl Default for CalibrationSearch {
    fn default() -> Self {
        Self {
            tolerance: 0.05,
            max_iterations: 200,
            max_slowdown: 100.0,
            min_power_scale: 1e-3,
            max_power_scale: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierFit {
    pub label: TierLabel,
    pub slowdown_factor: f64,
    pub power_scale: f64,
    pub energy_ratio_target: f64,
    pub energy_ratio_achieved: f64,
    pub runtime_ratio_target: f64,
    pub runtime_ratio_achieved: f64,
    /// Simulated mean training energy per site and round, for comparison
    /// with the absolute target.
    pub mean_energy_per_site_round_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub presets: TierPresets,
    pub fits: Vec<TierFit>,
    pub baseline_mean_energy_per_round_kwh: f64,
    pub baseline_runtime_s: f64,
}

#[derive(Debug, Clone, Copy)]
struct Probe {
    mean_energy_per_round: f64,
    runtime_s: f64,
}

fn probe(
    plan: &RunPlan,
    trace: &[RoundWork],
    tier: EfficiencyTier,
) -> Result<Probe, ReportError> {
    let mut p = plan.clone();
    for s in &mut p.sites {
        s.tier = tier;
    }
    let (tracker, outcomes) = replay_trace(&p, trace)?;
    Ok(Probe {
        mean_energy_per_round: train_energy(&tracker, &p)? / p.num_rounds as f64,
        runtime_s: outcomes.last().map_or(0.0, |o| o.barrier_s),
    })
}

fn train_energy(tracker: &EmissionsTracker, plan: &RunPlan) -> Result<f64, ReportError> {
    let mut total = 0.0;
    for id in plan.site_ids() {
        for r in tracker.ledger(id)? {
            if let PhaseKind::Round(_) = r.phase {
                total += r.energy.value();
            }
        }
    }
    Ok(total)
}

/// Smallest `x` in `[lo, hi]` with `f(x) >= 0`, for increasing `f`; clamps to
/// the bounds when the root lies outside.
fn bisect(
    mut lo: f64,
    mut hi: f64,
    iterations: u32,
    mut f: impl FnMut(f64) -> Result<f64, ReportError>,
) -> Result<f64, ReportError> {
    if f(lo)? >= 0.0 {
        return Ok(lo);
    }
    if f(hi)? < 0.0 {
        return Ok(hi);
    }
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid)? >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

fn rel_err(achieved: f64, target: f64) -> f64 {
    if target == 0.0 {
        return if achieved == 0.0 { 0.0 } else { f64::INFINITY };
    }
    ((achieved - target) / target).abs()
}

/// Fits every tier in `targets` against the high-tier `plan` and its work `trace`.
pub fn calibrate_tiers(
    plan: &RunPlan,
    trace: &[RoundWork],
    targets: &CalibrationTargets,
    search: &CalibrationSearch,
) -> Result<CalibrationResult, ReportError> {
    let failed = |m: String| Err(ReportError::CalibrationFailed(m));
    if let Some(s) = plan.sites.iter().find(|s| s.tier.label != TierLabel::High) {
        return failed(format!(
            "baseline site `{}` runs tier `{}`, expected high",
            s.site_id, s.tier.label
        ));
    }
    let Some(high) = targets.tiers.get(&TierLabel::High) else {
        return failed("targets must include the high tier".into());
    };
    if !(high.mean_energy_kwh_per_round > 0.0 && high.runtime_min > 0.0) {
        return failed("high-tier targets must be positive".into());
    }
    let base = probe(plan, trace, EfficiencyTier::high())?;
    if !(base.mean_energy_per_round > 0.0 && base.runtime_s > 0.0) {
        return failed("baseline run has no training energy or runtime".into());
    }
    let site_rounds = (plan.sites.len() as f64) * plan.num_rounds as f64;

    let mut tiers = BTreeMap::new();
    let mut fits = Vec::new();
    for (&label, target) in &targets.tiers {
        let energy_ratio = target.mean_energy_kwh_per_round / high.mean_energy_kwh_per_round;
        let runtime_ratio = target.runtime_min / high.runtime_min;
        if !(energy_ratio.is_finite() && runtime_ratio.is_finite()) {
            return failed(format!("tier `{label}`: non-finite target"));
        }
        let tier = if label == TierLabel::High {
            EfficiencyTier::high()
        } else {
            let with = |slowdown_factor, power_scale| EfficiencyTier {
                label,
                slowdown_factor,
                power_scale,
            };
            let slowdown = bisect(1.0, search.max_slowdown, search.max_iterations, |s| {
                Ok(probe(plan, trace, with(s, 1.0))?.runtime_s / base.runtime_s - runtime_ratio)
            })?;
            let log_scale = bisect(
                search.min_power_scale.ln(),
                search.max_power_scale.ln(),
                search.max_iterations,
                |lk| {
                    let p = probe(plan, trace, with(slowdown, lk.exp()))?;
                    Ok(p.mean_energy_per_round / base.mean_energy_per_round - energy_ratio)
                },
            )?;
            with(slowdown, log_scale.exp())
        };
        let achieved = probe(plan, trace, tier)?;
        let fit = TierFit {
            label,
            slowdown_factor: tier.slowdown_factor,
            power_scale: tier.power_scale,
            energy_ratio_target: energy_ratio,
            energy_ratio_achieved: achieved.mean_energy_per_round / base.mean_energy_per_round,
            runtime_ratio_target: runtime_ratio,
            runtime_ratio_achieved: achieved.runtime_s / base.runtime_s,
            mean_energy_per_site_round_kwh: achieved.mean_energy_per_round * plan.num_rounds as f64
                / site_rounds,
        };
        let e_err = rel_err(fit.energy_ratio_achieved, energy_ratio);
        let r_err = rel_err(fit.runtime_ratio_achieved, runtime_ratio);
        if e_err > search.tolerance || r_err > search.tolerance {
            return failed(format!(
                "tier `{label}`: energy ratio {:.4} vs target {energy_ratio:.4}, runtime ratio {:.4} vs target {runtime_ratio:.4}",
                fit.energy_ratio_achieved, fit.runtime_ratio_achieved
            ));
        }
        tiers.insert(label, tier);
        fits.push(fit);
    }
    Ok(CalibrationResult {
        presets: TierPresets { tiers },
        fits,
        baseline_mean_energy_per_round_kwh: base.mean_energy_per_round,
        baseline_runtime_s: base.runtime_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{AttributionPolicy, CommEnergyModel};
    use crate::orchestrator::ClientWork;
    use crate::site::{GridRegion, HardwareProfile, SiteConfig};
    use crate::tracker::SamplingPolicy;
    use crate::units::{CarbonIntensity, EnergyKwh, PowerDrawW};
    use crate::workload::TrainConfig;

    fn plan(init_kwh: f64, idle_w: f64) -> RunPlan {
        let site = |i: usize| SiteConfig {
            site_id: format!("s{i}"),
            hardware: HardwareProfile {
                name: "hw".into(),
                train_power: PowerDrawW::new(60.0, 30.0, 10.0).unwrap(),
                idle_power: PowerDrawW::new(idle_w, 0.0, 0.0).unwrap(),
                init_spike_energy: EnergyKwh::new(init_kwh).unwrap(),
                throughput: 100.0,
            },
            tier: EfficiencyTier::high(),
            region: GridRegion {
                code: "USA".into(),
                ci: CarbonIntensity::new(0.39).unwrap(),
            },
            dataset_fraction: None,
        };
        RunPlan {
            num_rounds: 3,
            sites: (0..3).map(site).collect(),
            train_cfg: TrainConfig::default(),
            evaluate_each_round: false,
            sampling: SamplingPolicy::default(),
            comm: CommEnergyModel::new(0.006).unwrap(),
            attribution: AttributionPolicy::Client,
            server_region: None,
            seed: 0,
        }
    }

    fn trace() -> Vec<RoundWork> {
        (1..=3)
            .map(|r| RoundWork {
                round_index: r,
                clients: [300u64, 500, 700]
                    .iter()
                    .map(|&steps| ClientWork {
                        steps,
                        eval_steps: 0.0,
                        num_samples: 100,
                        payload_bytes: 3640,
                        local_accuracy: None,
                    })
                    .collect(),
                global_accuracy: 0.9,
            })
            .collect()
    }

    fn targets(e: f64, m: f64) -> CalibrationTargets {
        CalibrationTargets {
            tiers: BTreeMap::from([
                (
                    TierLabel::High,
                    TierTarget {
                        mean_energy_kwh_per_round: 1.0,
                        runtime_min: 1.0,
                    },
                ),
                (
                    TierLabel::Medium,
                    TierTarget {
                        mean_energy_kwh_per_round: e,
                        runtime_min: m,
                    },
                ),
            ]),
        }
    }

    #[test]
    fn baseline_target_gives_identity() {
        let res = calibrate_tiers(&plan(0.0, 5.0), &trace(), &targets(1.0, 1.0), &Default::default())
            .unwrap();
        let m = res.presets.get(TierLabel::Medium).unwrap();
        assert_eq!(m.slowdown_factor, 1.0);
        assert!((m.power_scale - 1.0).abs() < 1e-9);
        let h = res.presets.get(TierLabel::High).unwrap();
        assert_eq!((h.slowdown_factor, h.power_scale), (1.0, 1.0));
    }

    #[test]
    fn closed_form_power_scale_without_fixed_overheads() {
        // No init span and runtime purely proportional to slowdown: the
        // duration x power model gives power_scale = energy ratio / runtime ratio.
        for (e, m, expected) in [(9.08, 2.03, 9.08 / 2.03), (23.4, 5.64, 23.4 / 5.64)] {
            let res =
                calibrate_tiers(&plan(0.0, 5.0), &trace(), &targets(e, m), &Default::default())
                    .unwrap();
            let tier = res.presets.get(TierLabel::Medium).unwrap();
            assert!((tier.slowdown_factor - m).abs() < 1e-9, "{tier:?}");
            assert!((tier.power_scale - expected).abs() < 1e-9, "{tier:?}");
        }
        assert!((9.08f64 / 2.03 - 4.47).abs() < 0.01);
        assert!((23.4f64 / 5.64 - 4.14).abs() < 0.01);
    }

    #[test]
    fn zero_energy_target_fails() {
        let err = calibrate_tiers(&plan(0.0, 5.0), &trace(), &targets(0.0, 2.0), &Default::default())
            .unwrap_err();
        assert!(matches!(err, ReportError::CalibrationFailed(_)));
    }

    #[test]
    fn faster_than_baseline_fails() {
        let err = calibrate_tiers(&plan(0.0, 5.0), &trace(), &targets(2.0, 0.5), &Default::default())
            .unwrap_err();
        assert!(matches!(err, ReportError::CalibrationFailed(_)));
    }

    #[test]
    fn fixed_init_pushes_slowdown_up() {
        let res = calibrate_tiers(&plan(0.0005, 5.0), &trace(), &targets(9.08, 2.03), &Default::default())
            .unwrap();
        let fit = &res.fits.iter().find(|f| f.label == TierLabel::Medium).unwrap();
        assert!(fit.slowdown_factor > 2.03);
        assert!((fit.runtime_ratio_achieved - 2.03).abs() < 1e-6);
        assert!((fit.energy_ratio_achieved - 9.08).abs() < 1e-6);
    }

    #[test]
    fn baseline_must_be_high() {
        let mut p = plan(0.0, 5.0);
        p.sites[0].tier = EfficiencyTier {
            label: TierLabel::Low,
            slowdown_factor: 2.0,
            power_scale: 1.0,
        };
        assert!(matches!(
            calibrate_tiers(&p, &trace(), &targets(1.0, 1.0), &Default::default()),
            Err(ReportError::CalibrationFailed(_))
        ));
    }
}
