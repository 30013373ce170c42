mod common;

use std::collections::BTreeMap;

use fedcarbon::cli::{cmd_run, load_run};
use fedcarbon::report::{parse_round_log, write_round_log, FIELDS, SCHEMA_VERSION};
use fedcarbon::tracker::PhaseKind;
use proptest::prelude::*;

const TIERS: [&str; 3] = ["high", "medium", "low"];
const REGIONS: [&str; 4] = ["POL", "SWE", "FRA", "IND"];

fn site_strategy() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..TIERS.len(), 0..REGIONS.len()), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_emitted_record_is_complete(
        rounds in 1u32..5,
        sites in site_strategy(),
        alpha in 0.1f64..20.0,
        seed in 0u64..1000,
    ) {
        let ids: Vec<String> = (0..sites.len()).map(|i| format!("s{i}")).collect();
        let spec: Vec<(&str, &str, &str)> = sites
            .iter()
            .zip(&ids)
            .map(|(&(t, r), id)| (id.as_str(), TIERS[t], REGIONS[r]))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let config = common::write(dir.path(), "c.json", &common::tiny_config(rounds, &spec, alpha, seed));
        let out = dir.path().join("out");
        let report = cmd_run(&config, None, Some(&out)).unwrap();

        let text = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
        prop_assert_eq!(text.lines().next().unwrap(), FIELDS.join(","));
        let records = parse_round_log(&text).unwrap();
        prop_assert_eq!(write_round_log(&records).unwrap(), text.clone());

        let mut train_rows: BTreeMap<(String, u32), usize> = BTreeMap::new();
        let mut last_end: BTreeMap<String, f64> = BTreeMap::new();
        for r in &records {
            prop_assert!(r.validate().is_ok());
            prop_assert_eq!(&r.schema_version, SCHEMA_VERSION);
            prop_assert_eq!(r.seed, seed);
            prop_assert_eq!(r.net_intensity_kwh_per_gb, 0.006);
            prop_assert_eq!(r.payload_bytes.is_some(), matches!(r.phase, PhaseKind::Round(_)));
            prop_assert_eq!(r.co2e_kg, r.energy_kwh * r.ci_kg_per_kwh);
            let pos = ids.iter().position(|i| *i == r.site_id).unwrap();
            prop_assert_eq!(&r.tier_label, TIERS[sites[pos].0]);
            prop_assert_eq!(&r.region_code, REGIONS[sites[pos].1]);
            if let PhaseKind::Round(k) = r.phase {
                *train_rows.entry((r.site_id.clone(), k)).or_default() += 1;
            }
            // Spans of one site never overlap.
            let end = last_end.entry(r.site_id.clone()).or_insert(0.0);
            prop_assert!(r.start_s >= *end - 1e-9);
            *end = r.end_s();
        }
        prop_assert_eq!(train_rows.len(), sites.len() * rounds as usize);
        prop_assert!(train_rows.values().all(|&n| n == 1));
        let inits = records.iter().filter(|r| r.phase == PhaseKind::Init).count();
        prop_assert_eq!(inits, sites.len());

        // Sites finish each round together at the barrier.
        for k in 1..=rounds {
            let ends: Vec<f64> = records
                .iter()
                .filter(|r| r.round_index == k)
                .fold(BTreeMap::<&str, f64>::new(), |mut m, r| {
                    let e = m.entry(r.site_id.as_str()).or_insert(0.0);
                    *e = e.max(r.end_s());
                    m
                })
                .into_values()
                .collect();
            prop_assert!(ends.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-9 * w[0].max(1.0)));
        }

        let loaded = load_run(&out).unwrap();
        prop_assert_eq!(loaded.report.total_co2e_kg, report.total_co2e_kg);
        prop_assert_eq!(loaded.report.accuracy.len(), rounds as usize);
    }
}
