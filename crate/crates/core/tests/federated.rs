mod common;

use std::collections::BTreeMap;

use fedcarbon::config::{load_config, ResolvedConfig};
use fedcarbon::orchestrator::{run_job, JobOutput};
use fedcarbon::tracker::PhaseKind;
use fedcarbon::workload::{loss_and_gradient, Dataset, ModelParams};
use proptest::prelude::*;

fn resolve(text: &str) -> (tempfile::TempDir, ResolvedConfig) {
    let dir = tempfile::tempdir().unwrap();
    let path = common::write(dir.path(), "c.json", text);
    let resolved = load_config(&path, None).unwrap();
    (dir, resolved)
}

fn job(resolved: &ResolvedConfig) -> JobOutput {
    let data = resolved.build_data().unwrap();
    run_job(&resolved.plan, &data.federated).unwrap()
}

#[test]
fn tiers_change_the_ledger_but_not_the_model() {
    let sites = |tier| vec![("a", tier, "USA"), ("b", tier, "USA"), ("c", tier, "USA")];
    let (_d1, high) = resolve(&common::tiny_config(4, &sites("high"), 0.8, 5));
    let (_d2, medium) = resolve(&common::tiny_config(4, &sites("medium"), 0.8, 5));
    let (h, m) = (job(&high), job(&medium));

    assert_eq!(h.final_params, m.final_params);
    assert_eq!(h.accuracy_trajectory(), m.accuracy_trajectory());
    assert_eq!(h.trace, m.trace);

    let hr = h.records(&high.plan).unwrap();
    let mr = m.records(&medium.plan).unwrap();
    assert_eq!(hr.len(), mr.len());
    let energy = |rs: &[fedcarbon::tracker::EmissionsRecord]| rs.iter().map(|r| r.energy.value()).sum::<f64>();
    assert!(energy(&mr) > energy(&hr));
    assert!(m.runtime_s() > h.runtime_s());
}

#[test]
fn sites_meet_at_every_barrier() {
    let sites = [("a", "high", "POL"), ("b", "medium", "SWE"), ("c", "low", "FRA")];
    let (_d, resolved) = resolve(&common::tiny_config(5, &sites, 0.3, 2));
    let out = job(&resolved);
    let records = out.records(&resolved.plan).unwrap();

    let mut per_round: BTreeMap<u32, BTreeMap<String, f64>> = BTreeMap::new();
    for (site, r) in resolved.plan.site_ids().flat_map(|id| {
        out.tracker.ledger(id).unwrap().iter().map(move |r| (id.to_owned(), r))
    }) {
        let k = r.phase.round_index();
        if k > 0 {
            let end = per_round.entry(k).or_default().entry(site).or_insert(0.0);
            *end = end.max(r.end_s());
        }
    }
    for (k, ends) in &per_round {
        let barrier = out.outcomes[*k as usize - 1].barrier_s;
        for (site, end) in ends {
            assert!((end - barrier).abs() <= 1e-9 * barrier, "round {k} site {site}: {end} vs {barrier}");
        }
    }
    // The slowest site never idles; every other one does.
    for k in 1..=5u32 {
        let idle: Vec<f64> = records
            .iter()
            .filter(|r| r.phase == PhaseKind::Idle(k))
            .map(|r| r.duration.seconds())
            .collect();
        assert!(idle.iter().filter(|d| **d > 0.0).count() >= 2, "round {k}: {idle:?}");
    }
}

#[test]
fn accuracy_rises_on_separable_blobs() {
    let text = common::tiny_config(
        8,
        &[("a", "high", "USA"), ("b", "high", "USA"), ("c", "high", "USA"), ("d", "high", "USA")],
        1.0,
        0,
    )
    .replace(
        r#""num_classes": 3, "num_features": 6, "samples_per_class": 60, "test_samples_per_class": 20"#,
        r#""num_classes": 10, "num_features": 90, "samples_per_class": 300, "test_samples_per_class": 100"#,
    );
    let (_d, resolved) = resolve(&text);
    let acc = job(&resolved).accuracy_trajectory();
    for w in acc.windows(2) {
        assert!(w[1] >= w[0] - 0.02, "{acc:?}");
    }
    assert!(*acc.last().unwrap() >= 0.95, "{acc:?}");
}

fn dataset(classes: usize, features: usize, values: &[f64], labels: &[usize]) -> Dataset {
    let n = labels.len();
    Dataset::new(classes, features, values[..n * features].to_vec(), labels.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Analytic gradient against central differences with eps = 1e-5.
    #[test]
    fn gradient_matches_finite_differences(
        classes in 2usize..5,
        features in 1usize..6,
        values in prop::collection::vec(-2.0f64..2.0, 40),
        raw_labels in prop::collection::vec(0usize..100, 1..7),
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = raw_labels.iter().map(|l| l % classes).collect();
        let data = dataset(classes, features, &values, &labels);
        let rows: Vec<usize> = (0..labels.len()).collect();
        let params = ModelParams::random(classes, features, 0.5, seed);
        let (_, grad) = loss_and_gradient(&params, &data, &rows);

        let flat: Vec<f64> = params.weights().iter().chain(params.bias()).copied().collect();
        let analytic: Vec<f64> = grad.weights().iter().chain(grad.bias()).copied().collect();
        let eps = 1e-5;
        let loss_at = |v: &[f64]| {
            let (w, b) = v.split_at(classes * features);
            let p = ModelParams::from_parts(classes, features, w.to_vec(), b.to_vec()).unwrap();
            loss_and_gradient(&p, &data, &rows).0
        };
        for i in 0..flat.len() {
            let mut up = flat.clone();
            let mut down = flat.clone();
            up[i] += eps;
            down[i] -= eps;
            let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * eps);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            prop_assert!(err < 1e-4, "param {}: numeric {} analytic {}", i, numeric, analytic[i]);
        }
    }
}
