use std::path::{Path, PathBuf};

/// A small two-region scenario that trains in well under a second.
pub fn tiny_config(rounds: u32, sites: &[(&str, &str, &str)], alpha: f64, seed: u64) -> String {
    let sites: Vec<String> = sites
        .iter()
        .map(|(id, tier, region)| {
            format!(r#"{{"site_id": "{id}", "hardware": "cifar_client", "tier": "{tier}", "region": "{region}"}}"#)
        })
        .collect();
    format!(
        r#"{{
  "scenario": "tiny",
  "seed": {seed},
  "num_rounds": {rounds},
  "sites": [{}],
  "comm": {{"net_intensity_kwh_per_gb": 0.006}},
  "partition": {{"alpha": {alpha:?}}},
  "workload": {{"num_classes": 3, "num_features": 6, "samples_per_class": 60, "test_samples_per_class": 20}},
  "train": {{"local_epochs": 2, "batch_size": 8, "learning_rate": 0.1}}
}}"#,
        sites.join(", ")
    )
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}
