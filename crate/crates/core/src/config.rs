//! The run configuration document and its resolution into a [`RunPlan`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::comm::{AttributionPolicy, CommEnergyModel, DEFAULT_NET_INTENSITY_KWH_PER_GB};
use crate::orchestrator::{FederatedData, RunPlan};
use crate::partition::{
    dirichlet_partition, LabeledDatasetDescriptor, PartitionConfig, PartitionOutcome,
};
use crate::report::log::is_plain_token;
use crate::site::{
    builtin_presets, GridRegion, HardwareProfile, SiteConfig, TierLabel, TierPresets,
    DEFAULT_REGION,
};
use crate::tracker::SamplingPolicy;
use crate::units::CarbonIntensity;
use crate::workload::{Dataset, SyntheticSpec, TrainConfig, WorkloadError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("`{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("`{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

fn yes() -> bool {
    true
}

fn one_second() -> f64 {
    1.0
}

fn default_net_intensity() -> f64 {
    DEFAULT_NET_INTENSITY_KWH_PER_GB
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigDocument {
    pub scenario: String,
    pub seed: u64,
    pub num_rounds: u32,
    #[serde(default = "yes")]
    pub evaluate_each_round: bool,
    #[serde(default = "one_second")]
    pub sampling_interval_s: f64,
    pub sites: Vec<SiteEntry>,
    #[serde(default)]
    pub comm: CommSection,
    pub partition: PartitionSection,
    #[serde(default)]
    pub workload: SyntheticSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Tier preset file, relative to the config file. Built-in tiers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier_presets: Option<String>,
    /// Extra or overriding hardware profiles.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hardware_profiles: Vec<HardwareProfile>,
    /// Extra or overriding region intensities (kg CO2e/kWh).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub regions: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    pub site_id: String,
    pub hardware: String,
    pub tier: TierLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommSection {
    #[serde(default = "default_net_intensity")]
    pub net_intensity_kwh_per_gb: f64,
    #[serde(default)]
    pub attribution: AttributionPolicy,
}

impl Default for CommSection {
    fn default() -> Self {
        Self {
            net_intensity_kwh_per_gb: DEFAULT_NET_INTENSITY_KWH_PER_GB,
            attribution: AttributionPolicy::Client,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub alpha: f64,
    /// One integer label per line, relative to the config file. Replaces the
    /// generator's balanced label sequence for the training set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<String>,
}

/// A validated document with every name resolved.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub document: RunConfigDocument,
    pub plan: RunPlan,
    pub partition: PartitionConfig,
    pub tiers: TierPresets,
    /// Training labels from `partition.labels_file`, if given.
    pub labels: Option<Vec<usize>>,
    pub run_id: String,
    pub config_hash: String,
}

impl RunConfigDocument {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Parse {
                path: if path == "." { "<root>".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Hex SHA-256 of the canonical (re-serialized) document.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.scenario, self.seed)
    }

    /// Validates and resolves presets; relative paths are taken from `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<ResolvedConfig, ConfigError> {
        if !is_plain_token(&self.scenario) {
            return Err(invalid("scenario", "must be a non-empty identifier"));
        }
        if self.num_rounds == 0 {
            return Err(invalid("num_rounds", "must be >= 1"));
        }
        if self.sites.is_empty() {
            return Err(invalid("sites", "at least one site is required"));
        }
        if !(self.partition.alpha.is_finite() && self.partition.alpha > 0.0) {
            return Err(invalid(
                "partition.alpha",
                format!("must be a finite number > 0, got {}", self.partition.alpha),
            ));
        }
        let sampling = SamplingPolicy::new(self.sampling_interval_s)
            .map_err(|_| invalid("sampling_interval_s", "must be > 0"))?;
        let comm = CommEnergyModel::new(self.comm.net_intensity_kwh_per_gb)
            .map_err(|_| invalid("comm.net_intensity_kwh_per_gb", "must be finite and >= 0"))?;
        let workload_field = |section: &str, e: WorkloadError| match e {
            WorkloadError::InvalidConfig { field, reason } => {
                invalid(format!("{section}.{field}"), reason)
            }
            other => invalid(section, other.to_string()),
        };
        self.workload
            .validate()
            .map_err(|e| workload_field("workload", e))?;
        self.train.validate().map_err(|e| workload_field("train", e))?;

        let mut presets = builtin_presets();
        for (i, hw) in self.hardware_profiles.iter().enumerate() {
            let field = format!("hardware_profiles[{i}]");
            if !is_plain_token(&hw.name) {
                return Err(invalid(format!("{field}.name"), "must be a non-empty identifier"));
            }
            hw.validate().map_err(|e| invalid(&field, e.to_string()))?;
            presets.hardware.insert(hw.name.clone(), hw.clone());
        }
        for (code, &ci) in &self.regions {
            let field = format!("regions.{code}");
            if !is_plain_token(code) {
                return Err(invalid(field, "region code must be an identifier"));
            }
            let ci = CarbonIntensity::new(ci).map_err(|e| invalid(field, e.to_string()))?;
            presets.regions.insert(code.clone(), ci);
        }
        let tiers = match &self.tier_presets {
            None => presets.tiers.clone(),
            Some(rel) => {
                let path = base_dir.join(rel);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                let tiers: TierPresets = serde_path_to_error::deserialize(de).map_err(|e| {
                    invalid(format!("tier_presets ({}): {}", path.display(), e.path()), e.inner().to_string())
                })?;
                tiers
                    .validate()
                    .map_err(|e| invalid("tier_presets", e.to_string()))?;
                tiers
            }
        };
        let region = |code: &str, field: String| -> Result<GridRegion, ConfigError> {
            presets
                .regions
                .get(code)
                .map(|&ci| GridRegion {
                    code: code.to_owned(),
                    ci,
                })
                .ok_or_else(|| invalid(field, format!("unknown region `{code}`")))
        };

        let mut ids = BTreeSet::new();
        let mut sites = Vec::with_capacity(self.sites.len());
        for (i, s) in self.sites.iter().enumerate() {
            let field = |name: &str| format!("sites[{i}].{name}");
            if !is_plain_token(&s.site_id) {
                return Err(invalid(field("site_id"), "must be a non-empty identifier"));
            }
            if !ids.insert(s.site_id.as_str()) {
                return Err(invalid(field("site_id"), format!("duplicate id `{}`", s.site_id)));
            }
            let hardware = presets
                .hardware
                .get(&s.hardware)
                .cloned()
                .ok_or_else(|| invalid(field("hardware"), format!("unknown profile `{}`", s.hardware)))?;
            let tier = tiers
                .get(s.tier)
                .ok_or_else(|| invalid(field("tier"), format!("no preset for tier `{}`", s.tier)))?;
            if let Some(f) = s.dataset_fraction {
                if !(0.0..=1.0).contains(&f) {
                    return Err(invalid(field("dataset_fraction"), "must be within [0, 1]"));
                }
            }
            sites.push(SiteConfig {
                site_id: s.site_id.clone(),
                hardware,
                tier,
                region: region(s.region.as_deref().unwrap_or(DEFAULT_REGION), field("region"))?,
                dataset_fraction: s.dataset_fraction,
            });
        }
        let server_region = match &self.comm.attribution {
            AttributionPolicy::Server { region: code } => {
                Some(region(code, "comm.attribution.region".into())?)
            }
            AttributionPolicy::Client => None,
        };

        let labels = match &self.partition.labels_file {
            None => None,
            Some(rel) => {
                let path = base_dir.join(rel);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                let desc = LabeledDatasetDescriptor::from_labels_text(&text)
                    .map_err(|e| invalid("partition.labels_file", e))?;
                if desc.num_classes() > self.workload.num_classes {
                    return Err(invalid(
                        "partition.labels_file",
                        format!(
                            "labels reach class {}, workload has {} classes",
                            desc.num_classes() - 1,
                            self.workload.num_classes
                        ),
                    ));
                }
                Some(desc.labels().to_vec())
            }
        };
        let num_samples = labels.as_ref().map_or(
            self.workload.samples_per_class * self.workload.num_classes,
            Vec::len,
        );
        if sites.len() > num_samples {
            return Err(invalid(
                "sites",
                format!("{} sites but only {num_samples} training samples", sites.len()),
            ));
        }
        if self.workload.test_samples_per_class == 0 {
            return Err(invalid("workload.test_samples_per_class", "must be >= 1"));
        }

        let plan = RunPlan {
            num_rounds: self.num_rounds,
            sites,
            train_cfg: self.train,
            evaluate_each_round: self.evaluate_each_round,
            sampling,
            comm,
            attribution: self.comm.attribution.clone(),
            server_region,
            seed: self.seed,
        };
        plan.validate()
            .map_err(|e| invalid("<plan>", e.to_string()))?;
        Ok(ResolvedConfig {
            plan,
            partition: PartitionConfig {
                num_clients: self.sites.len(),
                alpha: self.partition.alpha,
                seed: self.seed,
            },
            tiers,
            labels,
            run_id: self.run_id(),
            config_hash: self.hash(),
            document: self.clone(),
        })
    }
}

/// Generated data for a resolved configuration.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub train: Dataset,
    pub labels: LabeledDatasetDescriptor,
    pub partition: PartitionOutcome,
    pub federated: FederatedData,
}

impl ResolvedConfig {
    /// Generates the training and test sets and partitions the training set.
    pub fn build_data(&self) -> Result<ScenarioData, crate::partition::PartitionError> {
        let spec = &self.document.workload;
        let seed = self.document.seed;
        let train = match &self.labels {
            Some(labels) => spec.generate_for_labels(labels.clone(), SyntheticSpec::train_seed(seed)),
            None => spec.generate(spec.samples_per_class, SyntheticSpec::train_seed(seed)),
        };
        let test = spec.generate(spec.test_samples_per_class, SyntheticSpec::test_seed(seed));
        let desc = LabeledDatasetDescriptor::new(spec.num_classes, train.labels().to_vec())?;
        let partition = dirichlet_partition(&desc, &self.partition)?;
        let federated = FederatedData::from_partitions(&train, test, &partition.partitions);
        Ok(ScenarioData {
            train,
            labels: desc,
            partition,
            federated,
        })
    }
}

/// Loads, validates and resolves a config file, optionally overriding its seed.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ResolvedConfig, ConfigError> {
    let mut doc = RunConfigDocument::load(path)?;
    if let Some(seed) = seed {
        doc.seed = seed;
    }
    let base = path.parent().unwrap_or(Path::new("."));
    doc.resolve(base)
}
