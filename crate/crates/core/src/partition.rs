//! Dirichlet label-skew partitioning of a labeled dataset across clients.
//!
//! For each class in ascending order, client proportions are drawn as
//! normalized independent Gamma(alpha, 1) variates (one per client, in client
//! order, all from one [`SimRng`] seeded with the partition seed). The class's
//! samples, in ascending index order, are then handed out in contiguous
//! blocks whose sizes come from largest-remainder rounding of
//! `proportion * class_size` (ties go to the lower client index).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("dirichlet alpha must be > 0, got {0}")]
    InvalidAlpha(f64),
    #[error("need at least one client")]
    NoClients,
    #[error("{clients} clients but only {samples} samples")]
    TooManyClients { clients: usize, samples: usize },
    #[error("num_classes must be >= 1")]
    NoClasses,
    #[error("label {label} at index {index} is outside 0..{num_classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
}

/// Labels of a dataset; the features are irrelevant to partitioning.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDatasetDescriptor {
    num_classes: usize,
    labels: Vec<usize>,
}

impl LabeledDatasetDescriptor {
    pub fn new(num_classes: usize, labels: Vec<usize>) -> Result<Self, PartitionError> {
        if num_classes == 0 {
            return Err(PartitionError::NoClasses);
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(PartitionError::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        Ok(Self {
            num_classes,
            labels,
        })
    }

    /// Reads one integer label per line; the class count is `max + 1`.
    pub fn from_labels_text(text: &str) -> Result<Self, String> {
        let labels = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim()
                    .parse::<usize>()
                    .map_err(|e| format!("line {}: {e}", i + 1))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let num_classes = labels.iter().max().map_or(1, |m| m + 1);
        Self::new(num_classes, labels).map_err(|e| e.to_string())
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    pub client_id: usize,
    /// Ascending, unique.
    pub sample_indices: Vec<usize>,
}

/// Proportions and rounded counts drawn for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAllocation {
    pub proportions: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Full result, including the per-class draws used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOutcome {
    pub partitions: Vec<ClientPartition>,
    pub allocations: Vec<ClassAllocation>,
}

/// Splits `total` into integer counts proportional to `proportions`
/// (which sum to 1) by largest remainder.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // Stable sort keeps lower indices first among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn dirichlet_partition(
    dataset: &LabeledDatasetDescriptor,
    cfg: &PartitionConfig,
) -> Result<PartitionOutcome, PartitionError> {
    if dataset.num_samples() == 0 {
        return Err(PartitionError::EmptyDataset);
    }
    if !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
        return Err(PartitionError::InvalidAlpha(cfg.alpha));
    }
    if cfg.num_clients == 0 {
        return Err(PartitionError::NoClients);
    }
    if cfg.num_clients > dataset.num_samples() {
        return Err(PartitionError::TooManyClients {
            clients: cfg.num_clients,
            samples: dataset.num_samples(),
        });
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &label) in dataset.labels().iter().enumerate() {
        by_class[label].push(i);
    }

    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_clients];
    let mut allocations = Vec::with_capacity(by_class.len());
    for indices in &by_class {
        let draws: Vec<f64> = (0..cfg.num_clients).map(|_| rng.gamma(cfg.alpha)).collect();
        let sum: f64 = draws.iter().sum();
        let proportions: Vec<f64> = draws.iter().map(|g| g / sum).collect();
        let counts = largest_remainder(&proportions, indices.len());
        let mut offset = 0;
        for (client, &n) in counts.iter().enumerate() {
            members[client].extend_from_slice(&indices[offset..offset + n]);
            offset += n;
        }
        allocations.push(ClassAllocation {
            proportions,
            counts,
        });
    }

    let partitions = members
        .into_iter()
        .enumerate()
        .map(|(client_id, mut sample_indices)| {
            sample_indices.sort_unstable();
            ClientPartition {
                client_id,
                sample_indices,
            }
        })
        .collect();
    Ok(PartitionOutcome {
        partitions,
        allocations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionReport {
    pub disjoint: bool,
    pub exhaustive: bool,
    pub duplicated: Vec<usize>,
    pub missing: Vec<usize>,
    pub out_of_range: Vec<usize>,
    pub client_sizes: Vec<usize>,
}

impl PartitionReport {
    pub fn is_valid(&self) -> bool {
        self.disjoint && self.exhaustive && self.out_of_range.is_empty()
    }

    pub fn total_assigned(&self) -> usize {
        self.client_sizes.iter().sum()
    }
}

pub fn validate_partition(
    dataset: &LabeledDatasetDescriptor,
    partitions: &[ClientPartition],
) -> PartitionReport {
    let n = dataset.num_samples();
    let mut seen = vec![0u32; n];
    let mut out_of_range = Vec::new();
    for p in partitions {
        for &i in &p.sample_indices {
            match seen.get_mut(i) {
                Some(c) => *c += 1,
                None => out_of_range.push(i),
            }
        }
    }
    let duplicated: Vec<usize> = (0..n).filter(|&i| seen[i] > 1).collect();
    let missing: Vec<usize> = (0..n).filter(|&i| seen[i] == 0).collect();
    PartitionReport {
        disjoint: duplicated.is_empty(),
        exhaustive: missing.is_empty(),
        duplicated,
        missing,
        out_of_range,
        client_sizes: partitions.iter().map(|p| p.sample_indices.len()).collect(),
    }
}

/// Class-count matrix `[client][class]`.
pub fn class_counts(
    dataset: &LabeledDatasetDescriptor,
    partitions: &[ClientPartition],
) -> Vec<Vec<usize>> {
    partitions
        .iter()
        .map(|p| {
            let mut row = vec![0; dataset.num_classes()];
            for &i in &p.sample_indices {
                row[dataset.labels()[i]] += 1;
            }
            row
        })
        .collect()
}
