//! Deterministic simulator for the energy and carbon cost of federated learning.
//!
//! A run partitions a synthetic labelled dataset across simulated sites,
//! trains a multinomial logistic model with FedAvg, and charges every phase
//! of every site (init, local training, evaluation, idle waiting) to a
//! simulated-time emissions tracker. Communication is estimated from update
//! sizes. Results are written as a round log plus a JSON summary.

pub mod cli;
pub mod comm;
pub mod config;
pub mod orchestrator;
pub mod partition;
pub mod report;
pub mod rng;
pub mod site;
pub mod tracker;
pub mod units;
pub mod workload;
