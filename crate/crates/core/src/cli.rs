//! Command-line front end: `run`, `report`, `whatif` and `calibrate`.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on invalid input.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{load_config, ConfigError, RunConfigDocument};
use crate::orchestrator::{run_job, RoundWork, RunPlan};
use crate::partition::class_counts;
use crate::report::{
    calibrate_tiers, meta_for_job, parse_round_log, records_from_job, remap_grid_intensity,
    summarize_run, write_round_log, CalibrationSearch, CalibrationTargets, ReportError, RunReport,
    SCHEMA_VERSION,
};
use crate::site::{builtin_presets, TierPresets};
use crate::units::CarbonIntensity;

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const RUN_FILE: &str = "run.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "fedcarbon", version, about = "Federated-learning carbon accounting simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write rounds.csv, run.json and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-site totals of one or more runs, with ratios between runs.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Recompute a run's emissions under a different grid intensity.
    Whatif {
        #[arg(long = "in")]
        input: PathBuf,
        /// Intensity in kg CO2e/kWh applied to every region.
        #[arg(long, conflicts_with = "region", required_unless_present = "region")]
        ci: Option<f64>,
        /// Built-in region whose intensity is applied to every region.
        #[arg(long)]
        region: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Fit tier presets to target per-round means and runtimes.
    Calibrate {
        /// Output directory of a high-tier run.
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(format!("invalid config: {e}"))
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: String,
    pub tool: String,
    pub tool_version: String,
    pub run_id: String,
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfigDocument,
    /// Fully resolved plan, including the presets applied to each site.
    pub plan: RunPlan,
    pub tier_presets: TierPresets,
    pub partition: PartitionSummary,
    pub trace: Vec<RoundWork>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
    pub client_sizes: Vec<usize>,
    /// `[client][class]` sample counts.
    pub class_counts: Vec<Vec<usize>>,
}

/// A run directory loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub report: RunReport,
    pub metadata: RunMetadata,
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Run { config, seed, out: dir } => {
            let report = cmd_run(config, *seed, dir.as_deref())?;
            writeln!(
                out,
                "{}: {} sites x {} rounds, total {:.6e} kg CO2e, runtime {:.2} min",
                report.run_id, report.num_sites, report.num_rounds, report.total_co2e_kg, report.runtime_min
            )
            .map_err(runtime)
        }
        Command::Report { inputs, format } => {
            let text = cmd_report(inputs, *format)?;
            out.write_all(text.as_bytes()).map_err(runtime)
        }
        Command::Whatif {
            input,
            ci,
            region,
            format,
        } => {
            let text = cmd_whatif(input, *ci, region.as_deref(), *format)?;
            out.write_all(text.as_bytes()).map_err(runtime)
        }
        Command::Calibrate {
            baseline,
            targets,
            out: path,
        } => {
            let text = cmd_calibrate(baseline, targets, path)?;
            out.write_all(text.as_bytes()).map_err(runtime)
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn json_text<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(runtime)?;
    s.push('\n');
    Ok(s)
}

/// Runs the scenario in `config` and writes its three artifacts to the output directory.
pub fn cmd_run(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunReport, CliError> {
    let resolved = load_config(config, seed)?;
    let dir = match (out, &resolved.document.output_dir) {
        (Some(d), _) => d.to_owned(),
        (None, Some(d)) => config.parent().unwrap_or(Path::new(".")).join(d),
        (None, None) => {
            return Err(CliError::Validation(
                "no output directory: pass --out or set `output_dir`".into(),
            ))
        }
    };
    let data = resolved.build_data().map_err(runtime)?;
    let job = run_job(&resolved.plan, &data.federated).map_err(runtime)?;
    let records = records_from_job(&resolved.plan, &job, &resolved.run_id).map_err(runtime)?;
    let meta = meta_for_job(&resolved.plan, &job, &resolved.run_id, &resolved.document.scenario);
    let report = summarize_run(&records, &meta).map_err(runtime)?;
    let log = write_round_log(&records).map_err(runtime)?;

    let metadata = RunMetadata {
        schema_version: SCHEMA_VERSION.into(),
        tool: env!("CARGO_PKG_NAME").into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        run_id: resolved.run_id.clone(),
        scenario: resolved.document.scenario.clone(),
        seed: resolved.document.seed,
        config_hash: resolved.config_hash.clone(),
        config: resolved.document.clone(),
        plan: resolved.plan.clone(),
        tier_presets: resolved.tiers.clone(),
        partition: PartitionSummary {
            num_clients: resolved.partition.num_clients,
            alpha: resolved.partition.alpha,
            seed: resolved.partition.seed,
            client_sizes: data.partition.partitions.iter().map(|p| p.sample_indices.len()).collect(),
            class_counts: class_counts(&data.labels, &data.partition.partitions),
        },
        trace: job.trace.clone(),
    };

    std::fs::create_dir_all(&dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    write_file(&dir.join(ROUNDS_FILE), &log)?;
    write_file(&dir.join(RUN_FILE), &json_text(&metadata)?)?;
    write_file(&dir.join(SUMMARY_FILE), &json_text(&report)?)?;
    Ok(report)
}

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// Loads a run directory and re-folds its round log.
pub fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let log = read_input(&dir.join(ROUNDS_FILE))?;
    let records = parse_round_log(&log)
        .map_err(|e| validation(format!("{}: {e}", dir.join(ROUNDS_FILE).display())))?;
    let summary: RunReport = serde_json::from_str(&read_input(&dir.join(SUMMARY_FILE))?)
        .map_err(|e| validation(format!("{}: {e}", dir.join(SUMMARY_FILE).display())))?;
    let metadata: RunMetadata = serde_json::from_str(&read_input(&dir.join(RUN_FILE))?)
        .map_err(|e| validation(format!("{}: {e}", dir.join(RUN_FILE).display())))?;
    let report = summarize_run(&records, &summary.meta()).map_err(validation)?;
    if !close(report.total_co2e_kg, summary.total_co2e_kg)
        || !close(report.total_energy_kwh, summary.total_energy_kwh)
    {
        return Err(CliError::Validation(format!(
            "{}: summary.json totals disagree with rounds.csv",
            dir.display()
        )));
    }
    Ok(LoadedRun {
        dir: dir.to_owned(),
        report,
        metadata,
    })
}

/// Ratios of one run to a reference run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRatio {
    pub numerator: String,
    pub denominator: String,
    pub co2e_ratio: f64,
    pub energy_ratio: f64,
    pub mean_energy_ratio: f64,
    pub runtime_ratio: f64,
}

fn run_labels(reports: &[RunReport]) -> Vec<String> {
    let tiers: Vec<Option<&String>> = reports.iter().map(|r| r.tier_label.as_ref()).collect();
    let distinct = tiers.iter().all(Option::is_some)
        && tiers.iter().collect::<std::collections::BTreeSet<_>>().len() == tiers.len();
    reports
        .iter()
        .map(|r| match (&r.tier_label, distinct) {
            (Some(t), true) => t.clone(),
            _ => r.scenario.clone(),
        })
        .collect()
}

/// Ratios of every run to the reference: the first all-high run, else the first run.
pub fn run_ratios(reports: &[RunReport]) -> Vec<RunRatio> {
    if reports.len() < 2 {
        return Vec::new();
    }
    let labels = run_labels(reports);
    let base = reports
        .iter()
        .position(|r| r.tier_label.as_deref() == Some("high"))
        .unwrap_or(0);
    let b = &reports[base];
    let div = |a: f64, b: f64| if b == 0.0 { f64::NAN } else { a / b };
    reports
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != base)
        .map(|(i, r)| RunRatio {
            numerator: labels[i].clone(),
            denominator: labels[base].clone(),
            co2e_ratio: div(r.total_co2e_kg, b.total_co2e_kg),
            energy_ratio: div(r.total_energy_kwh, b.total_energy_kwh),
            mean_energy_ratio: div(r.mean_energy_per_round_kwh, b.mean_energy_per_round_kwh),
            runtime_ratio: div(r.runtime_s, b.runtime_s),
        })
        .collect()
}

fn site_table(report: &RunReport, out: &mut String) {
    use std::fmt::Write as _;
    let _ = writeln!(
        out,
        "run {} (scenario {}, seed {}, {} sites x {} rounds)",
        report.run_id, report.scenario, report.seed, report.num_sites, report.num_rounds
    );
    let _ = writeln!(
        out,
        "  {:<10} {:<6} {:<14} {:<6} {:>14} {:>14} {:>10}",
        "site", "region", "hardware", "tier", "energy_kwh", "co2e_kg", "runtime_min"
    );
    for s in &report.sites {
        let _ = writeln!(
            out,
            "  {:<10} {:<6} {:<14} {:<6} {:>14.9} {:>14.9} {:>10.3}",
            s.site_id,
            s.region_code,
            s.hardware_name,
            s.tier_label,
            s.total_energy_kwh,
            s.total_co2e_kg,
            s.runtime_s / 60.0
        );
    }
    let c = &report.categories;
    let _ = writeln!(
        out,
        "  total energy {:.9} kWh, total {:.9} kg CO2e (init {:.3e}, train {:.3e}, evaluate {:.3e}, idle {:.3e}, comm {:.3e} kg)",
        report.total_energy_kwh,
        report.total_co2e_kg,
        c.init.co2e_kg,
        c.train.co2e_kg,
        c.evaluate.co2e_kg,
        c.idle.co2e_kg,
        c.communication.co2e_kg
    );
    let _ = writeln!(
        out,
        "  mean energy/round {:.9} kWh ({:.9} kWh per site-round), runtime {:.3} min, final accuracy {}",
        report.mean_energy_per_round_kwh,
        report.mean_energy_per_site_round_kwh,
        report.runtime_min,
        report
            .accuracy
            .last()
            .map_or_else(|| "n/a".to_owned(), |a| format!("{a:.4}"))
    );
}

fn ratio_text(ratios: &[RunRatio], out: &mut String) {
    if ratios.is_empty() {
        return;
    }
    let line = |f: fn(&RunRatio) -> f64| {
        ratios
            .iter()
            .map(|r| format!("{}/{}={:.2}", r.numerator, r.denominator, f(r)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    out.push_str(&format!("co2e ratios: {}\n", line(|r| r.co2e_ratio)));
    out.push_str(&format!("mean energy ratios: {}\n", line(|r| r.mean_energy_ratio)));
    out.push_str(&format!("runtime ratios: {}\n", line(|r| r.runtime_ratio)));
}

fn site_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(
        "run_id,site_id,region_code,hardware_name,tier_label,compute_energy_kwh,compute_co2e_kg,comm_energy_kwh,comm_co2e_kg,total_energy_kwh,total_co2e_kg,runtime_s,idle_s\n",
    );
    for r in reports {
        for s in &r.sites {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.run_id,
                s.site_id,
                s.region_code,
                s.hardware_name,
                s.tier_label,
                s.compute_energy_kwh,
                s.compute_co2e_kg,
                s.comm_energy_kwh,
                s.comm_co2e_kg,
                s.total_energy_kwh,
                s.total_co2e_kg,
                s.runtime_s,
                s.idle_s
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct ReportJson<'a> {
    runs: &'a [RunReport],
    ratios: Vec<RunRatio>,
}

fn render(reports: &[RunReport], format: Format) -> Result<String, CliError> {
    Ok(match format {
        Format::Text => {
            let mut out = String::new();
            for r in reports {
                site_table(r, &mut out);
            }
            ratio_text(&run_ratios(reports), &mut out);
            out
        }
        Format::Json => json_text(&ReportJson {
            runs: reports,
            ratios: run_ratios(reports),
        })?,
        Format::Csv => site_csv(reports),
    })
}

pub fn cmd_report(inputs: &[PathBuf], format: Format) -> Result<String, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Validation("no run directories given".into()));
    }
    let reports = inputs
        .iter()
        .map(|d| load_run(d).map(|r| r.report))
        .collect::<Result<Vec<_>, _>>()?;
    render(&reports, format)
}

/// Remapped report for a run, with one intensity applied to every region.
pub fn whatif_report(run: &LoadedRun, ci: Option<f64>, region: Option<&str>) -> Result<RunReport, CliError> {
    let ci = match (ci, region) {
        (Some(v), None) => CarbonIntensity::new(v).map_err(validation)?,
        (None, Some(code)) => *builtin_presets()
            .regions
            .get(code)
            .ok_or_else(|| CliError::Validation(format!("unknown region `{code}`")))?,
        _ => return Err(CliError::Validation("exactly one of --ci and --region is required".into())),
    };
    let map: BTreeMap<String, CarbonIntensity> = run
        .report
        .region_intensities()
        .into_keys()
        .map(|code| (code, ci))
        .collect();
    remap_grid_intensity(&run.report, &map).map_err(|e| match e {
        ReportError::UnknownRegion(_) => validation(e),
        other => runtime(other),
    })
}

pub fn cmd_whatif(input: &Path, ci: Option<f64>, region: Option<&str>, format: Format) -> Result<String, CliError> {
    let run = load_run(input)?;
    let remapped = whatif_report(&run, ci, region)?;
    match format {
        Format::Text => {
            let mut out = String::new();
            site_table(&remapped, &mut out);
            out.push_str(&format!(
                "co2e vs original: {:.6}x\n",
                remapped.total_co2e_kg / run.report.total_co2e_kg
            ));
            Ok(out)
        }
        other => render(std::slice::from_ref(&remapped), other),
    }
}

/// Fits tiers to `targets` from a high-tier baseline run and writes the presets to `out`.
pub fn cmd_calibrate(baseline: &Path, targets: &Path, out: &Path) -> Result<String, CliError> {
    let run = load_run(baseline)?;
    let text = read_input(targets)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let targets: CalibrationTargets = serde_path_to_error::deserialize(de)
        .map_err(|e| validation(format!("{}: `{}`: {}", targets.display(), e.path(), e.inner())))?;
    let result = calibrate_tiers(
        &run.metadata.plan,
        &run.metadata.trace,
        &targets,
        &CalibrationSearch::default(),
    )
    .map_err(|e| match e {
        ReportError::CalibrationFailed(_) => runtime(e),
        ReportError::Orchestrator(_) => validation(e),
        other => runtime(other),
    })?;
    result.presets.validate().map_err(runtime)?;
    write_file(out, &json_text(&result.presets)?)?;
    let mut text = String::new();
    for f in &result.fits {
        text.push_str(&format!(
            "{}: slowdown_factor={:.6} power_scale={:.6} energy ratio {:.4} (target {:.4}) runtime ratio {:.4} (target {:.4})\n",
            f.label,
            f.slowdown_factor,
            f.power_scale,
            f.energy_ratio_achieved,
            f.energy_ratio_target,
            f.runtime_ratio_achieved,
            f.runtime_ratio_target
        ));
    }
    Ok(text)
}
