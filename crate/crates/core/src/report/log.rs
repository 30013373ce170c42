//! `rounds.csv`: one row per measured span.
//!
//! UTF-8, LF line endings, comma separated, no quoting. Floats are written in
//! Rust's shortest round-trip decimal form, so parsing a written log gives
//! back bit-identical values.

use std::fmt::Write as _;

use serde::Serialize;

use super::ReportError;
use crate::tracker::PhaseKind;

pub const SCHEMA_VERSION: &str = "gfl-1";

/// Column order of the round log.
pub const FIELDS: [&str; 16] = [
    "run_id",
    "site_id",
    "round_index",
    "phase",
    "start_s",
    "duration_s",
    "energy_kwh",
    "co2e_kg",
    "ci_kg_per_kwh",
    "region_code",
    "hardware_name",
    "tier_label",
    "payload_bytes",
    "net_intensity_kwh_per_gb",
    "seed",
    "schema_version",
];

/// One row of the round log: the mandatory reporting fields for a span.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub run_id: String,
    pub site_id: String,
    pub round_index: u32,
    #[serde(serialize_with = "ser_phase")]
    pub phase: PhaseKind,
    pub start_s: f64,
    pub duration_s: f64,
    pub energy_kwh: f64,
    pub co2e_kg: f64,
    pub ci_kg_per_kwh: f64,
    pub region_code: String,
    pub hardware_name: String,
    pub tier_label: String,
    /// Only present on `round` rows.
    pub payload_bytes: Option<u64>,
    pub net_intensity_kwh_per_gb: f64,
    pub seed: u64,
    pub schema_version: String,
}

fn ser_phase<S: serde::Serializer>(p: &PhaseKind, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(p.task_name())
}

fn violation(field: &'static str, reason: impl Into<String>) -> ReportError {
    ReportError::SchemaViolation {
        field,
        reason: reason.into(),
    }
}

/// Identifier-like text that can go into an unquoted CSV cell.
pub fn is_plain_token(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':' | '+'))
}

impl RoundRecord {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        for (field, value) in [
            ("run_id", &self.run_id),
            ("site_id", &self.site_id),
            ("region_code", &self.region_code),
            ("hardware_name", &self.hardware_name),
            ("tier_label", &self.tier_label),
        ] {
            if !is_plain_token(value) {
                return Err(violation(field, format!("`{value}` is not a plain token")));
            }
        }
        if self.schema_version != SCHEMA_VERSION {
            return Err(violation(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got `{}`", self.schema_version),
            ));
        }
        if self.phase.round_index() != self.round_index {
            return Err(violation("round_index", "does not match phase"));
        }
        for (field, v) in [
            ("start_s", self.start_s),
            ("duration_s", self.duration_s),
            ("energy_kwh", self.energy_kwh),
            ("co2e_kg", self.co2e_kg),
            ("ci_kg_per_kwh", self.ci_kg_per_kwh),
            ("net_intensity_kwh_per_gb", self.net_intensity_kwh_per_gb),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(violation(field, format!("{v} is not a finite non-negative number")));
            }
        }
        let expected = self.energy_kwh * self.ci_kg_per_kwh;
        if (self.co2e_kg - expected).abs() > 1e-9 * expected.abs().max(self.co2e_kg.abs()) {
            return Err(violation(
                "co2e_kg",
                format!("{} != energy x ci = {expected}", self.co2e_kg),
            ));
        }
        match (self.phase, self.payload_bytes) {
            (PhaseKind::Round(_), None) => {
                return Err(violation("payload_bytes", "required on round rows"))
            }
            (PhaseKind::Round(_), Some(_)) | (_, None) => {}
            (_, Some(_)) => {
                return Err(violation("payload_bytes", "only round rows carry a payload"))
            }
        }
        Ok(())
    }
}

/// Serializes `records` with a header row; validates every record first.
pub fn write_round_log(records: &[RoundRecord]) -> Result<String, ReportError> {
    let mut out = FIELDS.join(",");
    out.push('\n');
    for r in records {
        r.validate()?;
        let payload = r.payload_bytes.map(|b| b.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.site_id,
            r.round_index,
            r.phase.task_name(),
            r.start_s,
            r.duration_s,
            r.energy_kwh,
            r.co2e_kg,
            r.ci_kg_per_kwh,
            r.region_code,
            r.hardware_name,
            r.tier_label,
            payload,
            r.net_intensity_kwh_per_gb,
            r.seed,
            r.schema_version,
        )
        .expect("writing to a String");
    }
    Ok(out)
}

fn cell(row: &csv::StringRecord, idx: usize) -> Result<&str, ReportError> {
    match row.get(idx) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(violation(FIELDS[idx], "missing value")),
    }
}

fn parse_cell<T: std::str::FromStr>(row: &csv::StringRecord, idx: usize) -> Result<T, ReportError>
where
    T::Err: std::fmt::Display,
{
    let raw = cell(row, idx)?;
    raw.parse()
        .map_err(|e: T::Err| violation(FIELDS[idx], format!("`{raw}`: {e}")))
}

/// Parses a round log written by [`write_round_log`], validating each row.
pub fn parse_round_log(text: &str) -> Result<Vec<RoundRecord>, ReportError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| ReportError::Malformed(e.to_string()))?
        .clone();
    if header.iter().ne(FIELDS.iter().copied()) {
        return Err(ReportError::Malformed(format!(
            "unexpected header `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| ReportError::Malformed(e.to_string()))?;
        if row.len() != FIELDS.len() {
            return Err(ReportError::Malformed(format!(
                "row {} has {} fields, expected {}",
                line + 1,
                row.len(),
                FIELDS.len()
            )));
        }
        let round_index: u32 = parse_cell(&row, 2)?;
        let phase_name = cell(&row, 3)?;
        let phase = PhaseKind::from_parts(phase_name, round_index)
            .ok_or_else(|| violation("phase", format!("`{phase_name}` in round {round_index}")))?;
        let payload_bytes = match row.get(12) {
            Some("") | None => None,
            Some(_) => Some(parse_cell(&row, 12)?),
        };
        let record = RoundRecord {
            run_id: cell(&row, 0)?.to_owned(),
            site_id: cell(&row, 1)?.to_owned(),
            round_index,
            phase,
            start_s: parse_cell(&row, 4)?,
            duration_s: parse_cell(&row, 5)?,
            energy_kwh: parse_cell(&row, 6)?,
            co2e_kg: parse_cell(&row, 7)?,
            ci_kg_per_kwh: parse_cell(&row, 8)?,
            region_code: cell(&row, 9)?.to_owned(),
            hardware_name: cell(&row, 10)?.to_owned(),
            tier_label: cell(&row, 11)?.to_owned(),
            payload_bytes,
            net_intensity_kwh_per_gb: parse_cell(&row, 13)?,
            seed: parse_cell(&row, 14)?,
            schema_version: cell(&row, 15)?.to_owned(),
        };
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(phase: PhaseKind) -> RoundRecord {
        RoundRecord {
            run_id: "run-1".into(),
            site_id: "site-1".into(),
            round_index: phase.round_index(),
            phase,
            start_s: 1.5,
            duration_s: 2.25,
            energy_kwh: 0.0000625,
            co2e_kg: 0.0000625 * 0.39,
            ci_kg_per_kwh: 0.39,
            region_code: "USA".into(),
            hardware_name: "cifar_client".into(),
            tier_label: "high".into(),
            payload_bytes: matches!(phase, PhaseKind::Round(_)).then_some(3640),
            net_intensity_kwh_per_gb: 0.006,
            seed: 0,
            schema_version: SCHEMA_VERSION.into(),
        }
    }

    #[test]
    fn empty_log_is_header_only() {
        let text = write_round_log(&[]).unwrap();
        assert_eq!(text, format!("{}\n", FIELDS.join(",")));
        assert!(text.contains("schema_version"));
        assert!(parse_round_log(&text).unwrap().is_empty());
    }

    #[test]
    fn missing_ci_is_a_violation() {
        let mut r = sample(PhaseKind::Round(1));
        r.ci_kg_per_kwh = f64::NAN;
        match write_round_log(&[r]) {
            Err(ReportError::SchemaViolation { field, .. }) => assert_eq!(field, "ci_kg_per_kwh"),
            other => panic!("unexpected {other:?}"),
        }

        let good = write_round_log(&[sample(PhaseKind::Round(1))]).unwrap();
        let mut lines: Vec<String> = good.lines().map(str::to_owned).collect();
        let mut cells: Vec<&str> = lines[1].split(',').collect();
        cells[8] = "";
        lines[1] = cells.join(",");
        match parse_round_log(&(lines.join("\n") + "\n")) {
            Err(ReportError::SchemaViolation { field, .. }) => assert_eq!(field, "ci_kg_per_kwh"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut records = vec![
            sample(PhaseKind::Init),
            sample(PhaseKind::Round(1)),
            sample(PhaseKind::Evaluate(1)),
            sample(PhaseKind::Idle(1)),
        ];
        records[1].energy_kwh = 1.0 / 3.0 * 1e-7;
        records[1].co2e_kg = records[1].energy_kwh * 0.39;
        let text = write_round_log(&records).unwrap();
        assert!(!text.contains('\r'));
        assert_eq!(parse_round_log(&text).unwrap(), records);
    }

    #[test]
    fn inconsistent_co2e_rejected() {
        let mut r = sample(PhaseKind::Idle(2));
        r.co2e_kg *= 1.01;
        assert!(matches!(
            r.validate(),
            Err(ReportError::SchemaViolation { field: "co2e_kg", .. })
        ));
    }

    #[test]
    fn payload_only_on_round_rows() {
        let mut r = sample(PhaseKind::Idle(1));
        r.payload_bytes = Some(1);
        assert!(r.validate().is_err());
        let mut r = sample(PhaseKind::Round(1));
        r.payload_bytes = None;
        assert!(r.validate().is_err());
    }

    #[test]
    fn commas_in_ids_rejected() {
        let mut r = sample(PhaseKind::Init);
        r.site_id = "a,b".into();
        assert!(matches!(
            r.validate(),
            Err(ReportError::SchemaViolation { field: "site_id", .. })
        ));
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(matches!(
            parse_round_log("a,b\n"),
            Err(ReportError::Malformed(_))
        ));
    }
}
