//! Machine-readable run reports and the schema gate every report passes
//! through before it is written.
//!
//! Reports are JSON; raw curves go to CSV next to them so they are
//! plot-ready without extra tooling. The schema lives in
//! `schema/run_report.schema.json` and is enforced by [`validate_report`],
//! a structural checker covering the subset of JSON Schema the file uses
//! (type, enum, required, properties, additionalProperties, items).

use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;
pub const SCHEMA_SOURCE: &str = include_str!("../schema/run_report.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictStatus {
    Pass,
    Fail,
    Skipped,
}

/// One checked claim with its measured evidence.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: String,
    pub status: VerdictStatus,
    pub measured: Value,
}

impl Verdict {
    pub fn new(name: impl Into<String>, pass: bool, measured: Value) -> Self {
        Verdict {
            name: name.into(),
            status: if pass {
                VerdictStatus::Pass
            } else {
                VerdictStatus::Fail
            },
            measured,
        }
    }

    pub fn skipped(name: impl Into<String>, measured: Value) -> Self {
        Verdict {
            name: name.into(),
            status: VerdictStatus::Skipped,
            measured,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub task_loss: f64,
    pub ortho_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub n: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub median_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub variant: String,
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkSection {
    pub d: usize,
    pub repeats: usize,
    pub warmups: usize,
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<SlopeFit>,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub artifact_version: String,
    pub timestamp_unix_s: u64,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub config: Value,
    pub verdicts: Vec<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<Vec<EpochRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSection>,
    pub artifacts: Vec<String>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, seed: u64, threads: usize, config: Value) -> Self {
        RunReport {
            schema_version: SCHEMA_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            command: command.to_string(),
            seed,
            threads,
            config,
            verdicts: Vec::new(),
            epochs: None,
            benchmark: None,
            artifacts: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn any_failure(&self) -> bool {
        self.verdicts
            .iter()
            .any(|v| v.status == VerdictStatus::Fail)
    }

    /// Serialize, validate against the published schema, and return the
    /// pretty JSON. Refuses to produce an invalid report.
    pub fn to_validated_json(&self) -> Result<String, String> {
        let value = serde_json::to_value(self).map_err(|e| e.to_string())?;
        validate_report(&value)?;
        serde_json::to_string_pretty(&value).map_err(|e| e.to_string())
    }
}

/// Validate a report document against the published schema.
pub fn validate_report(doc: &Value) -> Result<(), String> {
    let schema: Value =
        serde_json::from_str(SCHEMA_SOURCE).map_err(|e| format!("schema unreadable: {e}"))?;
    validate_value(doc, &schema, "$")
}

fn validate_value(doc: &Value, schema: &Value, path: &str) -> Result<(), String> {
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(doc) {
            return Err(format!("{path}: value {doc} not in enum {allowed:?}"));
        }
        return Ok(());
    }
    match schema.get("type").and_then(Value::as_str) {
        Some("object") => {
            let obj = doc
                .as_object()
                .ok_or_else(|| format!("{path}: expected object"))?;
            let props = schema.get("properties").and_then(Value::as_object);
            if let Some(required) = schema.get("required").and_then(Value::as_array) {
                for key in required.iter().filter_map(Value::as_str) {
                    if !obj.contains_key(key) {
                        return Err(format!("{path}: missing required field '{key}'"));
                    }
                }
            }
            let additional_ok = schema
                .get("additionalProperties")
                .map(|v| v != &Value::Bool(false))
                .unwrap_or(true);
            for (key, child) in obj {
                match props.and_then(|p| p.get(key)) {
                    Some(child_schema) => {
                        validate_value(child, child_schema, &format!("{path}.{key}"))?
                    }
                    None if additional_ok => {}
                    None => return Err(format!("{path}: unexpected field '{key}'")),
                }
            }
            Ok(())
        }
        Some("array") => {
            let arr = doc
                .as_array()
                .ok_or_else(|| format!("{path}: expected array"))?;
            if let Some(item_schema) = schema.get("items") {
                for (i, item) in arr.iter().enumerate() {
                    validate_value(item, item_schema, &format!("{path}[{i}]"))?;
                }
            }
            Ok(())
        }
        Some("string") => doc
            .as_str()
            .map(|_| ())
            .ok_or_else(|| format!("{path}: expected string")),
        Some("integer") => {
            if doc.as_i64().is_some() || doc.as_u64().is_some() {
                Ok(())
            } else {
                Err(format!("{path}: expected integer"))
            }
        }
        Some("number") => {
            // serde_json numbers are finite by construction; a NaN or Inf
            // serializes to null and fails here.
            if doc.is_number() {
                Ok(())
            } else {
                Err(format!("{path}: expected finite number, got {doc}"))
            }
        }
        Some("boolean") => doc
            .as_bool()
            .map(|_| ())
            .ok_or_else(|| format!("{path}: expected boolean")),
        Some(other) => Err(format!("{path}: unsupported schema type '{other}'")),
        // No type constraint: anything goes (used for verdict `measured`).
        None => Ok(()),
    }
}

/// Render rows of f64 columns as CSV with shortest round-trip formatting.
pub fn csv_from_rows(header: &str, rows: &[Vec<f64>]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
