//! The verification report document: wire format, parsing, and closed-schema
//! validation that enumerates every defect.
//!
//! Wire keys are spelled exactly as the published output structure, spaces
//! and hyphens included. Serialization is pretty-printed JSON with two-space
//! indentation and fixed key order.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const KEY_SLOTS: &str = "slots";
pub const KEY_COLLET: &str = "collet_clamped";
pub const KEY_REFX: &str = "refx";
pub const KEY_REFZ: &str = "refz";
pub const KEY_HMI_ISSUES: &str = "HMI issues";
pub const KEY_VALIDITY: &str = "gcode_validity";
pub const KEY_VALID: &str = "valid";
pub const KEY_GCODE_ERRORS: &str = "g-code errors";
pub const KEY_COMPLIANCE: &str = "HMI and G-code compliance";
pub const KEY_CONSISTENT: &str = "consistent";
pub const KEY_COMPLIANCE_ERRORS: &str = "HMI and G-code errors";
pub const KEY_CORRECTIONS: &str = "corrections";

/// Standalone JSON Schema for the report, suitable for embedding in prompts.
pub const SCHEMA_TEXT: &str = include_str!("../assets/report_schema.json");

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Slots {
    pub collet_clamped: bool,
    pub refx: bool,
    pub refz: bool,
    #[serde(rename = "HMI issues")]
    pub hmi_issues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GcodeValidity {
    pub valid: bool,
    #[serde(rename = "g-code errors")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Compliance {
    pub consistent: bool,
    #[serde(rename = "HMI and G-code errors")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerificationReport {
    pub slots: Slots,
    pub gcode_validity: GcodeValidity,
    #[serde(rename = "HMI and G-code compliance")]
    pub compliance: Compliance,
    pub corrections: Vec<String>,
}

impl VerificationReport {
    /// True when every boolean is true and every list is empty.
    pub fn is_clean(&self) -> bool {
        self.slots.collet_clamped
            && self.slots.refx
            && self.slots.refz
            && self.slots.hmi_issues.is_empty()
            && self.gcode_validity.valid
            && self.gcode_validity.errors.is_empty()
            && self.compliance.consistent
            && self.compliance.errors.is_empty()
            && self.corrections.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SchemaVerdict {
    pub valid: bool,
    pub violations: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("not a report object: {0}")]
    Parse(String),
    #[error("schema mismatch: {}", .0.violations.join("; "))]
    Schema(SchemaVerdict),
}

impl ReportError {
    pub fn violations(&self) -> Vec<String> {
        match self {
            ReportError::Parse(m) => vec![format!("$: {m}")],
            ReportError::Schema(v) => v.violations.clone(),
        }
    }
}

pub fn serialize_report(report: &VerificationReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialization is infallible")
}

/// Removes a single surrounding Markdown code fence, if present.
fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let Some(body) = rest.strip_suffix("```") else {
        return t;
    };
    // optional info string (e.g. `json`) on the opening line
    match body.find('\n') {
        Some(nl) if body[..nl].trim().chars().all(|c| c.is_ascii_alphanumeric()) => &body[nl + 1..],
        _ => t,
    }
}

pub fn parse_report(text: &str) -> Result<VerificationReport, ReportError> {
    let body = strip_fence(text);
    let value: Value =
        serde_json::from_str(body).map_err(|e| ReportError::Parse(e.to_string()))?;
    let Value::Object(root) = &value else {
        return Err(ReportError::Parse(format!(
            "expected an object, found {}",
            type_name(&value)
        )));
    };
    let mut violations = Vec::new();
    check_root(root, &mut violations);
    if !violations.is_empty() {
        return Err(ReportError::Schema(SchemaVerdict {
            valid: false,
            violations,
        }));
    }
    serde_json::from_value(value).map_err(|e| ReportError::Parse(e.to_string()))
}

pub fn validate_schema(text: &str) -> SchemaVerdict {
    match parse_report(text) {
        Ok(_) => SchemaVerdict {
            valid: true,
            violations: Vec::new(),
        },
        Err(e) => SchemaVerdict {
            valid: false,
            violations: e.violations(),
        },
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Bool,
    StringList,
    Object(&'static [(&'static str, Kind)]),
}

const SLOTS_FIELDS: &[(&str, Kind)] = &[
    (KEY_COLLET, Kind::Bool),
    (KEY_REFX, Kind::Bool),
    (KEY_REFZ, Kind::Bool),
    (KEY_HMI_ISSUES, Kind::StringList),
];
const VALIDITY_FIELDS: &[(&str, Kind)] = &[
    (KEY_VALID, Kind::Bool),
    (KEY_GCODE_ERRORS, Kind::StringList),
];
const COMPLIANCE_FIELDS: &[(&str, Kind)] = &[
    (KEY_CONSISTENT, Kind::Bool),
    (KEY_COMPLIANCE_ERRORS, Kind::StringList),
];
const ROOT_FIELDS: &[(&str, Kind)] = &[
    (KEY_SLOTS, Kind::Object(SLOTS_FIELDS)),
    (KEY_VALIDITY, Kind::Object(VALIDITY_FIELDS)),
    (KEY_COMPLIANCE, Kind::Object(COMPLIANCE_FIELDS)),
    (KEY_CORRECTIONS, Kind::StringList),
];

fn check_root(root: &Map<String, Value>, out: &mut Vec<String>) {
    check_object(root, ROOT_FIELDS, "", out);
}

/// Top-level keys are written bare, nested keys quoted: `slots."refx"`.
fn child_path(parent: &str, key: &str) -> String {
    if parent.is_empty() {
        key.to_string()
    } else {
        format!("{parent}.\"{key}\"")
    }
}

fn check_object(
    obj: &Map<String, Value>,
    fields: &[(&str, Kind)],
    path: &str,
    out: &mut Vec<String>,
) {
    for (key, kind) in fields {
        let p = child_path(path, key);
        match obj.get(*key) {
            None => out.push(format!("{p}: missing required field")),
            Some(v) => check_value(v, *kind, &p, out),
        }
    }
    for key in obj.keys() {
        if !fields.iter().any(|(k, _)| k == key) {
            out.push(format!("{}: unexpected field", child_path(path, key)));
        }
    }
}

fn check_value(v: &Value, kind: Kind, path: &str, out: &mut Vec<String>) {
    match (kind, v) {
        (Kind::Bool, Value::Bool(_)) => {}
        (Kind::Bool, other) => out.push(format!(
            "{path}: expected boolean, found {}",
            type_name(other)
        )),
        (Kind::StringList, Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                if !item.is_string() {
                    out.push(format!(
                        "{path}[{i}]: expected string, found {}",
                        type_name(item)
                    ));
                }
            }
        }
        (Kind::StringList, other) => out.push(format!(
            "{path}: expected array of strings, found {}",
            type_name(other)
        )),
        (Kind::Object(fields), Value::Object(obj)) => check_object(obj, fields, path, out),
        (Kind::Object(_), other) => out.push(format!(
            "{path}: expected object, found {}",
            type_name(other)
        )),
    }
}
