//! Rule-based reference verifier. Composes G-code validation, indicator
//! states and compliance into a complete report.

use crate::compliance::{self, ComplianceRules, Readiness};
use crate::gcode::{self, GcodeIssue, IssueCategory, ValidationLimits};
use crate::report::{Compliance, GcodeValidity, Slots, VerificationReport};
use crate::vision::IndicatorStates;

pub const COLLET_HMI_ISSUE: &str = "COLLET CLAMPED indicator is not active";
pub const REFX_HMI_ISSUE: &str = "REF X indicator is not active";
pub const REFZ_HMI_ISSUE: &str = "REF Z indicator is not active";

fn hmi_issue(r: Readiness) -> &'static str {
    match r {
        Readiness::Collet => COLLET_HMI_ISSUE,
        Readiness::RefX => REFX_HMI_ISSUE,
        Readiness::RefZ => REFZ_HMI_ISSUE,
    }
}

fn readiness_correction(r: Readiness) -> &'static str {
    match r {
        Readiness::Collet => "Clamp the collet before running this program.",
        Readiness::RefX => "Reference the X axis before running this program.",
        Readiness::RefZ => "Reference the Z axis before running this program.",
    }
}

fn issue_correction(issue: &GcodeIssue, limits: &ValidationLimits) -> String {
    let n = issue.line_no;
    let w = &issue.offending;
    match issue.category {
        IssueCategory::ModalConflict => {
            format!("Line {n}: keep only one motion command (G00, G01, G02 or G03) per block.")
        }
        IssueCategory::InvalidCommand => format!("Line {n}: correct the malformed word `{w}`."),
        IssueCategory::NonNumericCoordinate => {
            format!("Line {n}: use a numeric coordinate value instead of `{w}`.")
        }
        IssueCategory::MissingFeedValue => format!("Line {n}: provide a numeric value for F."),
        IssueCategory::UnknownCode => {
            format!("Line {n}: replace the unsupported code `{w}` with a supported command.")
        }
        IssueCategory::EmptyMotionBlock => {
            format!("Line {n}: add an X or Z target to the motion command `{w}`.")
        }
        IssueCategory::UnsafeFeed => format!(
            "Line {n}: reduce the feed rate `{w}` to at most {} units/min.",
            limits.max_feed
        ),
        IssueCategory::Other => format!("Line {n}: review `{w}`."),
    }
}

/// Everything the corrections are derived from.
#[derive(Debug, Clone)]
pub struct Findings<'a> {
    pub indicators: IndicatorStates,
    pub issues: &'a [GcodeIssue],
    pub violations: &'a [Readiness],
    pub limits: &'a ValidationLimits,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Topic {
    Readiness(Readiness),
    Issue(usize, IssueCategory),
}

/// One sentence per defect, HMI first, then G-code, then compliance.
/// A topic (an indicator, or a line/category pair) yields at most one sentence.
pub fn generate_corrections(findings: &Findings<'_>) -> Vec<String> {
    let mut seen: Vec<Topic> = Vec::new();
    let mut out = Vec::new();
    let mut push = |topic: Topic, text: String| {
        if !seen.contains(&topic) {
            seen.push(topic);
            out.push(text);
        }
    };
    for r in Readiness::ALL {
        if !r.indicator(&findings.indicators) {
            push(Topic::Readiness(r), readiness_correction(r).to_string());
        }
    }
    for issue in findings.issues {
        push(
            Topic::Issue(issue.line_no, issue.category),
            issue_correction(issue, findings.limits),
        );
    }
    for r in findings.violations {
        push(Topic::Readiness(*r), readiness_correction(*r).to_string());
    }
    out
}

/// Builds the reference report. A program that fails to lex is reported as
/// invalid with the lexer message, and derives no requirements.
pub fn verify_oracle(
    gcode_text: &str,
    indicators: IndicatorStates,
    limits: &ValidationLimits,
) -> VerificationReport {
    verify_oracle_with(gcode_text, indicators, limits, &ComplianceRules::default())
}

pub fn verify_oracle_with(
    gcode_text: &str,
    indicators: IndicatorStates,
    limits: &ValidationLimits,
    rules: &ComplianceRules,
) -> VerificationReport {
    let hmi_issues: Vec<String> = Readiness::ALL
        .into_iter()
        .filter(|r| !r.indicator(&indicators))
        .map(|r| hmi_issue(r).to_string())
        .collect();

    let (issues, violations) = match gcode::tokenize(gcode_text) {
        Ok(program) => {
            let issues = gcode::validate(&program, limits);
            let required = compliance::derive_requirements_with(&program, rules);
            (issues, compliance::violations(&required, &indicators))
        }
        Err(e) => {
            let issue = GcodeIssue {
                line_no: e.line,
                category: IssueCategory::Other,
                offending: e.ch.to_string(),
                message: format!("Line {}: {}: {e}", e.line, IssueCategory::Other.label()),
            };
            (vec![issue], Vec::new())
        }
    };
    let gcode_errors: Vec<String> = issues.iter().map(|i| i.message.clone()).collect();

    let corrections = generate_corrections(&Findings {
        indicators,
        issues: &issues,
        violations: &violations,
        limits,
    });
    let compliance_errors: Vec<String> = violations
        .iter()
        .map(|r| r.violation_phrase().to_string())
        .collect();

    VerificationReport {
        slots: Slots {
            collet_clamped: indicators.collet_clamped,
            refx: indicators.refx,
            refz: indicators.refz,
            hmi_issues,
        },
        gcode_validity: GcodeValidity {
            valid: gcode_errors.is_empty(),
            errors: gcode_errors,
        },
        compliance: Compliance {
            consistent: compliance_errors.is_empty(),
            errors: compliance_errors,
        },
        corrections,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compliance::{REFX_VIOLATION, REFZ_VIOLATION};

    fn limits() -> ValidationLimits {
        ValidationLimits::default()
    }

    #[test]
    fn clean_instance_is_all_clean() {
        let r = verify_oracle(
            "G0 X10.0 Z2.0\nM3 S800\nG1 X8.0 Z-5.0 F120\nM5\nM30",
            IndicatorStates::new(true, true, true),
            &limits(),
        );
        assert!(r.is_clean(), "{r:?}");
    }

    #[test]
    fn modal_conflict_with_unreferenced_axes() {
        let r = verify_oracle(
            "M3 S800\nG00 G01 X5.0 Z-1.0 F100\nM5",
            IndicatorStates::new(true, false, false),
            &limits(),
        );
        assert!(!r.gcode_validity.valid);
        assert!(r.gcode_validity.errors[0].contains("Modal conflict"));
        assert!(!r.slots.refx && !r.slots.refz && r.slots.collet_clamped);
        assert_eq!(r.slots.hmi_issues, vec![REFX_HMI_ISSUE, REFZ_HMI_ISSUE]);
        assert!(!r.compliance.consistent);
        assert_eq!(r.compliance.errors, vec![REFX_VIOLATION, REFZ_VIOLATION]);
    }

    #[test]
    fn corrections_empty_iff_clean() {
        let r = verify_oracle("G0 X1", IndicatorStates::new(true, true, true), &limits());
        assert!(r.corrections.is_empty());
        let r = verify_oracle("G0 X1", IndicatorStates::new(true, true, false), &limits());
        assert_eq!(r.corrections.len(), 1);
    }

    #[test]
    fn missing_feed_correction() {
        let r = verify_oracle("G1 X2.0 F", IndicatorStates::new(true, true, true), &limits());
        assert_eq!(r.corrections.len(), 1);
        assert!(r.corrections[0].contains("provide a numeric value for F"));
    }

    #[test]
    fn axis_corrections_deduplicate() {
        // template oracle: HMI sentence and compliance sentence are the same topic
        let r = verify_oracle("G1 Z-2.0 F50", IndicatorStates::new(true, true, false), &limits());
        let z: Vec<_> = r
            .corrections
            .iter()
            .filter(|c| c.contains("Reference the Z axis"))
            .collect();
        assert_eq!(z.len(), 1);
        assert_eq!(r.corrections.len(), 1);
        assert_eq!(r.compliance.errors, vec![REFZ_VIOLATION]);
    }

    #[test]
    fn correction_order_hmi_then_gcode() {
        let r = verify_oracle("G1 X1 F\nG999 X2", IndicatorStates::new(false, true, true), &limits());
        assert_eq!(r.corrections.len(), 3);
        assert!(r.corrections[0].starts_with("Clamp the collet"));
        assert!(r.corrections[1].starts_with("Line 1"));
        assert!(r.corrections[2].starts_with("Line 2"));
    }

    #[test]
    fn lex_failure_reported_as_invalid() {
        let r = verify_oracle("#1=2", IndicatorStates::new(true, true, true), &limits());
        assert!(!r.gcode_validity.valid);
        assert!(r.compliance.consistent);
        assert_eq!(r.corrections, vec!["Line 1: review `#`."]);
    }
}
