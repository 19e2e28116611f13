//! Cross-modal rules tying what a program needs to what the HMI shows.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::gcode::Program;
use crate::vision::IndicatorStates;

pub const COLLET_VIOLATION: &str = "Spindle command issued but COLLET CLAMPED is not active";
pub const REFX_VIOLATION: &str = "X-axis motion commanded but REF X is not referenced";
pub const REFZ_VIOLATION: &str = "Z-axis motion commanded but REF Z is not referenced";

/// Which indicator a rule concerns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Readiness {
    Collet,
    RefX,
    RefZ,
}

impl Readiness {
    pub const ALL: [Readiness; 3] = [Readiness::Collet, Readiness::RefX, Readiness::RefZ];

    pub fn violation_phrase(self) -> &'static str {
        match self {
            Readiness::Collet => COLLET_VIOLATION,
            Readiness::RefX => REFX_VIOLATION,
            Readiness::RefZ => REFZ_VIOLATION,
        }
    }

    pub fn indicator(self, s: &IndicatorStates) -> bool {
        match self {
            Readiness::Collet => s.collet_clamped,
            Readiness::RefX => s.refx,
            Readiness::RefZ => s.refz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RequiredStates {
    pub needs_collet: bool,
    pub needs_refx: bool,
    pub needs_refz: bool,
}

impl RequiredStates {
    pub fn needs(&self, r: Readiness) -> bool {
        match r {
            Readiness::Collet => self.needs_collet,
            Readiness::RefX => self.needs_refx,
            Readiness::RefZ => self.needs_refz,
        }
    }
}

/// Which M codes count as spindle control.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplianceRules {
    pub spindle_m_codes: BTreeSet<u32>,
}

impl Default for ComplianceRules {
    fn default() -> Self {
        // M5 included: any spindle control word demands a clamped collet
        ComplianceRules {
            spindle_m_codes: [3, 4, 5].into_iter().collect(),
        }
    }
}

pub fn derive_requirements(program: &Program) -> RequiredStates {
    derive_requirements_with(program, &ComplianceRules::default())
}

pub fn derive_requirements_with(program: &Program, rules: &ComplianceRules) -> RequiredStates {
    let mut req = RequiredStates::default();
    for block in &program.blocks {
        if block
            .words
            .iter()
            .any(|w| w.letter == 'M' && w.code().is_some_and(|c| rules.spindle_m_codes.contains(&c)))
        {
            req.needs_collet = true;
        }
        if block.has_motion() {
            req.needs_refx |= block.has_letter('X');
            req.needs_refz |= block.has_letter('Z');
        }
    }
    req
}

/// Rules the indicators fail, in collet/X/Z order.
pub fn violations(required: &RequiredStates, indicators: &IndicatorStates) -> Vec<Readiness> {
    Readiness::ALL
        .into_iter()
        .filter(|r| required.needs(*r) && !r.indicator(indicators))
        .collect()
}

pub fn check_compliance(
    required: &RequiredStates,
    indicators: &IndicatorStates,
) -> (bool, Vec<String>) {
    let errors: Vec<String> = violations(required, indicators)
        .into_iter()
        .map(|r| r.violation_phrase().to_string())
        .collect();
    (errors.is_empty(), errors)
}
