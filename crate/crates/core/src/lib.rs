//! Cross-checks CNC lathe G-code against the machine's HMI screen: parsing
//! and linting, indicator reading, compliance rules, a schema-bound report,
//! model backends and an evaluation harness.

pub mod backend;
pub mod compliance;
pub mod dataset;
pub mod eval;
pub mod gcode;
pub mod par;
pub mod report;
pub mod runner;
pub mod verifier;
pub mod vision;
pub mod vlm;
