//! The eight-scenario evaluation catalog, the seven-example few-shot pack,
//! and their on-disk layout.
//!
//! ```text
//! <out>/catalog/manifest.json
//! <out>/catalog/<id>/program.nc | screen.png | truth.json
//! <out>/fewshot/pack.json
//! <out>/fewshot/<label>/program.nc | screen.png | expected.json
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gcode::{IssueCategory, ValidationLimits};
use crate::report::{parse_report, serialize_report, validate_schema, VerificationReport};
use crate::verifier::verify_oracle;
use crate::vision::{self, render_synthetic, IndicatorStates, VisionError};

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Vision(#[from] VisionError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// One catalog row: scenario, instance, indicator combination, program and
/// the error classes a faulty program must exhibit.
#[derive(Debug, Clone)]
pub struct ScenarioCase {
    pub scenario: u8,
    pub instance: u8,
    pub indicators: IndicatorStates,
    pub gcode: &'static str,
    pub expected_errors: &'static [IssueCategory],
}

impl ScenarioCase {
    pub fn id(&self) -> String {
        format!("S{}-i{}", self.scenario, self.instance)
    }

    fn noise_seed(&self) -> u64 {
        self.scenario as u64 * 10 + self.instance as u64
    }
}

const fn st(c: bool, x: bool, z: bool) -> IndicatorStates {
    IndicatorStates::new(c, x, z)
}

const T: bool = true;
const F: bool = false;

use IssueCategory as C;

pub const CATALOG: [ScenarioCase; 16] = [
    ScenarioCase {
        scenario: 1,
        instance: 1,
        indicators: st(T, F, F),
        gcode: "G21 G18\nM3 S800\nG00 G01 X20.0 Z1.0 F120\nG1 Z-15.0 F100\nM5\nM30\n",
        expected_errors: &[C::ModalConflict],
    },
    ScenarioCase {
        scenario: 1,
        instance: 2,
        indicators: st(T, F, F),
        gcode: "G21 G18\nM3 S800\nG0 X20.0 Z1.0\nG1 Z-15.0 F100\nM5\nM30\n",
        expected_errors: &[],
    },
    ScenarioCase {
        scenario: 2,
        instance: 1,
        indicators: st(F, F, F),
        gcode: "G21\nM3 S1,200\nG4 P2.0\nM5\nM30\n",
        expected_errors: &[C::InvalidCommand],
    },
    ScenarioCase {
        scenario: 2,
        instance: 2,
        indicators: st(T, F, T),
        gcode: "G21 G18\nM3 S1200\nG0 Z2.0\nG1 Z-10.0 F90\nM5\nM30\n",
        expected_errors: &[],
    },
    ScenarioCase {
        scenario: 3,
        instance: 1,
        indicators: st(T, T, F),
        gcode: "G21 G18\nM3 S900\nG00 G01 X15.0\nG1 X12.0 F\nM5\nM30\n",
        expected_errors: &[C::ModalConflict, C::MissingFeedValue],
    },
    ScenarioCase {
        scenario: 3,
        instance: 2,
        indicators: st(T, T, F),
        gcode: "G21 G18\nM3 S900\nG0 X15.0 Z1.0\nG1 Z-8.0 F110\nM5\nM30\n",
        expected_errors: &[],
    },
    ScenarioCase {
        scenario: 4,
        instance: 1,
        indicators: st(T, F, T),
        gcode: "G21 G18\nM3 S1000\nG0 Z2.0\nG1 Xabc Z-6.0 F90\nM5\nM30\n",
        expected_errors: &[C::NonNumericCoordinate],
    },
    ScenarioCase {
        scenario: 4,
        instance: 2,
        indicators: st(T, F, T),
        gcode: "G21 G18\nM3 S1000\nG0 X18.0 Z2.0\nG1 X16.0 Z-6.0 F90\nM5\nM30\n",
        expected_errors: &[],
    },
    ScenarioCase {
        scenario: 5,
        instance: 1,
        indicators: st(F, T, F),
        gcode: "G21 G18\nG0 X30.0\nG1 X28.0 F\nG0 X32.0\nM30\n",
        expected_errors: &[C::MissingFeedValue],
    },
    ScenarioCase {
        scenario: 5,
        instance: 2,
        indicators: st(F, T, F),
        gcode: "G21 G18\nM4 S700\nG0 X30.0\nG1 X28.0 F60\nM5\nM30\n",
        expected_errors: &[],
    },
    ScenarioCase {
        scenario: 6,
        instance: 1,
        indicators: st(F, T, T),
        gcode: "G21 G18\nG0 X20.0 Z2.0\nG999 X18.0\nG1 Z-4.0 F70\nM30\n",
        expected_errors: &[C::UnknownCode],
    },
    ScenarioCase {
        scenario: 6,
        instance: 2,
        indicators: st(F, T, T),
        gcode: "G21 G18\nG0 X20.0 Z2.0\nG1 X18.0 Z-4.0 F70\nG0 X22.0 Z2.0\nM30\n",
        expected_errors: &[],
    },
    ScenarioCase {
        scenario: 7,
        instance: 1,
        indicators: st(T, T, T),
        gcode: "G21 G18\nM3 S1100\nG0 X12.0 Z1.0\nG01\nM5\nM30\n",
        expected_errors: &[C::EmptyMotionBlock],
    },
    ScenarioCase {
        scenario: 7,
        instance: 2,
        indicators: st(T, T, T),
        gcode: "G21 G18\nM3 S1100\nG0 X12.0 Z1.0\nG1 X10.0 Z-3.0 F100\nM5\nM30\n",
        expected_errors: &[],
    },
    ScenarioCase {
        scenario: 8,
        instance: 1,
        indicators: st(F, F, F),
        gcode: "G21 G18\nG0 X40.0 Z5.0\nG1 Z-20.0 F900\nM30\n",
        expected_errors: &[C::UnsafeFeed],
    },
    ScenarioCase {
        scenario: 8,
        instance: 2,
        indicators: st(F, F, F),
        gcode: "G21 G18\nG0 X40.0 Z5.0\nG1 Z-20.0 F150\nM30\n",
        expected_errors: &[],
    },
];

/// A seed example for the few-shot pack.
#[derive(Debug, Clone)]
pub struct ExampleCase {
    pub label: &'static str,
    pub indicators: IndicatorStates,
    pub gcode: &'static str,
}

pub const FEWSHOT_CASES: [ExampleCase; 7] = [
    ExampleCase {
        label: "modal-conflict",
        indicators: st(T, T, T),
        gcode: "G21 G18\nM3 S750\nG0 G1 X14.0 Z2.0 F90\nM5\nM30\n",
    },
    ExampleCase {
        label: "missing-feed-value",
        indicators: st(T, T, T),
        gcode: "G21 G18\nG0 X18.0 Z1.0\nG1 Z-9.0 F\nM30\n",
    },
    ExampleCase {
        label: "unknown-code",
        indicators: st(T, T, T),
        gcode: "G21 G18\nM3 S650\nG0 X16.0 Z1.0\nM7\nM5\nM30\n",
    },
    ExampleCase {
        label: "spindle-without-collet",
        indicators: st(F, T, T),
        gcode: "G21 G18\nM3 S900\nG0 X24.0 Z2.0\nG1 X22.0 Z-4.0 F80\nM5\nM30\n",
    },
    ExampleCase {
        label: "x-motion-without-ref-x",
        indicators: st(T, F, F),
        gcode: "G21 G18\nM3 S850\nG0 X26.0\nG1 X24.0 F75\nM5\nM30\n",
    },
    ExampleCase {
        label: "ref-z-dark",
        indicators: st(T, T, F),
        gcode: "G21 G18\nM3 S950\nG0 X21.0\nG1 X19.5 F85\nM5\nM30\n",
    },
    ExampleCase {
        label: "fully-valid",
        indicators: st(T, T, T),
        gcode: "G21 G18\nM3 S1000\nG0 X15.0 Z2.0\nG1 X13.0 Z-7.0 F95\nM5\nM30\n",
    },
];

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    pub id: String,
    pub scenario: u8,
    pub indicators: IndicatorStates,
    pub gcode: PathBuf,
    pub image: PathBuf,
    pub truth: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub instances: Vec<InstanceDescriptor>,
    /// Directory the relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub scenario: u8,
    pub indicators: IndicatorStates,
    pub gcode: String,
    pub image_path: PathBuf,
    pub truth: VerificationReport,
}

impl Manifest {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Reads program and truth for one descriptor. The screenshot is only
    /// located, not decoded.
    pub fn load_instance(&self, d: &InstanceDescriptor) -> Result<Instance, DatasetError> {
        let gcode = read_text(&self.resolve(&d.gcode))?;
        let truth_path = self.resolve(&d.truth);
        let truth = parse_report(&read_text(&truth_path)?).map_err(|e| {
            DatasetError::Manifest(format!("{}: truth report invalid: {e}", d.id))
        })?;
        Ok(Instance {
            id: d.id.clone(),
            scenario: d.scenario,
            indicators: d.indicators,
            gcode,
            image_path: self.resolve(&d.image),
            truth,
        })
    }
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_file(path, text + "\n")
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = read_text(path)?;
    let mut manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut ids = HashSet::new();
    for d in &manifest.instances {
        if !ids.insert(d.id.as_str()) {
            return Err(DatasetError::Manifest(format!("duplicate instance id {}", d.id)));
        }
        for rel in [&d.gcode, &d.image, &d.truth] {
            if !manifest.resolve(rel).is_file() {
                return Err(DatasetError::Manifest(format!(
                    "{}: referenced file {} does not exist",
                    d.id,
                    rel.display()
                )));
            }
        }
    }
    Ok(manifest)
}

/// Writes the 16-instance catalog under `output_dir/catalog` and returns its manifest.
pub fn build_catalog(output_dir: &Path) -> Result<Manifest, DatasetError> {
    let base = output_dir.join("catalog");
    let limits = ValidationLimits::default();
    let mut instances = Vec::with_capacity(CATALOG.len());
    for case in &CATALOG {
        let id = case.id();
        let dir = PathBuf::from(&id);
        let truth = verify_oracle(case.gcode, case.indicators, &limits);
        let image = render_synthetic(case.indicators, Some(case.noise_seed()));
        let d = InstanceDescriptor {
            id,
            scenario: case.scenario,
            indicators: case.indicators,
            gcode: dir.join("program.nc"),
            image: dir.join("screen.png"),
            truth: dir.join("truth.json"),
        };
        write_file(&base.join(&d.gcode), case.gcode)?;
        write_png(&image, &base.join(&d.image))?;
        write_file(&base.join(&d.truth), serialize_report(&truth) + "\n")?;
        instances.push(d);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION.to_string(),
        instances,
        base_dir: base.clone(),
    };
    save_manifest(&manifest, &base.join("manifest.json"))?;
    Ok(manifest)
}

fn write_png(image: &RgbImage, path: &Path) -> Result<(), DatasetError> {
    write_file(path, vision::encode_png(image))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotExample {
    pub label: String,
    pub gcode: String,
    pub image: RgbImage,
    pub expected_report: VerificationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PackEntry {
    label: String,
    gcode: PathBuf,
    image: PathBuf,
    expected: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PackIndex {
    version: String,
    examples: Vec<PackEntry>,
}

/// The seven worked examples, rendered in memory.
pub fn builtin_fewshot_examples() -> Vec<FewShotExample> {
    let limits = ValidationLimits::default();
    FEWSHOT_CASES
        .iter()
        .enumerate()
        .map(|(i, case)| FewShotExample {
            label: case.label.to_string(),
            gcode: case.gcode.to_string(),
            image: render_synthetic(case.indicators, Some(100 + i as u64)),
            expected_report: verify_oracle(case.gcode, case.indicators, &limits),
        })
        .collect()
}

/// Writes the seven worked examples under `output_dir/fewshot`.
pub fn build_fewshot_pack(output_dir: &Path) -> Result<Vec<FewShotExample>, DatasetError> {
    let base = output_dir.join("fewshot");
    let examples = builtin_fewshot_examples();
    let mut entries = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let dir = PathBuf::from(format!("{:02}-{}", i + 1, ex.label));
        let text = serialize_report(&ex.expected_report);
        let verdict = validate_schema(&text);
        if !verdict.valid {
            return Err(DatasetError::Manifest(format!(
                "example {} is not schema-valid: {:?}",
                ex.label, verdict.violations
            )));
        }
        let entry = PackEntry {
            label: ex.label.clone(),
            gcode: dir.join("program.nc"),
            image: dir.join("screen.png"),
            expected: dir.join("expected.json"),
        };
        write_file(&base.join(&entry.gcode), &ex.gcode)?;
        write_png(&ex.image, &base.join(&entry.image))?;
        write_file(&base.join(&entry.expected), text + "\n")?;
        entries.push(entry);
    }
    let index = PackIndex {
        version: MANIFEST_VERSION.to_string(),
        examples: entries,
    };
    write_file(
        &base.join("pack.json"),
        serde_json::to_string_pretty(&index).expect("pack index serializes") + "\n",
    )?;
    Ok(examples)
}

/// Loads a pack written by [`build_fewshot_pack`]. Every expected report must
/// pass schema validation.
pub fn load_fewshot_pack(dir: &Path) -> Result<Vec<FewShotExample>, DatasetError> {
    let index_path = dir.join("pack.json");
    let index: PackIndex = serde_json::from_str(&read_text(&index_path)?)
        .map_err(|e| DatasetError::Manifest(format!("{}: {e}", index_path.display())))?;
    index
        .examples
        .iter()
        .map(|e| {
            let expected = read_text(&dir.join(&e.expected))?;
            let expected_report = parse_report(&expected).map_err(|err| {
                DatasetError::Manifest(format!("example {}: {err}", e.label))
            })?;
            Ok(FewShotExample {
                label: e.label.clone(),
                gcode: read_text(&dir.join(&e.gcode))?,
                image: vision::load_image(&dir.join(&e.image))?,
                expected_report,
            })
        })
        .collect()
}
