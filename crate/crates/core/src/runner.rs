//! Orchestration behind the command-line verbs.
//!
//! Batch output layout:
//!
//! ```text
//! <out>/<config>/<instance-id>.json   raw model text, one file per instance
//! <out>/batch_log.json                per-instance status for every config
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    call_model, BackendError, MockBackend, ModelBackend, OracleBackend, Recorder, RemoteBackend,
};
use crate::dataset::{
    build_catalog, build_fewshot_pack, builtin_fewshot_examples, load_fewshot_pack, load_manifest,
    DatasetError, FewShotExample, Instance, Manifest,
};
use crate::eval::{
    match_rate_table, score_instance, similarity_table, structural_table, summarize_run,
    EmbeddingProvider, EvalError, InstanceRecord, LexicalProvider, RemoteEmbeddings, RunSummary,
    DEFAULT_EMBEDDING_MODEL,
};
use crate::par::{self, Exec};
use crate::report::{VerificationReport, SCHEMA_TEXT};
use crate::vision::{self, debug_overlay, overlay_boxes, IndicatorLayout, VisionError};
use crate::vlm::{build_messages, extract_report, BackendKind, ConfigError, Preset, RunConfig, Shots};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("model output is not a valid report: {}", .0.join("; "))]
    ModelOutput(Vec<String>),
    #[error("{0}")]
    NothingCompleted(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn generate(out: &Path, catalog: bool, fewshot: bool) -> Result<(), RunError> {
    if catalog {
        let m = build_catalog(out)?;
        info!("wrote {} catalog instances under {}", m.instances.len(), out.display());
    }
    if fewshot {
        let ex = build_fewshot_pack(out)?;
        info!("wrote {} few-shot examples under {}", ex.len(), out.display());
    }
    Ok(())
}

/// Where recorded responses come from (mock) or go to (recording).
#[derive(Debug, Clone, Default)]
pub struct Recording {
    pub mock_dir: Option<PathBuf>,
    pub record_dir: Option<PathBuf>,
}

pub fn make_backend(config: &RunConfig, rec: &Recording) -> Result<Box<dyn ModelBackend>, RunError> {
    config.validate()?;
    let inner: Box<dyn ModelBackend> = match config.backend {
        BackendKind::Oracle => Box::new(OracleBackend::new(config.cluster_bbox)),
        BackendKind::Mock => {
            let dir = rec
                .mock_dir
                .clone()
                .ok_or_else(|| ConfigError("the mock backend needs a recordings directory".into()))?;
            Box::new(MockBackend::new(dir))
        }
        BackendKind::Remote => Box::new(RemoteBackend::from_env(config)?),
    };
    Ok(match &rec.record_dir {
        Some(dir) => Box::new(Recorder {
            inner,
            dir: dir.clone(),
        }),
        None => inner,
    })
}

/// Examples from `dir`, or the built-in set when no directory is given.
pub fn load_examples(dir: Option<&Path>) -> Result<Vec<FewShotExample>, RunError> {
    match dir {
        Some(d) => Ok(load_fewshot_pack(d)?),
        None => Ok(builtin_fewshot_examples()),
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub gcode: PathBuf,
    pub image: PathBuf,
    pub config: RunConfig,
    pub examples_dir: Option<PathBuf>,
    pub recording: Recording,
    pub overlay: Option<PathBuf>,
}

pub fn verify_files(opts: &VerifyOptions) -> Result<VerificationReport, RunError> {
    let gcode = fs::read_to_string(&opts.gcode).map_err(io_err(&opts.gcode))?;
    let image = vision::load_image(&opts.image)?;
    if let Some(path) = &opts.overlay {
        let boxes = overlay_boxes(&opts.config.cluster_bbox, &IndicatorLayout::default());
        vision::save_png(&debug_overlay(&image, &boxes), path)?;
    }
    let examples = match opts.config.shots {
        Shots::Few => load_examples(opts.examples_dir.as_deref())?,
        Shots::Zero => Vec::new(),
    };
    let backend = make_backend(&opts.config, &opts.recording)?;
    let messages = build_messages(&opts.config, &gcode, &image, &examples, SCHEMA_TEXT)?;
    let raw = call_model(backend.as_ref(), &messages)?;
    extract_report(&raw).map_err(|f| RunError::ModelOutput(f.violations))
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub presets: Vec<Preset>,
    pub base: RunConfig,
    /// Defaults to `fewshot/` next to the catalog directory when it exists.
    pub examples_dir: Option<PathBuf>,
    pub recording: Recording,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub config: String,
    pub id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchReport {
    pub outcomes: Vec<InstanceOutcome>,
}

impl BatchReport {
    pub fn completed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.ok).count()
    }

    pub fn errored(&self) -> impl Iterator<Item = &InstanceOutcome> {
        self.outcomes.iter().filter(|o| !o.ok)
    }
}

pub const BATCH_LOG: &str = "batch_log.json";

pub fn prediction_path(out_dir: &Path, preset: Preset, id: &str) -> PathBuf {
    out_dir.join(preset.name()).join(format!("{id}.json"))
}

fn default_examples_dir(manifest: &Manifest) -> Option<PathBuf> {
    let dir = manifest.base_dir.parent()?.join("fewshot");
    dir.join("pack.json").is_file().then_some(dir)
}

fn predict_one(
    manifest: &Manifest,
    instance: &crate::dataset::InstanceDescriptor,
    config: &RunConfig,
    examples: &[FewShotExample],
    backend: &dyn ModelBackend,
) -> Result<String, RunError> {
    let gcode_path = manifest.resolve(&instance.gcode);
    let gcode = fs::read_to_string(&gcode_path).map_err(io_err(&gcode_path))?;
    let image = vision::load_image(&manifest.resolve(&instance.image))?;
    let messages = build_messages(config, &gcode, &image, examples, SCHEMA_TEXT)?;
    Ok(call_model(backend, &messages)?)
}

/// Runs every instance under every selected preset. A failing instance is
/// logged and skipped; only a run with no completed instance is an error.
pub fn run_batch(opts: &BatchOptions) -> Result<BatchReport, RunError> {
    let manifest = load_manifest(&opts.manifest)?;
    let needs_examples = opts.presets.iter().any(|p| p.shots() == Shots::Few);
    let examples = if needs_examples {
        let dir = opts.examples_dir.clone().or_else(|| default_examples_dir(&manifest));
        load_examples(dir.as_deref())?
    } else {
        Vec::new()
    };

    let mut outcomes = Vec::new();
    for &preset in &opts.presets {
        let config = preset.apply(&opts.base);
        let backend = make_backend(&config, &opts.recording)?;
        let dir = opts.out_dir.join(preset.name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let results = par::map(opts.exec, config.max_parallel, &manifest.instances, |d| {
            let path = prediction_path(&opts.out_dir, preset, &d.id);
            let result = predict_one(&manifest, d, &config, &examples, backend.as_ref())
                .and_then(|text| write_text(&path, &text));
            if result.is_err() && path.exists() {
                // never leave a stale answer from an earlier run behind
                let _ = fs::remove_file(&path);
            }
            InstanceOutcome {
                config: preset.name().to_string(),
                id: d.id.clone(),
                ok: result.is_ok(),
                error: result.err().map(|e| e.to_string()),
            }
        });
        for o in results.iter().filter(|o| !o.ok) {
            warn!("{}/{} failed: {}", o.config, o.id, o.error.as_deref().unwrap_or(""));
        }
        outcomes.extend(results);
    }
    let report = BatchReport { outcomes };
    write_text(&opts.out_dir.join(BATCH_LOG), &pretty_json(&report))?;
    if report.completed() == 0 {
        return Err(RunError::NothingCompleted("no instance completed".into()));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Lexical,
    Remote,
}

impl FromStr for EmbeddingKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "lexical" => Ok(EmbeddingKind::Lexical),
            "remote" => Ok(EmbeddingKind::Remote),
            other => Err(ConfigError(format!("unknown embeddings provider {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub pred_dir: PathBuf,
    pub manifest: PathBuf,
    /// `None` evaluates every preset that has a directory under `pred_dir`.
    pub presets: Option<Vec<Preset>>,
    pub embeddings: EmbeddingKind,
    pub threshold: f64,
    /// Defaults to `pred_dir`.
    pub out_dir: Option<PathBuf>,
    /// Endpoint, timeout and retry settings for remote embeddings.
    pub base: RunConfig,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub threshold: f64,
    pub embeddings: EmbeddingKind,
    pub runs: Vec<RunSummary>,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const RECORDS_FILE: &str = "records.json";
pub const STRUCTURAL_TABLE: &str = "structural.txt";
pub const SIMILARITY_TABLE: &str = "semantic_similarity.txt";
pub const MATCH_RATE_TABLE: &str = "semantic_match_rate.txt";

fn provider(opts: &EvalOptions) -> Result<Box<dyn EmbeddingProvider>, RunError> {
    Ok(match opts.embeddings {
        EmbeddingKind::Lexical => Box::new(LexicalProvider::default()),
        EmbeddingKind::Remote => {
            let key = std::env::var(crate::backend::API_KEY_ENV).map_err(|_| {
                ConfigError(format!("{} is not set", crate::backend::API_KEY_ENV))
            })?;
            Box::new(RemoteEmbeddings::new(
                &opts.base.endpoint,
                Some(key),
                DEFAULT_EMBEDDING_MODEL,
                Duration::from_secs_f64(opts.base.timeout_secs),
                opts.base.retries,
                Duration::from_millis(opts.base.backoff_ms),
            )?)
        }
    })
}

fn score_prediction(
    path: &Path,
    instance: &Instance,
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<InstanceRecord, EvalError> {
    let (pred, note) = match fs::read_to_string(path) {
        Err(_) => (None, Some("prediction missing; scored as schema-invalid".to_string())),
        Ok(text) => match extract_report(&text) {
            Ok(r) => (Some(r), None),
            Err(f) => (None, Some(format!("schema-invalid: {}", f.violations.join("; ")))),
        },
    };
    score_instance(&instance.id, pred.as_ref(), &instance.truth, provider, threshold, note)
}

pub fn run_eval(opts: &EvalOptions) -> Result<EvalSummary, RunError> {
    let manifest = load_manifest(&opts.manifest)?;
    let instances: Vec<Instance> = manifest
        .instances
        .iter()
        .map(|d| manifest.load_instance(d))
        .collect::<Result<_, _>>()?;
    let presets = match &opts.presets {
        Some(p) => p.clone(),
        None => Preset::ALL
            .into_iter()
            .filter(|p| opts.pred_dir.join(p.name()).is_dir())
            .collect(),
    };
    if presets.is_empty() {
        return Err(RunError::NothingCompleted(format!(
            "no prediction directories under {}",
            opts.pred_dir.display()
        )));
    }
    let provider = provider(opts)?;
    let mut runs = Vec::new();
    let mut all_records = Vec::new();
    for preset in presets {
        let records = par::map(opts.exec, opts.base.max_parallel, &instances, |inst| {
            let path = prediction_path(&opts.pred_dir, preset, &inst.id);
            score_prediction(&path, inst, provider.as_ref(), opts.threshold)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        runs.push(summarize_run(preset.name(), &records)?);
        all_records.push(serde_json::json!({ "config": preset.name(), "instances": records }));
    }
    let summary = EvalSummary {
        threshold: opts.threshold,
        embeddings: opts.embeddings,
        runs,
    };
    let out = opts.out_dir.clone().unwrap_or_else(|| opts.pred_dir.clone());
    write_text(&out.join(SUMMARY_FILE), &pretty_json(&summary))?;
    write_text(&out.join(RECORDS_FILE), &pretty_json(&all_records))?;
    write_text(&out.join(STRUCTURAL_TABLE), &structural_table(&summary.runs))?;
    write_text(&out.join(SIMILARITY_TABLE), &similarity_table(&summary.runs))?;
    write_text(&out.join(MATCH_RATE_TABLE), &match_rate_table(&summary.runs))?;
    Ok(summary)
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("summary serializes") + "\n"
}
