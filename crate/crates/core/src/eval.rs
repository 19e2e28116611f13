//! Scoring of predicted reports against truth: structural field accuracy and
//! embedding-based matching of the free-text lists.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{post_json_with_retry, BackendError};
use crate::report::VerificationReport;
use crate::vlm::Preset;

pub const DEFAULT_THRESHOLD: f64 = 0.80;
pub const LEXICAL_DIMENSION: usize = 512;
/// 64-bit FNV-1a offset basis, used as the token hash seed.
pub const LEXICAL_HASH_SEED: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
pub const DEFAULT_EMBEDDING_MODEL: &str = "text-embedding-3-small";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("vectors differ in dimension ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("cannot summarize: {0}")]
    Records(String),
}

impl From<BackendError> for EvalError {
    fn from(e: BackendError) -> Self {
        EvalError::Provider(e.to_string())
    }
}

/// Per-instance correctness of the five boolean fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldCorrectness {
    pub id: String,
    pub schema_valid: bool,
    pub collet: bool,
    pub refx: bool,
    pub refz: bool,
    pub gcode_validity: bool,
    pub compliance: bool,
}

/// `pred` is `None` when the output was not a schema-valid report; every
/// field then counts as wrong.
pub fn structural_compare(
    id: &str,
    pred: Option<&VerificationReport>,
    truth: &VerificationReport,
) -> FieldCorrectness {
    match pred {
        None => FieldCorrectness {
            id: id.to_string(),
            schema_valid: false,
            collet: false,
            refx: false,
            refz: false,
            gcode_validity: false,
            compliance: false,
        },
        Some(p) => FieldCorrectness {
            id: id.to_string(),
            schema_valid: true,
            collet: p.slots.collet_clamped == truth.slots.collet_clamped,
            refx: p.slots.refx == truth.slots.refx,
            refz: p.slots.refz == truth.slots.refz,
            gcode_validity: p.gcode_validity.valid == truth.gcode_validity.valid,
            compliance: p.compliance.consistent == truth.compliance.consistent,
        },
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::Dimension(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(token: &str) -> u64 {
    token.bytes().fold(LEXICAL_HASH_SEED, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn lexical_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Hashed term-frequency vector, L2-normalized. Text without tokens maps to
/// the zero vector.
pub fn embed_lexical(text: &str, dimension: usize) -> Vec<f64> {
    let mut v = vec![0.0; dimension];
    for t in lexical_tokens(text) {
        v[(fnv1a64(&t) % dimension as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|a| *a /= norm);
    }
    v
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_all(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EvalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LexicalProvider {
    pub dimension: usize,
}

impl Default for LexicalProvider {
    fn default() -> Self {
        LexicalProvider {
            dimension: LEXICAL_DIMENSION,
        }
    }
}

impl EmbeddingProvider for LexicalProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_all(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(texts.iter().map(|t| embed_lexical(t, self.dimension)).collect())
    }
}

/// `POST <endpoint>/embeddings`, one request per batch of texts.
#[derive(Debug, Clone)]
pub struct RemoteEmbeddings {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    pub model_name: String,
    dimension: usize,
    retries: u32,
    backoff: Duration,
}

impl RemoteEmbeddings {
    pub fn new(
        endpoint: &str,
        api_key: Option<String>,
        model_name: &str,
        timeout: Duration,
        retries: u32,
        backoff: Duration,
    ) -> Result<Self, EvalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EvalError::Provider(e.to_string()))?;
        Ok(RemoteEmbeddings {
            client,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key,
            model_name: model_name.to_string(),
            // text-embedding-3-small
            dimension: 1536,
            retries,
            backoff,
        })
    }
}

impl EmbeddingProvider for RemoteEmbeddings {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_all(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EvalError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({ "model": self.model_name, "input": texts });
        let url = format!("{}/embeddings", self.endpoint);
        let resp = post_json_with_retry(
            &self.client,
            &url,
            self.api_key.as_deref(),
            &body,
            self.retries,
            self.backoff,
        )?;
        let data = resp["data"]
            .as_array()
            .ok_or_else(|| EvalError::Provider("response has no data array".into()))?;
        if data.len() != texts.len() {
            return Err(EvalError::Provider(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|d| {
                let v: Vec<f64> = d["embedding"]
                    .as_array()
                    .ok_or_else(|| EvalError::Provider("entry has no embedding".into()))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| EvalError::Provider("non-numeric embedding".into())))
                    .collect::<Result<_, _>>()?;
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                Ok(if norm > 0.0 { v.iter().map(|a| a / norm).collect() } else { v })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub truth: usize,
    pub similarity: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub match_rate: f64,
    pub avg_similarity: f64,
    pub pairs: Vec<MatchedPair>,
}

impl MatchOutcome {
    fn constant(v: f64) -> Self {
        MatchOutcome {
            match_rate: v,
            avg_similarity: v,
            pairs: Vec::new(),
        }
    }
}

/// Decimal places kept in similarities before thresholding, so that pairs
/// whose exact cosine sits on the threshold do not flip on rounding noise.
pub const SIMILARITY_DECIMALS: i32 = 12;

fn snap(s: f64) -> f64 {
    let scale = 10f64.powi(SIMILARITY_DECIMALS);
    (s * scale).round() / scale
}

/// Greedy pairing over a precomputed similarity matrix (`sim[pred][truth]`).
/// Highest similarity first; ties break on (pred, truth) index.
pub fn greedy_pairs(sim: &[Vec<f64>], threshold: f64) -> Vec<MatchedPair> {
    let mut cells: Vec<(usize, usize, f64)> = sim
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, s)| (i, j, *s)))
        .collect();
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_p = HashSet::new();
    let mut used_t = HashSet::new();
    let mut pairs = Vec::new();
    for (i, j, s) in cells {
        if used_p.contains(&i) || used_t.contains(&j) {
            continue;
        }
        used_p.insert(i);
        used_t.insert(j);
        pairs.push(MatchedPair {
            pred: i,
            truth: j,
            similarity: s,
            matched: s > threshold,
        });
    }
    pairs
}

pub fn semantic_match(
    pred: &[String],
    truth: &[String],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<MatchOutcome, EvalError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EvalError::Threshold(threshold));
    }
    match (pred.is_empty(), truth.is_empty()) {
        (true, true) => return Ok(MatchOutcome::constant(1.0)),
        (true, false) | (false, true) => return Ok(MatchOutcome::constant(0.0)),
        _ => {}
    }
    let all: Vec<String> = pred.iter().chain(truth).cloned().collect();
    let vectors = provider.embed_all(&all)?;
    let (pv, tv) = vectors.split_at(pred.len());
    let mut sim = Vec::with_capacity(pv.len());
    for p in pv {
        let row = tv
            .iter()
            .map(|t| match cosine(p, t) {
                Ok(s) => Ok(snap(s)),
                // text without any token cannot match anything
                Err(EvalError::ZeroVector) => Ok(0.0),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<f64>, EvalError>>()?;
        sim.push(row);
    }
    let pairs = greedy_pairs(&sim, threshold);
    let matched: Vec<f64> = pairs.iter().filter(|p| p.matched).map(|p| p.similarity).collect();
    let denom = pred.len().max(truth.len()) as f64;
    let avg = if matched.is_empty() {
        0.0
    } else {
        matched.iter().sum::<f64>() / matched.len() as f64
    };
    Ok(MatchOutcome {
        match_rate: matched.len() as f64 / denom,
        avg_similarity: avg,
        pairs,
    })
}

/// The free-text lists compared semantically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextCategory {
    GcodeError,
    HmiError,
    CombinedError,
    Corrections,
}

impl TextCategory {
    pub const ALL: [TextCategory; 4] = [
        TextCategory::GcodeError,
        TextCategory::HmiError,
        TextCategory::CombinedError,
        TextCategory::Corrections,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TextCategory::GcodeError => "G-Code Error",
            TextCategory::HmiError => "HMI Error",
            TextCategory::CombinedError => "HMI and G-Code Error",
            TextCategory::Corrections => "Corrections",
        }
    }

    pub fn items(self, r: &VerificationReport) -> &[String] {
        match self {
            TextCategory::GcodeError => &r.gcode_validity.errors,
            TextCategory::HmiError => &r.slots.hmi_issues,
            TextCategory::CombinedError => &r.compliance.errors,
            TextCategory::Corrections => &r.corrections,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub match_rate: f64,
    pub avg_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub fields: FieldCorrectness,
    /// Indexed like [`TextCategory::ALL`].
    pub semantic: [CategoryScore; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl InstanceRecord {
    pub fn id(&self) -> &str {
        &self.fields.id
    }
}

/// Scores one prediction. Schema-invalid predictions get zero on every
/// semantic category as well.
pub fn score_instance(
    id: &str,
    pred: Option<&VerificationReport>,
    truth: &VerificationReport,
    provider: &dyn EmbeddingProvider,
    threshold: f64,
    note: Option<String>,
) -> Result<InstanceRecord, EvalError> {
    let fields = structural_compare(id, pred, truth);
    let mut semantic = [CategoryScore {
        match_rate: 0.0,
        avg_similarity: 0.0,
    }; 4];
    if let Some(p) = pred {
        for (slot, cat) in semantic.iter_mut().zip(TextCategory::ALL) {
            let m = semantic_match(cat.items(p), cat.items(truth), provider, threshold)?;
            *slot = CategoryScore {
                match_rate: m.match_rate,
                avg_similarity: m.avg_similarity,
            };
        }
    }
    Ok(InstanceRecord {
        fields,
        semantic,
        note,
    })
}

/// A ratio kept as its exact count so display rounding is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Count {
    pub correct: usize,
    pub total: usize,
}

impl Count {
    pub fn value(self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn display(self) -> String {
        display_ratio(self.correct, self.total)
    }
}

/// `num/den` to three decimals, ties to even, computed on integers.
pub fn display_ratio(num: usize, den: usize) -> String {
    assert!(den > 0, "ratio with zero denominator");
    let scaled = num as u128 * 1000;
    let (mut q, rem) = (scaled / den as u128, scaled % den as u128);
    let twice = rem * 2;
    if twice > den as u128 || (twice == den as u128 && q % 2 == 1) {
        q += 1;
    }
    format!("{}.{:03}", q / 1000, q % 1000)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralMetrics {
    pub n_instances: usize,
    pub schema_validity: Count,
    pub acc_collet: Count,
    pub acc_refx: Count,
    pub acc_refz: Count,
    pub acc_gcode_validity: Count,
    pub acc_compliance: Count,
}

impl StructuralMetrics {
    pub fn rows(&self) -> [(&'static str, Count); 6] {
        [
            ("Schema Validity", self.schema_validity),
            ("Collet clamped", self.acc_collet),
            ("Ref X", self.acc_refx),
            ("Ref Z", self.acc_refz),
            ("G-code Validity Accuracy", self.acc_gcode_validity),
            ("Compliance Accuracy", self.acc_compliance),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: TextCategory,
    pub match_rate: f64,
    pub avg_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: String,
    pub structural: StructuralMetrics,
    pub semantic: Vec<CategoryMetrics>,
    pub notes: Vec<String>,
}

/// Aggregates per-instance records. Records are ordered by id first, so the
/// result does not depend on input order.
pub fn summarize_run(config: &str, records: &[InstanceRecord]) -> Result<RunSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Records("no instance records".into()));
    }
    let mut sorted: Vec<&InstanceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    if let Some(w) = sorted.windows(2).find(|w| w[0].id() == w[1].id()) {
        return Err(EvalError::Records(format!("duplicate instance id {}", w[0].id())));
    }
    let n = sorted.len();
    let count = |f: fn(&FieldCorrectness) -> bool| Count {
        correct: sorted.iter().filter(|r| f(&r.fields)).count(),
        total: n,
    };
    let structural = StructuralMetrics {
        n_instances: n,
        schema_validity: count(|f| f.schema_valid),
        acc_collet: count(|f| f.collet),
        acc_refx: count(|f| f.refx),
        acc_refz: count(|f| f.refz),
        acc_gcode_validity: count(|f| f.gcode_validity),
        acc_compliance: count(|f| f.compliance),
    };
    let semantic = TextCategory::ALL
        .iter()
        .enumerate()
        .map(|(k, &category)| CategoryMetrics {
            category,
            match_rate: sorted.iter().map(|r| r.semantic[k].match_rate).sum::<f64>() / n as f64,
            avg_similarity: sorted.iter().map(|r| r.semantic[k].avg_similarity).sum::<f64>()
                / n as f64,
        })
        .collect();
    let notes = sorted
        .iter()
        .filter_map(|r| r.note.as_ref().map(|m| format!("{}: {m}", r.id())))
        .collect();
    Ok(RunSummary {
        config: config.to_string(),
        structural,
        semantic,
        notes,
    })
}

fn column_heading(config: &str) -> String {
    config
        .parse::<Preset>()
        .map(|p| p.column().to_string())
        .unwrap_or_else(|_| config.to_string())
}

fn render_table(first: &str, columns: &[String], rows: &[(String, Vec<String>)]) -> String {
    let w0 = rows
        .iter()
        .map(|r| r.0.len())
        .chain([first.len()])
        .max()
        .unwrap_or(0);
    let widths: Vec<usize> = columns.iter().map(|c| c.len().max(5)).collect();
    let mut out = String::new();
    let _ = write!(out, "{first:<w0$}");
    for (c, w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    let total = w0 + widths.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label:<w0$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Rows are the six structural metrics, columns the runs.
pub fn structural_table(runs: &[RunSummary]) -> String {
    let cols: Vec<String> = runs.iter().map(|r| column_heading(&r.config)).collect();
    let rows = (0..6)
        .map(|k| {
            let label = runs
                .first()
                .map(|r| r.structural.rows()[k].0)
                .unwrap_or_default();
            let cells = runs.iter().map(|r| r.structural.rows()[k].1.display()).collect();
            (label.to_string(), cells)
        })
        .collect::<Vec<_>>();
    render_table("Metric", &cols, &rows)
}

fn semantic_table(runs: &[RunSummary], pick: fn(&CategoryMetrics) -> f64) -> String {
    let cols: Vec<String> = runs.iter().map(|r| column_heading(&r.config)).collect();
    let rows = TextCategory::ALL
        .iter()
        .enumerate()
        .map(|(k, cat)| {
            let cells = runs.iter().map(|r| format!("{:.3}", pick(&r.semantic[k]))).collect();
            (cat.label().to_string(), cells)
        })
        .collect::<Vec<_>>();
    render_table("Category", &cols, &rows)
}

pub fn similarity_table(runs: &[RunSummary]) -> String {
    semantic_table(runs, |m| m.avg_similarity)
}

pub fn match_rate_table(runs: &[RunSummary]) -> String {
    semantic_table(runs, |m| m.match_rate)
}
