//! Run configuration and construction of the multimodal message sequence
//! sent to a vision-chat model.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::FewShotExample;
use crate::report::{parse_report, serialize_report, ReportError, VerificationReport};
use crate::vision::{crop_pct, BBoxPct};

/// Fixed instruction that accompanies every test input.
pub const USER_PROMPT: &str = "Inspect the attached HMI image and G-code using the system rules. output only one JSON object. Check three LEDs: COLLET CLAMPED, REF X, REF Z. If any LED is dark or unclear, set false and include the exact issue line. Ignore G-code spacing.";

pub const SYSTEM_PROMPT_TEMPLATE: &str = include_str!("../assets/system_prompt_v1.txt");
pub const SYSTEM_PROMPT_VERSION: &str = "v1";

/// Header of the text part that carries a program.
pub const GCODE_HEADER: &str = "G-code:\n";
pub const FULL_IMAGE_CAPTION: &str = "HMI screenshot (full view):";
pub const CLUSTER_IMAGE_CAPTION: &str = "HMI right-hand indicator cluster (crop of the same screenshot):";

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4.1";

#[derive(Debug, Error, Clone, PartialEq)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePart {
    pub image: Arc<RgbImage>,
    pub media_type: &'static str,
}

impl ImagePart {
    pub fn png(image: RgbImage) -> Self {
        ImagePart {
            image: Arc::new(image),
            media_type: "image/png",
        }
    }

    /// SHA-256 over dimensions and raw RGB samples; independent of file encoding.
    pub fn pixel_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.image.width().to_be_bytes());
        h.update(self.image.height().to_be_bytes());
        h.update(self.image.as_raw());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    Image(ImagePart),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        ChatMessage {
            role,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            Part::Text(t) => Some(t.as_str()),
            Part::Image(_) => None,
        })
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePart> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(i) => Some(i),
            Part::Text(_) => None,
        })
    }

    /// Text parts joined by newlines.
    pub fn joined_text(&self) -> String {
        self.texts().collect::<Vec<_>>().join("\n")
    }
}

/// Content digest used to key recorded responses.
pub fn messages_digest(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        for p in &m.parts {
            match p {
                Part::Text(t) => {
                    h.update(b"T");
                    h.update((t.len() as u64).to_be_bytes());
                    h.update(t.as_bytes());
                }
                Part::Image(i) => {
                    h.update(b"I");
                    h.update(i.pixel_digest().as_bytes());
                }
            }
        }
        h.update(b"\x1e");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shots {
    Zero,
    Few,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "full+cluster", alias = "full_plus_cluster")]
    FullPlusCluster,
}

macro_rules! keyword_enum {
    ($ty:ty { $($text:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = ConfigError;
            fn from_str(s: &str) -> Result<Self, ConfigError> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(ConfigError(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

keyword_enum!(BackendKind { "oracle" => BackendKind::Oracle, "mock" => BackendKind::Mock, "remote" => BackendKind::Remote });
keyword_enum!(Shots { "zero" => Shots::Zero, "few" => Shots::Few });
keyword_enum!(ViewMode { "full" => ViewMode::Full, "full+cluster" => ViewMode::FullPlusCluster, "full_plus_cluster" => ViewMode::FullPlusCluster });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub shots: Shots,
    pub view_mode: ViewMode,
    pub cluster_bbox: BBoxPct,
    pub temperature: f64,
    pub model_name: String,
    pub max_parallel: usize,
    pub endpoint: String,
    pub timeout_secs: f64,
    pub retries: u32,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: BackendKind::Oracle,
            shots: Shots::Zero,
            view_mode: ViewMode::Full,
            cluster_bbox: BBoxPct::default_cluster(),
            temperature: 0.0,
            model_name: DEFAULT_MODEL.to_string(),
            max_parallel: 4,
            endpoint: DEFAULT_ENDPOINT.to_string(),
            timeout_secs: 60.0,
            retries: 3,
            backoff_ms: 1000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_parallel == 0 {
            return Err(ConfigError("max_parallel must be at least 1".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(ConfigError("timeout_secs must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ConfigError("temperature must be a non-negative number".into()));
        }
        Ok(())
    }
}

/// The four evaluated configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    ZsFull,
    ZsCluster,
    FsFull,
    FsCluster,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::ZsFull, Preset::ZsCluster, Preset::FsFull, Preset::FsCluster];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ZsFull => "zs-full",
            Preset::ZsCluster => "zs-cluster",
            Preset::FsFull => "fs-full",
            Preset::FsCluster => "fs-cluster",
        }
    }

    /// Column heading used in summary tables.
    pub fn column(self) -> &'static str {
        match self {
            Preset::ZsFull => "ZS Full",
            Preset::ZsCluster => "ZS +Clust",
            Preset::FsFull => "FS Full",
            Preset::FsCluster => "FS +Clust",
        }
    }

    pub fn shots(self) -> Shots {
        match self {
            Preset::ZsFull | Preset::ZsCluster => Shots::Zero,
            Preset::FsFull | Preset::FsCluster => Shots::Few,
        }
    }

    pub fn view_mode(self) -> ViewMode {
        match self {
            Preset::ZsFull | Preset::FsFull => ViewMode::Full,
            Preset::ZsCluster | Preset::FsCluster => ViewMode::FullPlusCluster,
        }
    }

    /// `base` with this preset's shots and view mode, at temperature zero.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        RunConfig {
            shots: self.shots(),
            view_mode: self.view_mode(),
            temperature: 0.0,
            ..base.clone()
        }
    }

    /// Parses `all` or a comma-separated list of preset names.
    pub fn parse_list(s: &str) -> Result<Vec<Preset>, ConfigError> {
        if s.trim() == "all" {
            return Ok(Preset::ALL.to_vec());
        }
        let mut out = Vec::new();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            let p: Preset = name.parse()?;
            if !out.contains(&p) {
                out.push(p);
            }
        }
        if out.is_empty() {
            return Err(ConfigError("no configurations selected".into()));
        }
        out.sort();
        Ok(out)
    }
}

impl FromStr for Preset {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ConfigError(format!("unknown configuration {s:?}")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn system_prompt(schema_text: &str) -> String {
    SYSTEM_PROMPT_TEMPLATE.replace("{{SCHEMA}}", schema_text.trim_end())
}

fn input_parts(
    config: &RunConfig,
    lead: &str,
    gcode: &str,
    image: &RgbImage,
) -> Vec<Part> {
    let mut parts = vec![
        Part::Text(lead.to_string()),
        Part::Text(format!("{GCODE_HEADER}{gcode}")),
        Part::Text(FULL_IMAGE_CAPTION.to_string()),
        Part::Image(ImagePart::png(image.clone())),
    ];
    if config.view_mode == ViewMode::FullPlusCluster {
        parts.push(Part::Text(CLUSTER_IMAGE_CAPTION.to_string()));
        parts.push(Part::Image(ImagePart::png(crop_pct(image, &config.cluster_bbox))));
    }
    parts
}

/// System message, then one user/assistant pair per example when few-shot,
/// then the test input. Example inputs follow the run's view mode.
pub fn build_messages(
    config: &RunConfig,
    gcode: &str,
    image: &RgbImage,
    examples: &[FewShotExample],
    schema_text: &str,
) -> Result<Vec<ChatMessage>, ConfigError> {
    if config.shots == Shots::Few && examples.is_empty() {
        return Err(ConfigError("few-shot prompting needs at least one example".into()));
    }
    let mut messages = vec![ChatMessage::text(Role::System, system_prompt(schema_text))];
    if config.shots == Shots::Few {
        let n = examples.len();
        for (i, ex) in examples.iter().enumerate() {
            let lead = format!("Worked example {} of {n}. {USER_PROMPT}", i + 1);
            messages.push(ChatMessage {
                role: Role::User,
                parts: input_parts(config, &lead, &ex.gcode, &ex.image),
            });
            messages.push(ChatMessage::text(
                Role::Assistant,
                serialize_report(&ex.expected_report),
            ));
        }
    }
    messages.push(ChatMessage {
        role: Role::User,
        parts: input_parts(config, USER_PROMPT, gcode, image),
    });
    Ok(messages)
}

/// A model answer that could not be turned into a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractFailure {
    pub error: ReportError,
    pub violations: Vec<String>,
    pub raw_text: String,
}

pub fn extract_report(raw_text: &str) -> Result<VerificationReport, ExtractFailure> {
    parse_report(raw_text).map_err(|error| ExtractFailure {
        violations: error.violations(),
        error,
        raw_text: raw_text.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::{validate_schema, SCHEMA_TEXT};
    use crate::vision::{render_synthetic, IndicatorStates};

    fn example(label: &str) -> FewShotExample {
        FewShotExample {
            label: label.into(),
            gcode: format!("G0 X1 ({label})"),
            image: RgbImage::new(20, 10),
            expected_report: VerificationReport::default(),
        }
    }

    fn config(shots: Shots, view: ViewMode) -> RunConfig {
        RunConfig {
            shots,
            view_mode: view,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_shot_full_view() {
        let img = render_synthetic(IndicatorStates::default(), None);
        let msgs = build_messages(&config(Shots::Zero, ViewMode::Full), "G0 X1", &img, &[], SCHEMA_TEXT)
            .unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].role, Role::System);
        assert_eq!(msgs[0].images().count(), 0);
        assert!(msgs[0].joined_text().contains("\"HMI and G-code compliance\""));
        assert_eq!(msgs[1].role, Role::User);
        assert_eq!(msgs[1].images().count(), 1);
        assert!(msgs[1].texts().any(|t| t == USER_PROMPT));
    }

    #[test]
    fn few_shot_cluster_message_walk() {
        let examples: Vec<_> = (0..7).map(|i| example(&format!("e{i}"))).collect();
        let img = RgbImage::new(100, 50);
        let msgs = build_messages(
            &config(Shots::Few, ViewMode::FullPlusCluster),
            "G0 X1",
            &img,
            &examples,
            SCHEMA_TEXT,
        )
        .unwrap();
        assert_eq!(msgs.len(), 2 + 2 * 7);
        for (i, pair) in msgs[1..15].chunks(2).enumerate() {
            assert_eq!(pair[0].role, Role::User);
            assert!(pair[0].joined_text().contains(&format!("(e{i})")));
            assert_eq!(pair[0].images().count(), 2);
            assert_eq!(pair[1].role, Role::Assistant);
            assert!(validate_schema(&pair[1].joined_text()).valid);
        }
        let last = msgs.last().unwrap();
        assert_eq!(last.role, Role::User);
        let crops: Vec<_> = last.images().collect();
        assert_eq!(crops.len(), 2);
        assert_eq!(crops[1].image.dimensions(), (22, 18));
    }

    #[test]
    fn every_image_is_captioned() {
        let examples = vec![example("a")];
        let msgs = build_messages(
            &config(Shots::Few, ViewMode::FullPlusCluster),
            "G0 X1",
            &RgbImage::new(10, 10),
            &examples,
            SCHEMA_TEXT,
        )
        .unwrap();
        for m in &msgs {
            for (i, p) in m.parts.iter().enumerate() {
                if matches!(p, Part::Image(_)) {
                    assert!(matches!(&m.parts[i - 1], Part::Text(_)));
                }
            }
        }
    }

    #[test]
    fn few_shot_without_examples_is_config_error() {
        let err = build_messages(
            &config(Shots::Few, ViewMode::Full),
            "",
            &RgbImage::new(1, 1),
            &[],
            SCHEMA_TEXT,
        );
        assert!(err.is_err());
    }

    #[test]
    fn building_is_deterministic() {
        let img = render_synthetic(IndicatorStates::new(true, false, true), Some(3));
        let c = config(Shots::Zero, ViewMode::FullPlusCluster);
        let a = build_messages(&c, "G0 X1", &img, &[], SCHEMA_TEXT).unwrap();
        let b = build_messages(&c, "G0 X1", &img, &[], SCHEMA_TEXT).unwrap();
        assert_eq!(a, b);
        assert_eq!(messages_digest(&a), messages_digest(&b));
        let other = build_messages(&c, "G0 X2", &img, &[], SCHEMA_TEXT).unwrap();
        assert_ne!(messages_digest(&a), messages_digest(&other));
    }

    #[test]
    fn presets() {
        assert_eq!(Preset::parse_list("all").unwrap(), Preset::ALL.to_vec());
        assert_eq!(
            Preset::parse_list("fs-cluster,zs-full").unwrap(),
            vec![Preset::ZsFull, Preset::FsCluster]
        );
        assert!(Preset::parse_list("zs-everything").is_err());
        for p in Preset::ALL {
            assert_eq!(p.apply(&RunConfig::default()).temperature, 0.0);
        }
    }

    #[test]
    fn config_from_toml() {
        let c: RunConfig = toml::from_str(
            "backend = \"remote\"\nview_mode = \"full+cluster\"\nmax_parallel = 2\n[cluster_bbox]\nleft = 70.0\ntop = 0.0\nwidth = 30.0\nheight = 50.0\n",
        )
        .unwrap();
        assert_eq!(c.backend, BackendKind::Remote);
        assert_eq!(c.view_mode, ViewMode::FullPlusCluster);
        assert_eq!(c.max_parallel, 2);
        assert_eq!(c.cluster_bbox.left(), 70.0);
        assert_eq!(c.temperature, 0.0);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn extract_variants() {
        let text = serialize_report(&VerificationReport::default());
        assert!(extract_report(&text).is_ok());
        assert!(extract_report(&format!("```json\n{text}\n```")).is_ok());
        let fail = extract_report("Looks fine to me.").unwrap_err();
        assert!(matches!(fail.error, ReportError::Parse(_)));
        assert_eq!(fail.raw_text, "Looks fine to me.");
        assert!(!fail.violations.is_empty());
    }
}
