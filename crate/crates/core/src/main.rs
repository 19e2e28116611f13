use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gverify::backend::ENDPOINT_ENV;
use gverify::par::Exec;
use gverify::report::serialize_report;
use gverify::runner::{
    self, BatchOptions, EmbeddingKind, EvalOptions, Recording, RunError, VerifyOptions,
};
use gverify::vision::BBoxPct;
use gverify::vlm::{BackendKind, ConfigError, Preset, RunConfig, Shots, ViewMode};

const EXIT_CLEAN: u8 = 0;
const EXIT_OPERATIONAL: u8 = 1;
const EXIT_DEFECTS: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "gverify", version, about = "Verify CNC lathe G-code against HMI screenshots")]
struct Cli {
    /// Increase log verbosity (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify one program against one screenshot and print the report
    Verify(VerifyArgs),
    /// Write the evaluation catalog and/or the few-shot pack
    Gen(GenArgs),
    /// Run every catalog instance under one or more configurations
    Batch(BatchArgs),
    /// Score predictions against truth and write summary tables
    Eval(EvalArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML file with run settings; flags take precedence
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "oracle|mock|remote")]
    backend: Option<BackendKind>,
    /// Model name for the remote backend
    #[arg(long)]
    model: Option<String>,
    /// Cluster crop as left,top,width,height in percent
    #[arg(long, value_name = "L,T,W,H")]
    bbox: Option<BBoxPct>,
    #[arg(long, value_name = "N")]
    max_parallel: Option<usize>,
    /// Directory of recorded responses for the mock backend
    #[arg(long, value_name = "DIR")]
    recordings: Option<PathBuf>,
    /// Store every response under DIR, keyed for later mock replay
    #[arg(long, value_name = "DIR")]
    record: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, RunError> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| RunError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                toml::from_str(&text)
                    .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(endpoint) = std::env::var(ENDPOINT_ENV) {
            c.endpoint = endpoint;
        }
        if let Some(b) = self.backend {
            c.backend = b;
        }
        if let Some(m) = &self.model {
            c.model_name = m.clone();
        }
        if let Some(b) = self.bbox {
            c.cluster_bbox = b;
        }
        if let Some(n) = self.max_parallel {
            c.max_parallel = n;
        }
        c.validate()?;
        Ok(c)
    }

    fn recording(&self) -> Recording {
        Recording {
            mock_dir: self.recordings.clone(),
            record_dir: self.record.clone(),
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    gcode: PathBuf,
    image: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_name = "zero|few")]
    shots: Option<Shots>,
    #[arg(long, value_name = "full|full+cluster")]
    view: Option<ViewMode>,
    /// Few-shot pack directory (defaults to the built-in examples)
    #[arg(long, value_name = "DIR")]
    examples: Option<PathBuf>,
    /// Write the screenshot with the sampled regions outlined
    #[arg(long, value_name = "PATH")]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    output_dir: PathBuf,
    #[arg(long)]
    catalog: bool,
    #[arg(long)]
    fewshot: bool,
}

#[derive(Clone)]
struct PresetList(Vec<Preset>);

fn parse_presets(s: &str) -> Result<PresetList, ConfigError> {
    Preset::parse_list(s).map(PresetList)
}

fn parse_threshold(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err("threshold must lie strictly between 0 and 1".into())
    }
}

#[derive(Args)]
struct BatchArgs {
    manifest: PathBuf,
    /// Prediction output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Comma-separated presets (zs-full, zs-cluster, fs-full, fs-cluster) or `all`
    #[arg(long, default_value = "all", value_parser = parse_presets)]
    configs: PresetList,
    #[arg(long, value_name = "DIR")]
    examples: Option<PathBuf>,
    /// Run instances one at a time
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    pred_dir: PathBuf,
    manifest: PathBuf,
    #[arg(long, default_value = "lexical", value_name = "lexical|remote")]
    embeddings: EmbeddingKind,
    #[arg(long, default_value = "0.80", value_parser = parse_threshold)]
    threshold: f64,
    /// Presets to score; defaults to every preset directory present
    #[arg(long, value_parser = parse_presets)]
    configs: Option<PresetList>,
    /// Where summaries are written (defaults to PRED_DIR)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<u8, RunError> {
    let mut config = a.cfg.resolve()?;
    if let Some(s) = a.shots {
        config.shots = s;
    }
    if let Some(v) = a.view {
        config.view_mode = v;
    }
    let report = runner::verify_files(&VerifyOptions {
        gcode: a.gcode,
        image: a.image,
        config,
        examples_dir: a.examples,
        recording: a.cfg.recording(),
        overlay: a.overlay,
    })?;
    println!("{}", serialize_report(&report));
    Ok(if report.gcode_validity.valid && report.compliance.consistent {
        EXIT_CLEAN
    } else {
        EXIT_DEFECTS
    })
}

fn cmd_gen(a: GenArgs) -> Result<u8, RunError> {
    let both = !a.catalog && !a.fewshot;
    runner::generate(&a.output_dir, a.catalog || both, a.fewshot || both)?;
    Ok(EXIT_CLEAN)
}

fn cmd_batch(a: BatchArgs) -> Result<u8, RunError> {
    let report = runner::run_batch(&BatchOptions {
        manifest: a.manifest,
        out_dir: a.out.clone(),
        presets: a.configs.0,
        base: a.cfg.resolve()?,
        examples_dir: a.examples,
        recording: a.cfg.recording(),
        exec: exec(a.sequential),
    })?;
    let failed = report.errored().count();
    eprintln!(
        "{} completed, {failed} errored; predictions in {}",
        report.completed(),
        a.out.display()
    );
    Ok(EXIT_CLEAN)
}

fn cmd_eval(a: EvalArgs) -> Result<u8, RunError> {
    let base = ConfigArgs {
        config: a.config,
        ..ConfigArgs::default()
    }
    .resolve()?;
    let out = a.out.clone().unwrap_or_else(|| a.pred_dir.clone());
    let summary = runner::run_eval(&EvalOptions {
        pred_dir: a.pred_dir,
        manifest: a.manifest,
        presets: a.configs.map(|p| p.0),
        embeddings: a.embeddings,
        threshold: a.threshold,
        out_dir: Some(out.clone()),
        base,
        exec: Exec::Parallel,
    })?;
    print!("{}", gverify::eval::structural_table(&summary.runs));
    for run in &summary.runs {
        for note in &run.notes {
            eprintln!("{}: {note}", run.config);
        }
    }
    eprintln!("summaries written to {}", out.display());
    Ok(EXIT_CLEAN)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_CLEAN });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Batch(a) => cmd_batch(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_OPERATIONAL)
        }
    }
}
