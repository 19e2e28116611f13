//! Regenerates tests/fixtures/mock_pack: recorded responses from a
//! deterministic imperfect model, plus the golden evaluation outputs.
//!
//!     cargo run --example regen_mock_pack [-- OUT_DIR]

use std::fs;
use std::path::{Path, PathBuf};

use gverify::backend::{BackendError, ModelBackend, OracleBackend};
use gverify::par::Exec;
use gverify::report::{parse_report, serialize_report};
use gverify::runner::{self, BatchOptions, EmbeddingKind, EvalOptions, Recording};
use gverify::vision::BBoxPct;
use gverify::vlm::{messages_digest, BackendKind, ChatMessage, Preset, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Wraps the oracle and degrades its answers. Few-shot prompts and cluster
/// crops lower the error rates, roughly in the direction one would hope for.
struct NoisyModel {
    oracle: OracleBackend,
}

const PARAPHRASES: &[(&str, &str)] = &[
    ("indicator is not active", "light is off"),
    ("is not referenced", "has not been homed"),
    ("Spindle command issued", "The spindle is started"),
    ("before running this program", "first"),
    ("Modal conflict", "Conflicting motion modes"),
    ("provide a numeric value for F", "the feed word has no value"),
];

fn paraphrase(s: &str, rng: &mut ChaCha8Rng) -> String {
    let mut out = s.to_string();
    for (from, to) in PARAPHRASES {
        if out.contains(from) && rng.random_bool(0.6) {
            out = out.replace(from, to);
        }
    }
    out
}

fn perturb_list(items: &mut Vec<String>, rng: &mut ChaCha8Rng, noise: f64) {
    items.retain(|_| !rng.random_bool(noise * 0.5));
    for it in items.iter_mut() {
        if rng.random_bool(0.5) {
            *it = paraphrase(it, rng);
        }
    }
    if rng.random_bool(noise * 0.3) {
        items.push("Check the tool offsets before cutting.".into());
    }
}

impl ModelBackend for NoisyModel {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let clean = self.oracle.complete(messages)?;
        let digest = messages_digest(messages);
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let few_shot = messages.len() > 2;
        let cluster = messages.last().map_or(0, |m| m.images().count()) > 1;
        let noise = match (few_shot, cluster) {
            (false, false) => 0.35,
            (false, true) => 0.28,
            (true, false) => 0.2,
            (true, true) => 0.15,
        };

        if rng.random_bool(0.04) {
            return Ok("The program looks mostly fine, but REF X seems dark.".into());
        }
        let mut r = parse_report(&clean).expect("oracle output is valid");
        for slot in [&mut r.slots.collet_clamped, &mut r.slots.refx, &mut r.slots.refz] {
            if rng.random_bool(noise * 0.6) {
                *slot = !*slot;
            }
        }
        if rng.random_bool(noise * 0.3) {
            r.gcode_validity.valid = !r.gcode_validity.valid;
        }
        if rng.random_bool(noise * 0.5) {
            r.compliance.consistent = !r.compliance.consistent;
        }
        perturb_list(&mut r.slots.hmi_issues, &mut rng, noise);
        perturb_list(&mut r.gcode_validity.errors, &mut rng, noise);
        perturb_list(&mut r.compliance.errors, &mut rng, noise);
        perturb_list(&mut r.corrections, &mut rng, noise);
        let text = serialize_report(&r);
        Ok(if rng.random_bool(0.1) {
            format!("```json\n{text}\n```")
        } else {
            text
        })
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| root.join("tests/fixtures/mock_pack"));
    let work = tempfile::tempdir()?;
    runner::generate(work.path(), true, true)?;
    let manifest = work.path().join("catalog/manifest.json");

    let recordings = out.join("recordings");
    if recordings.exists() {
        fs::remove_dir_all(&recordings)?;
    }
    fs::create_dir_all(&recordings)?;

    // Record through the noisy model, then replay through the mock backend so
    // the golden files come from exactly the path the tests exercise.
    let model = gverify::backend::Recorder {
        inner: NoisyModel {
            oracle: OracleBackend::new(BBoxPct::default_cluster()),
        },
        dir: recordings.clone(),
    };
    let examples = gverify::dataset::load_fewshot_pack(&work.path().join("fewshot"))?;
    let m = gverify::dataset::load_manifest(&manifest)?;
    for preset in Preset::ALL {
        let config = preset.apply(&RunConfig::default());
        for d in &m.instances {
            let gcode = fs::read_to_string(m.resolve(&d.gcode))?;
            let image = gverify::vision::load_image(&m.resolve(&d.image))?;
            let msgs = gverify::vlm::build_messages(
                &config,
                &gcode,
                &image,
                &examples,
                gverify::report::SCHEMA_TEXT,
            )?;
            model.complete(&msgs)?;
        }
    }

    let preds = work.path().join("preds");
    let base = RunConfig {
        backend: BackendKind::Mock,
        ..RunConfig::default()
    };
    runner::run_batch(&BatchOptions {
        manifest: manifest.clone(),
        out_dir: preds.clone(),
        presets: Preset::ALL.to_vec(),
        base: base.clone(),
        examples_dir: None,
        recording: Recording {
            mock_dir: Some(recordings),
            record_dir: None,
        },
        exec: Exec::Parallel,
    })?;
    let golden = out.join("golden");
    runner::run_eval(&EvalOptions {
        pred_dir: preds,
        manifest,
        presets: None,
        embeddings: EmbeddingKind::Lexical,
        threshold: gverify::eval::DEFAULT_THRESHOLD,
        out_dir: Some(golden.clone()),
        base,
        exec: Exec::Parallel,
    })?;
    fs::remove_file(golden.join(runner::RECORDS_FILE))?;
    println!("mock pack written to {}", out.display());
    Ok(())
}
