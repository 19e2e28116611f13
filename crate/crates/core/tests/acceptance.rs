//! Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use gverify::backend::{call_model, BackendError, RemoteBackend};
use gverify::compliance::{check_compliance, RequiredStates, COLLET_VIOLATION, REFX_VIOLATION, REFZ_VIOLATION};
use gverify::dataset::{load_fewshot_pack, load_manifest, Manifest};
use gverify::eval::{
    embed_lexical, fnv1a64, lexical_tokens, semantic_match, EmbeddingProvider, EvalError, LexicalProvider,
    LEXICAL_DIMENSION,
};
use gverify::par::{self, Exec};
use gverify::report::{
    parse_report, serialize_report, validate_schema, Compliance, GcodeValidity, Slots,
    VerificationReport, SCHEMA_TEXT,
};
use gverify::runner::{
    self, prediction_path, BatchOptions, EmbeddingKind, EvalOptions, Recording, RunError,
    MATCH_RATE_TABLE, SIMILARITY_TABLE, STRUCTURAL_TABLE, SUMMARY_FILE,
};
use gverify::vision::{classify_indicators, crop_pct, render_synthetic, BBoxPct, IndicatorLayout, IndicatorStates};
use gverify::vlm::{build_messages, BackendKind, ChatMessage, Part, Preset, Role, RunConfig, Shots, ViewMode};

type Outcome = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    }};
}

fn run_err(e: RunError) -> String {
    e.to_string()
}

/// Fresh catalog and few-shot pack in a temporary directory.
fn workspace() -> Result<(tempfile::TempDir, PathBuf), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    runner::generate(dir.path(), true, true).map_err(run_err)?;
    let manifest = dir.path().join("catalog/manifest.json");
    Ok((dir, manifest))
}

fn batch(manifest: &Path, out: &Path, base: RunConfig, recording: Recording, exec: Exec) -> Result<usize, String> {
    let report = runner::run_batch(&BatchOptions {
        manifest: manifest.to_path_buf(),
        out_dir: out.to_path_buf(),
        presets: Preset::ALL.to_vec(),
        base,
        examples_dir: None,
        recording,
        exec,
    })
    .map_err(run_err)?;
    Ok(report.completed())
}

fn eval(pred: &Path, manifest: &Path, out: &Path) -> Result<runner::EvalSummary, String> {
    runner::run_eval(&EvalOptions {
        pred_dir: pred.to_path_buf(),
        manifest: manifest.to_path_buf(),
        presets: None,
        embeddings: EmbeddingKind::Lexical,
        threshold: 0.80,
        out_dir: Some(out.to_path_buf()),
        base: RunConfig::default(),
        exec: Exec::Parallel,
    })
    .map_err(run_err)
}

// Independent transcription of the scenario table: id -> error classes.
const SCENARIO_TABLE: [(&str, &str, &[&str]); 16] = [
    ("S1-i1", "T/F/F", &["Modal conflict"]),
    ("S1-i2", "T/F/F", &[]),
    ("S2-i1", "F/F/F", &["Invalid command"]),
    ("S2-i2", "T/F/T", &[]),
    ("S3-i1", "T/T/F", &["*multiple"]),
    ("S3-i2", "T/T/F", &[]),
    ("S4-i1", "T/F/T", &["Non-numeric coordinate"]),
    ("S4-i2", "T/F/T", &[]),
    ("S5-i1", "F/T/F", &["Feed F missing value"]),
    ("S5-i2", "F/T/F", &[]),
    ("S6-i1", "F/T/T", &["Unknown code"]),
    ("S6-i2", "F/T/T", &[]),
    ("S7-i1", "T/T/T", &["Empty motion block"]),
    ("S7-i2", "T/T/T", &[]),
    ("S8-i1", "F/F/F", &["Unsafe feed"]),
    ("S8-i2", "F/F/F", &[]),
];

const CATEGORY_LABELS: [&str; 8] = [
    "Modal conflict",
    "Invalid command",
    "Non-numeric coordinate",
    "Feed F missing value",
    "Unknown code",
    "Empty motion block",
    "Unsafe feed",
    "Other",
];

fn error_classes(errors: &[String]) -> BTreeSet<&'static str> {
    CATEGORY_LABELS
        .into_iter()
        .filter(|l| errors.iter().any(|e| e.contains(&format!(": {l}: "))))
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (dir, manifest) = workspace()?;
    let preds = dir.path().join("preds");
    let done = batch(&manifest, &preds, RunConfig::default(), Recording::default(), Exec::Parallel)?;
    ensure!(done == 64, "oracle batch completed {done}/64");
    let summary = eval(&preds, &manifest, &dir.path().join("eval"))?;
    for run in &summary.runs {
        for (label, c) in run.structural.rows() {
            ensure!(c.display() == "1.000", "{} {label} = {}", run.config, c.display());
        }
    }
    let m = load_manifest(&manifest).map_err(|e| e.to_string())?;
    for (id, states, classes) in SCENARIO_TABLE {
        let d = m.instances.iter().find(|d| d.id == id).ok_or(format!("{id} missing"))?;
        let inst = m.load_instance(d).map_err(|e| e.to_string())?;
        ensure!(inst.indicators.to_string() == states, "{id} indicators {}", inst.indicators);
        let found = error_classes(&inst.truth.gcode_validity.errors);
        match classes {
            [] => ensure!(found.is_empty() && inst.truth.gcode_validity.valid, "{id} should be clean, has {found:?}"),
            ["*multiple"] => ensure!(found.len() >= 2, "{id} should carry several classes, has {found:?}"),
            _ => ensure!(
                found == classes.iter().copied().collect::<BTreeSet<_>>(),
                "{id} classes {found:?}, expected {classes:?}"
            ),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("4 configs x 16 instances all 1.000; 8 faulty / 8 clean as tabulated; {secs:.2} s"))
}

fn criterion_2() -> Outcome {
    let layout = IndicatorLayout::default();
    let bbox = BBoxPct::default_cluster();
    let cases: Vec<(IndicatorStates, u64)> = IndicatorStates::all()
        .into_iter()
        .flat_map(|s| (0..100u64).map(move |seed| (s, seed)))
        .collect();
    let errors: Vec<String> = par::map(Exec::Parallel, 8, &cases, |(states, seed)| {
        let img = render_synthetic(*states, Some(*seed));
        match classify_indicators(&crop_pct(&img, &bbox), &layout) {
            Ok(got) if got == *states => None,
            Ok(got) => Some(format!("{states} seed {seed} read as {got}")),
            Err(e) => Some(format!("{states} seed {seed}: {e}")),
        }
    })
    .into_iter()
    .flatten()
    .collect();
    ensure!(errors.is_empty(), "{} misreads, first: {}", errors.len(), errors[0]);
    Ok(format!("{}/{} recovered", cases.len(), cases.len()))
}

fn criterion_3() -> Outcome {
    let mut agree = 0;
    for r in 0..8u8 {
        for i in 0..8u8 {
            let req = RequiredStates {
                needs_collet: r & 4 != 0,
                needs_refx: r & 2 != 0,
                needs_refz: r & 1 != 0,
            };
            let ind = IndicatorStates::new(i & 4 != 0, i & 2 != 0, i & 1 != 0);
            // implication per rule: required -> lit
            let rules = [
                (req.needs_collet, ind.collet_clamped, COLLET_VIOLATION),
                (req.needs_refx, ind.refx, REFX_VIOLATION),
                (req.needs_refz, ind.refz, REFZ_VIOLATION),
            ];
            let expected: Vec<String> = rules
                .iter()
                .filter(|(need, lit, _)| *need && !*lit)
                .map(|(_, _, p)| p.to_string())
                .collect();
            let want = (rules.iter().all(|(need, lit, _)| !need | lit), expected);
            if check_compliance(&req, &ind) == want {
                agree += 1;
            }
        }
    }
    ensure!(agree == 64, "{agree}/64 agree");
    Ok("64/64 agree with the implication table".into())
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "Line 3", "REF X", "\"quoted\"", "back\\slash", "tab\t", "new\nline", "ü", "Ø", "🔧", "{", "}",
        "```", "slots", ": ", "G01", "F", "", " ", "HMI issues", "\u{0}", "é",
    ];
    let n = rng.random_range(0..6);
    (0..n).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect()
}

fn random_list(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.random_range(0..4);
    (0..n).map(|_| random_text(rng)).collect()
}

fn random_report(rng: &mut ChaCha8Rng) -> VerificationReport {
    VerificationReport {
        slots: Slots {
            collet_clamped: rng.random(),
            refx: rng.random(),
            refz: rng.random(),
            hmi_issues: random_list(rng),
        },
        gcode_validity: GcodeValidity {
            valid: rng.random(),
            errors: random_list(rng),
        },
        compliance: Compliance {
            consistent: rng.random(),
            errors: random_list(rng),
        },
        corrections: random_list(rng),
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..1000 {
        let r = random_report(&mut rng);
        let text = serialize_report(&r);
        let back = parse_report(&text).map_err(|e| format!("report {k}: {e}"))?;
        ensure!(back == r, "report {k} changed on round trip");
    }

    let base = VerificationReport {
        slots: Slots {
            collet_clamped: true,
            refx: false,
            refz: true,
            hmi_issues: vec!["REF X indicator is not active".into()],
        },
        gcode_validity: GcodeValidity {
            valid: false,
            errors: vec!["Line 2: Modal conflict: x".into()],
        },
        compliance: Compliance {
            consistent: false,
            errors: vec![REFX_VIOLATION.into()],
        },
        corrections: vec!["Reference the X axis before running this program.".into()],
    };
    let text = serialize_report(&base);
    let value: Value = serde_json::from_str(&text).unwrap();
    let nested = [
        ("slots", "collet_clamped", true),
        ("slots", "refx", true),
        ("slots", "refz", true),
        ("slots", "HMI issues", false),
        ("gcode_validity", "valid", true),
        ("gcode_validity", "g-code errors", false),
        ("HMI and G-code compliance", "consistent", true),
        ("HMI and G-code compliance", "HMI and G-code errors", false),
    ];

    let mut cases: Vec<(String, String, Option<Vec<String>>)> = Vec::new();
    for key in ["slots", "gcode_validity", "HMI and G-code compliance", "corrections"] {
        let mut v = value.clone();
        v.as_object_mut().unwrap().remove(key);
        cases.push((format!("drop {key}"), v.to_string(), Some(vec![format!("{key}: missing required field")])));
    }
    for (parent, key, is_bool) in nested {
        let mut v = value.clone();
        v[parent].as_object_mut().unwrap().remove(key);
        cases.push((
            format!("drop {parent}.{key}"),
            v.to_string(),
            Some(vec![format!("{parent}.\"{key}\": missing required field")]),
        ));
        if is_bool {
            let mut v = value.clone();
            v[parent][key] = json!("true");
            cases.push((
                format!("retype {parent}.{key}"),
                v.to_string(),
                Some(vec![format!("{parent}.\"{key}\": expected boolean, found string")]),
            ));
        }
    }
    let mut v = value.clone();
    v["notes"] = json!("extra");
    cases.push(("add notes".into(), v.to_string(), Some(vec!["notes: unexpected field".into()])));
    let mut v = value.clone();
    v["slots"]["confidence"] = json!(0.9);
    cases.push((
        "add slots.confidence".into(),
        v.to_string(),
        Some(vec!["slots.\"confidence\": unexpected field".into()]),
    ));
    let mut v = value.clone();
    v.as_object_mut().unwrap().remove("corrections");
    v["slots"]["refx"] = json!(0);
    cases.push((
        "two defects".into(),
        v.to_string(),
        Some(vec![
            "slots.\"refx\": expected boolean, found number".into(),
            "corrections: missing required field".into(),
        ]),
    ));
    cases.push(("json fence".into(), format!("```json\n{text}\n```"), None));
    cases.push(("bare fence".into(), format!("```\n{text}\n```"), None));
    cases.push(("prose".into(), "All good, nothing to report.".into(), Some(vec!["$:".into()])));
    cases.push(("prose prefix".into(), format!("Here you go: {text}"), Some(vec!["$:".into()])));

    for (name, input, expected) in &cases {
        let verdict = validate_schema(input);
        match expected {
            None => ensure!(verdict.valid, "{name}: rejected {:?}", verdict.violations),
            Some(want) if want == &vec!["$:".to_string()] => ensure!(
                !verdict.valid && verdict.violations.len() == 1 && verdict.violations[0].starts_with("$: "),
                "{name}: {:?}",
                verdict.violations
            ),
            Some(want) => {
                let got: BTreeSet<&String> = verdict.violations.iter().collect();
                let want_set: BTreeSet<&String> = want.iter().collect();
                ensure!(!verdict.valid && got == want_set, "{name}: got {:?}, want {want:?}", verdict.violations);
            }
        }
    }
    Ok(format!("1000/1000 round trips; {}/{} mutations classified with exact paths", cases.len(), cases.len()))
}

/// Table cells to reproduce, by configuration: correct counts for
/// (schema, collet, refx, refz, validity, compliance) out of 16.
const TABLE_COUNTS: [(Preset, [usize; 6], [&str; 6]); 4] = [
    (Preset::ZsFull, [16, 11, 10, 11, 14, 11], ["1.000", "0.688", "0.625", "0.688", "0.875", "0.688"]),
    (Preset::ZsCluster, [16, 11, 12, 12, 15, 10], ["1.000", "0.688", "0.750", "0.750", "0.938", "0.625"]),
    (Preset::FsFull, [16, 5, 12, 13, 15, 12], ["1.000", "0.312", "0.750", "0.812", "0.938", "0.750"]),
    (Preset::FsCluster, [16, 8, 15, 12, 15, 12], ["1.000", "0.500", "0.938", "0.750", "0.938", "0.750"]),
];

fn criterion_5() -> Outcome {
    let (dir, manifest) = workspace()?;
    let m: Manifest = load_manifest(&manifest).map_err(|e| e.to_string())?;
    let mut ids: Vec<String> = m.instances.iter().map(|d| d.id.clone()).collect();
    ids.sort();
    let preds = dir.path().join("preds");
    for (preset, counts, _) in TABLE_COUNTS {
        for (k, id) in ids.iter().enumerate() {
            let d = m.instances.iter().find(|d| &d.id == id).unwrap();
            let mut r = m.load_instance(d).map_err(|e| e.to_string())?.truth;
            // instances past the count get that field wrong
            let wrong = |field: usize| k >= counts[field];
            if wrong(1) {
                r.slots.collet_clamped ^= true;
            }
            if wrong(2) {
                r.slots.refx ^= true;
            }
            if wrong(3) {
                r.slots.refz ^= true;
            }
            if wrong(4) {
                r.gcode_validity.valid ^= true;
            }
            if wrong(5) {
                r.compliance.consistent ^= true;
            }
            let path = prediction_path(&preds, preset, id);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(&path, serialize_report(&r)).unwrap();
        }
    }
    let out = dir.path().join("eval");
    eval(&preds, &manifest, &out)?;
    let table = fs::read_to_string(out.join(STRUCTURAL_TABLE)).map_err(|e| e.to_string())?;
    let rows = ["Schema Validity", "Collet clamped", "Ref X", "Ref Z", "G-code Validity Accuracy", "Compliance Accuracy"];
    for (k, label) in rows.iter().enumerate() {
        let line = table
            .lines()
            .find(|l| l.starts_with(label))
            .ok_or(format!("row {label} missing"))?;
        let cells: Vec<&str> = line[label.len()..].split_whitespace().collect();
        let want: Vec<&str> = TABLE_COUNTS.iter().map(|t| t.2[k]).collect();
        ensure!(cells == want, "{label}: got {cells:?}, want {want:?}");
    }
    Ok("all 24 structural cells reproduced (incl. 10/16=0.625, 15/16=0.938, 11/16=0.688, 5/16=0.312, 13/16=0.812)".into())
}

struct Fixed(Vec<Vec<f64>>);

impl EmbeddingProvider for Fixed {
    fn dimension(&self) -> usize {
        2
    }
    fn embed_all(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EvalError> {
        Ok(texts.iter().map(|t| self.0[t.parse::<usize>().unwrap()].clone()).collect())
    }
}

const PARAPHRASES: &[(&str, &str)] = &[
    ("indicator is not active", "light is off"),
    ("is not referenced", "is not homed"),
    ("before running this program", "first"),
    ("Line ", "At line "),
    ("Modal conflict", "modal conflict detected"),
    ("COLLET CLAMPED", "collet clamp"),
];

fn text_corpus(m: &Manifest) -> Result<Vec<String>, String> {
    let mut items = BTreeSet::new();
    for d in &m.instances {
        let t = m.load_instance(d).map_err(|e| e.to_string())?.truth;
        for list in [&t.slots.hmi_issues, &t.gcode_validity.errors, &t.compliance.errors, &t.corrections] {
            items.extend(list.iter().cloned());
        }
    }
    let base: Vec<String> = items.into_iter().collect();
    let mut out = base.clone();
    for s in &base {
        for (from, to) in PARAPHRASES {
            if s.contains(from) {
                out.push(s.replace(from, to));
            }
        }
    }
    Ok(out)
}

/// Bucket counts of the lexical embedding, before normalization.
fn bucket_counts(text: &str) -> HashMap<u64, i64> {
    let mut m = HashMap::new();
    for t in lexical_tokens(text) {
        *m.entry(fnv1a64(&t) % LEXICAL_DIMENSION as u64).or_insert(0) += 1;
    }
    m
}

/// cos > 4/5 decided on integers: 25 dot^2 > 16 |a|^2 |b|^2 with dot > 0.
fn exceeds_four_fifths(a: &HashMap<u64, i64>, b: &HashMap<u64, i64>) -> bool {
    let dot: i64 = a.iter().map(|(k, x)| x * b.get(k).copied().unwrap_or(0)).sum();
    let na: i64 = a.values().map(|x| x * x).sum();
    let nb: i64 = b.values().map(|x| x * x).sum();
    dot > 0 && 25 * dot * dot > 16 * na * nb
}

fn optimal_matches(hit: &[Vec<bool>]) -> usize {
    fn go(i: usize, hit: &[Vec<bool>], used: &mut Vec<bool>) -> usize {
        if i == hit.len() {
            return 0;
        }
        let mut best = go(i + 1, hit, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(usize::from(hit[i][j]) + go(i + 1, hit, used));
                used[j] = false;
            }
        }
        best
    }
    let cols = hit.first().map_or(0, Vec::len);
    go(0, hit, &mut vec![false; cols])
}

fn criterion_6() -> Outcome {
    let lex = LexicalProvider::default();
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    let same = s(&["Line 2: Modal conflict: G00 and G01 in one block", "REF X indicator is not active"]);
    let m = semantic_match(&same, &same, &lex, 0.8).map_err(|e| e.to_string())?;
    ensure!((m.match_rate, m.avg_similarity) == (1.0, 1.0), "identical lists gave {m:?}");
    let m = semantic_match(&[], &s(&["Modal conflict at line 1"]), &lex, 0.8).map_err(|e| e.to_string())?;
    ensure!((m.match_rate, m.avg_similarity) == (0.0, 0.0), "one-sided empty gave {m:?}");

    let fixed = Fixed(vec![vec![1.0, 0.0], vec![0.8, 0.6]]);
    let m = semantic_match(&s(&["0"]), &s(&["1"]), &fixed, 0.80).map_err(|e| e.to_string())?;
    ensure!(m.pairs.len() == 1 && m.pairs[0].similarity == 0.8, "boundary pair similarity {:?}", m.pairs);
    ensure!(m.match_rate == 0.0, "similarity exactly 0.80 matched");

    let (_dir, manifest) = workspace()?;
    let corpus = text_corpus(&load_manifest(&manifest).map_err(|e| e.to_string())?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    for p in 1..=4 {
        for t in 1..=4 {
            for _ in 0..60 {
                let pick = |rng: &mut ChaCha8Rng, n| -> Vec<String> {
                    (0..n).map(|_| corpus[rng.random_range(0..corpus.len())].clone()).collect()
                };
                let pred = pick(&mut rng, p);
                let truth = pick(&mut rng, t);
                let m = semantic_match(&pred, &truth, &lex, 0.8).map_err(|e| e.to_string())?;
                let greedy = m.pairs.iter().filter(|x| x.matched).count();
                let hit: Vec<Vec<bool>> = pred
                    .iter()
                    .map(|a| truth.iter().map(|b| exceeds_four_fifths(&bucket_counts(a), &bucket_counts(b))).collect())
                    .collect();
                let best = optimal_matches(&hit);
                ensure!(greedy == best, "greedy {greedy} vs optimal {best} for {pred:?} vs {truth:?}");
                checked += 1;
            }
        }
    }

    // published FNV-1a 64 test vectors
    ensure!(fnv1a64("a") == 0xaf63dc4c8601ec8c, "fnv1a64(a)");
    ensure!(fnv1a64("foobar") == 0x85944171f73967e8, "fnv1a64(foobar)");
    let sentence = "X-axis motion commanded but REF X is not referenced";
    let a = embed_lexical(sentence, LEXICAL_DIMENSION);
    let again: Vec<Vec<f64>> = par::map(Exec::Parallel, 4, &[sentence; 8], |t| embed_lexical(t, LEXICAL_DIMENSION));
    ensure!(again.iter().all(|v| v == &a), "lexical embedding not reproducible");
    Ok(format!("conventions hold; greedy == optimal on {checked} list pairs up to 4x4; hash matches FNV-1a vectors"))
}

fn text_parts(m: &ChatMessage) -> impl Iterator<Item = &str> {
    m.parts.iter().filter_map(|p| match p {
        Part::Text(t) => Some(t.as_str()),
        Part::Image(_) => None,
    })
}

fn criterion_7() -> Outcome {
    let (dir, manifest) = workspace()?;
    let m = load_manifest(&manifest).map_err(|e| e.to_string())?;
    let examples = load_fewshot_pack(&dir.path().join("fewshot")).map_err(|e| e.to_string())?;
    ensure!(examples.len() == 7, "pack has {} examples", examples.len());
    let mut leaks = Vec::new();
    let mut builds = 0;
    for preset in Preset::ALL {
        let config = preset.apply(&RunConfig::default());
        for d in &m.instances {
            let gcode = fs::read_to_string(m.resolve(&d.gcode)).unwrap();
            let truth_text = fs::read_to_string(m.resolve(&d.truth)).unwrap();
            let truth_text = truth_text.trim();
            let image = gverify::vision::load_image(&m.resolve(&d.image)).map_err(|e| e.to_string())?;
            let msgs = build_messages(&config, &gcode, &image, &examples, SCHEMA_TEXT).map_err(|e| e.to_string())?;
            builds += 1;
            let want_len = if config.shots == Shots::Few { 16 } else { 2 };
            ensure!(msgs.len() == want_len, "{preset}/{}: {} messages", d.id, msgs.len());
            let last = msgs.last().unwrap();
            ensure!(last.role == Role::User, "{preset}/{}: last message is not the user", d.id);
            let want_images = if config.view_mode == ViewMode::FullPlusCluster { 2 } else { 1 };
            ensure!(
                last.images().count() == want_images,
                "{preset}/{}: {} images in final message",
                d.id,
                last.images().count()
            );
            if msgs.iter().any(|msg| text_parts(msg).any(|t| t.contains(truth_text))) {
                let same = examples
                    .iter()
                    .find(|e| serialize_report(&e.expected_report) == truth_text)
                    .map(|e| format!(" (identical to worked example '{}')", e.label))
                    .unwrap_or_default();
                leaks.push(format!("{preset}/{}{same}", d.id));
            }
        }
    }
    let clean = builds - leaks.len();
    ensure!(leaks.is_empty(), "truth text found in {}/{builds} builds: {}", leaks.len(), leaks.join(", "));
    Ok(format!("message counts and image parts correct; {clean}/{builds} builds free of truth text"))
}

struct Stub {
    port: u16,
    requests: Arc<Mutex<Vec<(String, String, Value)>>>,
    connections: Arc<Mutex<usize>>,
}

/// Minimal HTTP/1.1 server. With `reply` unset it accepts and immediately
/// closes every connection.
fn stub_server(reply: Option<String>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let requests = Arc::new(Mutex::new(Vec::new()));
    let connections = Arc::new(Mutex::new(0usize));
    let (req, conns) = (requests.clone(), connections.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            *conns.lock().unwrap() += 1;
            let Some(body_text) = &reply else {
                drop(stream);
                continue;
            };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut auth = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = value.trim().to_string(),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let json: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            req.lock().unwrap().push((request_line.trim().to_string(), auth, json));
            let resp = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body_text}",
                body_text.len()
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    Stub {
        port,
        requests,
        connections,
    }
}

fn criterion_8() -> Outcome {
    std::env::set_var("NO_PROXY", "127.0.0.1,localhost");
    std::env::set_var("no_proxy", "127.0.0.1,localhost");
    std::env::set_var("GVERIFY_API_KEY", "test-key");

    let canned_report = VerificationReport {
        slots: Slots {
            collet_clamped: true,
            refx: true,
            refz: true,
            hmi_issues: vec![],
        },
        gcode_validity: GcodeValidity {
            valid: true,
            errors: vec![],
        },
        compliance: Compliance {
            consistent: true,
            errors: vec![],
        },
        corrections: vec![],
    };
    let canned = json!({
        "choices": [{ "index": 0, "message": { "role": "assistant", "content": serialize_report(&canned_report) } }]
    })
    .to_string();
    let stub = stub_server(Some(canned));

    let (dir, manifest) = workspace()?;
    let m = load_manifest(&manifest).map_err(|e| e.to_string())?;
    let preds = dir.path().join("preds");
    let base = RunConfig {
        backend: BackendKind::Remote,
        endpoint: format!("http://127.0.0.1:{}/v1", stub.port),
        model_name: "stub-model".into(),
        max_parallel: 4,
        ..RunConfig::default()
    };
    let report = runner::run_batch(&BatchOptions {
        manifest: manifest.clone(),
        out_dir: preds.clone(),
        presets: vec![Preset::ZsCluster],
        base: base.clone(),
        examples_dir: None,
        recording: Recording::default(),
        exec: Exec::Parallel,
    })
    .map_err(run_err)?;
    ensure!(report.completed() == 16, "{} of 16 completed", report.completed());

    let requests = stub.requests.lock().unwrap().clone();
    ensure!(requests.len() == 16, "{} requests for 16 instances", requests.len());
    let mut seen_programs = BTreeSet::new();
    for (line, auth, body) in &requests {
        ensure!(line.starts_with("POST /v1/chat/completions "), "request line {line}");
        ensure!(auth == "Bearer test-key", "authorization {auth:?}");
        ensure!(body["model"] == "stub-model", "model {}", body["model"]);
        ensure!(body["temperature"].as_f64() == Some(0.0), "temperature {}", body["temperature"]);
        let parts = body["messages"][1]["content"].as_array().ok_or("user content is not a list")?;
        let urls: Vec<&str> = parts
            .iter()
            .filter(|p| p["type"] == "image_url")
            .filter_map(|p| p["image_url"]["url"].as_str())
            .collect();
        ensure!(urls.len() == 2, "{} image parts", urls.len());
        for url in urls {
            let b64 = url.strip_prefix("data:image/png;base64,").ok_or("not a PNG data URL")?;
            let bytes = base64::engine::general_purpose::STANDARD.decode(b64).map_err(|e| e.to_string())?;
            image::load_from_memory(&bytes).map_err(|e| e.to_string())?;
        }
        let program = parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .find(|t| t.starts_with("G-code:"))
            .ok_or("no program part")?;
        seen_programs.insert(program.to_string());
    }
    ensure!(seen_programs.len() == 16, "{} distinct programs sent", seen_programs.len());

    let summary = runner::run_eval(&EvalOptions {
        pred_dir: preds.clone(),
        manifest: manifest.clone(),
        presets: Some(vec![Preset::ZsCluster]),
        embeddings: EmbeddingKind::Lexical,
        threshold: 0.8,
        out_dir: Some(dir.path().join("eval")),
        base: RunConfig::default(),
        exec: Exec::Sequential,
    })
    .map_err(run_err)?;
    let run = &summary.runs[0];
    ensure!(run.structural.schema_validity.correct == 16, "schema validity {:?}", run.structural.schema_validity);
    // the canned answer says "lit" for every indicator, so it is right exactly
    // where the truth has the indicator lit
    let lit = m
        .instances
        .iter()
        .filter(|d| m.load_instance(d).map(|i| i.truth.slots.collet_clamped).unwrap_or(false))
        .count();
    ensure!(
        run.structural.acc_collet.correct == lit,
        "collet scored {} correct, truth has {lit} lit",
        run.structural.acc_collet.correct
    );

    // transport failures: 1 attempt + 3 retries, with doubling delays
    let failing = stub_server(None);
    let config = RunConfig {
        endpoint: format!("http://127.0.0.1:{}/v1", failing.port),
        retries: 3,
        backoff_ms: 25,
        ..base
    };
    let client = RemoteBackend::new(&config, Some("test-key".into())).map_err(|e| e.to_string())?;
    let msgs = vec![
        ChatMessage::text(Role::System, "s"),
        ChatMessage::text(Role::User, "u"),
    ];
    let t0 = Instant::now();
    let err = call_model(&client, &msgs).err().ok_or("call against a closing server succeeded")?;
    let elapsed = t0.elapsed();
    let attempts = *failing.connections.lock().unwrap();
    ensure!(matches!(err, BackendError::Transport { attempts: 4, .. }), "error {err}");
    ensure!(attempts == 4, "{attempts} connections, expected 4");
    ensure!(elapsed >= Duration::from_millis(25 + 50 + 100), "backoff too short: {elapsed:?}");
    Ok(format!(
        "16 requests, 16 scored predictions; transport failure retried 3 times over {:.0} ms",
        elapsed.as_secs_f64() * 1000.0
    ))
}

fn criterion_9() -> Outcome {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mock_pack");
    let (dir, manifest) = workspace()?;
    let mock = RunConfig {
        backend: BackendKind::Mock,
        ..RunConfig::default()
    };
    let rec = Recording {
        mock_dir: Some(fixture.join("recordings")),
        record_dir: None,
    };
    let files = [SUMMARY_FILE, STRUCTURAL_TABLE, SIMILARITY_TABLE, MATCH_RATE_TABLE];
    for round in 0..2 {
        let preds = dir.path().join(format!("preds{round}"));
        let done = batch(&manifest, &preds, mock.clone(), rec.clone(), Exec::Parallel)?;
        ensure!(done == 64, "round {round}: {done}/64 replayed");
        let out = dir.path().join(format!("eval{round}"));
        eval(&preds, &manifest, &out)?;
        for f in files {
            let golden = fs::read(fixture.join("golden").join(f)).map_err(|e| format!("{f}: {e}"))?;
            let got = fs::read(out.join(f)).map_err(|e| e.to_string())?;
            ensure!(
                got == golden,
                "round {round}: {f} differs from golden (regenerate with `cargo run --example regen_mock_pack` if intended)"
            );
        }
    }
    Ok("2 replays of 64 recordings match the golden summary and tables byte for byte".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "scenario fidelity", criterion_1),
        (2, "vision round-trip", criterion_2),
        (3, "compliance truth table", criterion_3),
        (4, "schema round-trip and strictness", criterion_4),
        (5, "metric arithmetic fixtures", criterion_5),
        (6, "semantic matcher", criterion_6),
        (7, "prompt construction", criterion_7),
        (8, "remote-client wire test", criterion_8),
        (9, "mock end-to-end determinism", criterion_9),
    ];
    let mut failed = 0;
    let mut offline = Duration::ZERO;
    for (n, name, f) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = t.elapsed();
        if n != 8 {
            offline += took;
        }
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => {
                failed += 1;
                ("FAIL", d.as_str())
            }
        };
        println!("criterion {n:>2} {tag} {name}: {detail} [{:.2} s]", took.as_secs_f64());
    }
    let secs = offline.as_secs_f64();
    let tag = if secs < 60.0 { "PASS" } else { "FAIL" };
    if secs >= 60.0 {
        failed += 1;
    }
    println!("criterion 10 {tag} offline suite time: criteria 1-7 and 9 took {secs:.2} s");
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
