//! Acceptance gate. Each criterion runs against its runtime budget and prints
//! one PASS/FAIL line; the process exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::Value;

use mhb_core::client::MockModelSpec;
use mhb_core::dpo::check::{run_checks, CheckConfig};
use mhb_core::labels::{emit_prediction, emit_script, parse_prediction, parse_script, ScriptLine};
use mhb_core::metrics::{grid_edit_distance, levenshtein, score_accuracy};
use mhb_core::miner::{PairStatus, PreferencePair};
use mhb_core::pipeline::{
    export_dpo, generate_corpus, mine, mock_backend, GenerateConfig, MineConfig, PromptBuilder, PromptConfig,
    RunConfig,
};
use mhb_core::prompt::{build_prompt, pack_icl, IclExample};
use mhb_core::review::{Decision, DecisionRequest, ReviewQueue};
use mhb_core::room::RoomType;
use mhb_core::scenario::{default_plan, DatasetConfig, PlanCell, ScenarioConfig, SymbolicFrames};
use mhb_core::scene_graph::{
    default_vocabulary, parse_scene_graph, serialize_scene_graph, validate_document, SceneGraphErrorKind,
};
use mhb_core::store::{Corpus, SampleFilter, Split, PAIRS_FILE};
use mhb_core::testing::{random_grid, random_grid_pair, random_scene_graph, rng, NOUNS, VERBS};

type Criterion = fn() -> Result<String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn main() {
    let criteria: [(&str, Duration, Criterion); 8] = [
        ("scene-graph codec", Duration::from_secs(5), scene_graph_codec),
        ("parser suite", Duration::from_secs(10), parser_suite),
        ("metrics oracle equivalence", Duration::from_secs(60), metrics_oracle),
        ("ICL budget arithmetic", Duration::from_secs(5), icl_budget),
        ("DPO numerics", Duration::from_secs(30), dpo_numerics),
        ("preference-mining audit", Duration::from_secs(60), mining_audit),
        ("end-to-end oracle closure", Duration::from_secs(300), end_to_end),
        ("review state machine", Duration::from_secs(60), review_fuzz),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(anyhow::anyhow!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(anyhow::anyhow!("{detail}; over the {budget:?} budget")),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(detail) => ("PASS", detail.clone()),
            Err(e) => ("FAIL", format!("{e:#}")),
        };
        failed += usize::from(outcome.is_err());
        println!("{tag} {} {name} [{:.2}s / {}s] {detail}", i + 1, elapsed.as_secs_f64(), budget.as_secs());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn scene_graph_codec() -> Result<String> {
    let listing = std::fs::read_to_string(fixtures().join("living_room.json"))?;
    let vocab = default_vocabulary();
    ensure!(validate_document(&listing, vocab)?.is_empty(), "listing has violations");
    let g = parse_scene_graph(&listing)?;
    let canonical = serialize_scene_graph(&g);
    ensure!(parse_scene_graph(&canonical)? == g, "canonical form changes the graph");
    ensure!(serialize_scene_graph(&parse_scene_graph(&canonical)?) == canonical, "canonical form is not a fixed point");

    let mut r = rng(1);
    for i in 0..1000 {
        let g = random_scene_graph(&mut r, 12);
        let text = serialize_scene_graph(&g);
        let back = parse_scene_graph(&text).with_context(|| format!("random graph {i}"))?;
        ensure!(back == g && serialize_scene_graph(&back) == text, "random graph {i} does not round-trip");
    }

    use SceneGraphErrorKind::*;
    let corruptions = [
        ("truncated document", listing[..listing.len() / 2].to_string(), MalformedJson),
        ("string id", listing.replace(r#""id": 103"#, r#""id": "103""#), SchemaViolation),
        ("unknown relation", listing.replacen(r#""relation": "ON""#, r#""relation": "BESIDE""#, 1), SchemaViolation),
        ("missing destination", listing.replace(r#"["sofa", 104]"#, r#"["sofa", 999]"#), DanglingEdge),
        ("reused id", listing.replace(r#""id": 103"#, r#""id": 101"#), DuplicateId),
        ("on and off", listing.replace(r#""state": ["OFF"]"#, r#""state": ["OFF", "ON"]"#), ConflictingStates),
        ("state without switch", listing.replace(r#"["HAS_SWITCH"]"#, r#"["GRABBABLE"]"#), UngatedState),
    ];
    for (what, text, kind) in &corruptions {
        ensure!(text != &listing, "{what}: corruption did not apply");
        let kinds: Vec<SceneGraphErrorKind> = match validate_document(text, vocab) {
            Ok(errs) => errs.iter().map(|e| e.kind()).collect(),
            Err(e) => vec![e.kind()],
        };
        ensure!(kinds == [*kind], "{what}: expected [{kind:?}], got {kinds:?}");
        let first = parse_scene_graph(text).err().map(|e| e.kind());
        ensure!(first == Some(*kind), "{what}: parse reported {first:?}");
    }
    let on: BTreeSet<String> = ["ON".to_string()].into();
    let unknown = g.apply_state_change(7, &on, None, vocab).map(|_| ()).map_err(|e| e.kind());
    ensure!(unknown == Err(UnknownObject), "unknown object: {unknown:?}");
    let ungated = g.apply_state_change(102, &on, None, vocab).map(|_| ()).map_err(|e| e.kind());
    ensure!(ungated == Err(InvalidStateTransition), "switching on a stand: {ungated:?}");
    Ok(format!("listing canonical, 1000 random graphs, {} corruption classes", corruptions.len() + 2))
}

fn golden(dir: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(fixtures().join(dir))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            let input = std::fs::read_to_string(&path)?;
            let expected = std::fs::read_to_string(path.with_extension("expected"))
                .with_context(|| format!("{dir}/{name} has no expectation"))?;
            out.push((name, input, expected));
        }
    }
    out.sort();
    Ok(out)
}

const HORIZON: usize = 3;

fn parser_suite() -> Result<String> {
    let predictions = golden("predictions")?;
    ensure!(predictions.len() >= 10, "only {} prediction fixtures", predictions.len());
    let mut grids = BTreeMap::new();
    for (name, input, expected) in &predictions {
        let parsed = parse_prediction(input, HORIZON).with_context(|| name.clone())?;
        let mut flags: Vec<&str> = parsed.flags.iter().map(|f| f.name()).collect();
        flags.sort();
        let actual = format!("{}\nflags=[{}]\n", emit_prediction(&parsed.grid), flags.join(","));
        ensure!(&actual == expected, "prediction fixture {name}: got {actual:?}");
        grids.insert(name.as_str(), parsed);
    }
    let plain = &grids["plain"].grid;
    let lenient = ["fenced_python", "fenced_json", "single_quotes", "smart_quotes", "backticks", "bare_tuples", "missing_outer", "crlf_tabs"];
    for name in lenient {
        let p = grids.get(name).with_context(|| format!("fixture {name} is missing"))?;
        ensure!(&p.grid == plain && p.flags.is_empty(), "{name} is not recovered cleanly");
    }

    let scripts = golden("scripts")?;
    for (name, input, expected) in &scripts {
        let lines = parse_script(input).with_context(|| name.clone())?;
        ensure!(&emit_script(&lines) == expected, "script fixture {name}");
    }

    let mut r = rng(2);
    for i in 0..10_000 {
        let horizon = r.random_range(1..=8);
        let grid = random_grid(&mut r, 4, horizon);
        let parsed = parse_prediction(&emit_prediction(&grid), grid.horizon())?;
        ensure!(parsed.grid == grid && parsed.flags.is_empty(), "grid round trip {i}");

        let lines: Vec<ScriptLine> = (0..r.random_range(0..6))
            .map(|_| {
                ScriptLine::new(
                    r.random_range(0..4),
                    *VERBS.choose(&mut r).unwrap(),
                    format!("{}_{}", NOUNS.choose(&mut r).unwrap(), r.random_range(0..3)),
                    r.random_range(1..10_000),
                )
            })
            .collect();
        ensure!(parse_script(&emit_script(&lines))? == lines, "script round trip {i}");
    }
    Ok(format!(
        "{} prediction and {} script goldens, {} lenient fixtures, 10000 round trips each",
        predictions.len(),
        scripts.len(),
        lenient.len()
    ))
}

/// Plain recursive definition; exponential, so only used on short strings.
fn recursive_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => (recursive_distance(ra, rb) + usize::from(x != y))
            .min(recursive_distance(ra, b) + 1)
            .min(recursive_distance(a, rb) + 1),
    }
}

/// Same recursion, memoized along a depth-first walk of every `b` up to
/// `max_len`: each extension of `b` derives its row from its prefix's row.
fn walk(a: &[u8], b: &mut Vec<u8>, row: &[usize], max_len: usize, visit: &mut dyn FnMut(&[u8], usize)) {
    visit(b, row[a.len()]);
    if b.len() == max_len {
        return;
    }
    for c in ALPHABET {
        let mut next = vec![b.len() + 1; a.len() + 1];
        for i in 1..=a.len() {
            next[i] = (row[i - 1] + usize::from(a[i - 1] != c)).min(row[i] + 1).min(next[i - 1] + 1);
        }
        b.push(c);
        walk(a, b, &next, max_len, visit);
        b.pop();
    }
}

const ALPHABET: [u8; 3] = *b"abc";

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| ALPHABET.map(|c| [s.as_slice(), &[c]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn oracle_pairs(max_len: usize, mut visit: impl FnMut(&[u8], &[u8], usize)) {
    for a in all_strings(max_len) {
        let first: Vec<usize> = (0..=a.len()).collect();
        walk(&a, &mut Vec::new(), &first, max_len, &mut |b, d| visit(&a, b, d));
    }
}

fn metrics_oracle() -> Result<String> {
    let mut checked = 0u64;
    let mut bad = None;
    oracle_pairs(4, |a, b, d| {
        if bad.is_none() && d != recursive_distance(a, b) {
            bad = Some((a.to_vec(), b.to_vec()));
        }
    });
    ensure!(bad.is_none(), "memoized oracle disagrees with the recursion on {bad:?}");

    oracle_pairs(8, |a, b, d| {
        checked += 1;
        if bad.is_none() {
            let (x, y) = (std::str::from_utf8(a).unwrap(), std::str::from_utf8(b).unwrap());
            if levenshtein(x, y) != d {
                bad = Some((a.to_vec(), b.to_vec()));
            }
        }
    });
    ensure!(bad.is_none(), "levenshtein disagrees with the oracle on {bad:?}");
    ensure!(levenshtein("kitten", "sitting") == 3, "kitten/sitting");

    let mut r = rng(3);
    for i in 0..10_000 {
        let horizon = r.random_range(1..=8);
        let (gt, pred) = random_grid_pair(&mut r, 4, horizon);
        let acc = score_accuracy(&pred, &gt)?;
        ensure!(acc.full <= acc.verb.min(acc.noun), "grid pair {i}: {acc:?}");
    }
    Ok(format!("{checked} string pairs exact, kitten/sitting = 3, 10000 grid pairs"))
}

fn generate(dir: &Path, plan: Vec<PlanCell>, seed: u64) -> Result<Corpus> {
    let cfg = GenerateConfig {
        plan,
        base_seed: seed,
        scenario: ScenarioConfig::new(RoomType::Kitchen, 1, 0),
        dataset: DatasetConfig::default(),
    };
    Ok(generate_corpus(dir, &cfg, &SymbolicFrames)?.corpus)
}

fn icl_budget() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let corpus = generate(dir.path(), default_plan(), 0)?;
    ensure!((corpus.h(), corpus.t()) == (6, 6), "window is not 6/6");
    let train = corpus.query(&SampleFilter::split(Split::Train));
    let candidates: Vec<IclExample> = train
        .iter()
        .map(|s| {
            Ok(IclExample {
                sample_id: s.sample_id.clone(),
                room_type: s.meta.room_type,
                num_humans: s.meta.num_humans,
                frame_refs: s.frame_refs.clone(),
                scene_graph_text: corpus.scene_graph_text(s)?,
                gt_grid: s.gt_grid.clone(),
            })
        })
        .collect::<Result<_>>()?;
    ensure!(candidates.len() > 7, "only {} candidates", candidates.len());
    let query = corpus.query(&SampleFilter::split(Split::Test))[0];
    let packed = pack_icl(&candidates, (query.meta.room_type, query.meta.num_humans), 6, 50);
    ensure!(packed.len() == 7, "packed {} examples", packed.len());

    let builder = PromptBuilder::new(&corpus, PromptConfig { icl_count: 20, max_images: 50 })?;
    let (spec, prompt) = builder.prompt(query)?;
    ensure!(spec.icl_examples.len() == 7, "builder packed {}", spec.icl_examples.len());
    ensure!(prompt.image_count() == 48, "prompt has {} images", prompt.image_count());
    let mut eight = spec.clone();
    eight.icl_examples.push(candidates[0].clone());
    ensure!(build_prompt(&eight).is_err(), "an eighth example fits the budget");
    Ok("7 examples, (7 + 1) x 6 = 48 images; 8 examples rejected".into())
}

fn dpo_numerics() -> Result<String> {
    let report = run_checks(&CheckConfig::default());
    ensure!(report.all_passed(), "\n{}", report.render());
    let get = |n: &str| report.get(n).map(|r| r.value).unwrap_or(f64::NAN);
    Ok(format!(
        "ln 2 err {:.1e}, ln 1.25 err {:.1e}, worst fd rel. err {:.1e}, first step {:+.3e}",
        get("loss_at_reference_is_ln2"),
        get("closed_form_ln_1_25"),
        get("dpo_gradient_fd").max(get("sft_gradient_fd")).max(get("dpo_policy_gradient_fd")),
        get("first_step_descends"),
    ))
}

fn mined(dir: &Path, j: u32) -> Result<(Corpus, ReviewQueue, mhb_core::pipeline::MineReport)> {
    let mut corpus = generate(dir, default_plan(), 5)?;
    let mut queue = ReviewQueue::open_writer(&dir.join(PAIRS_FILE), corpus.t())?;
    let backend = mock_backend(&corpus, MockModelSpec::noisy_oracle(0.03, 0.02, 17))?;
    let cfg = MineConfig {
        run: RunConfig::new("noisy"),
        j,
        base_seed: 100,
        auto_approve: false,
    };
    let report = mine(&mut corpus, &mut queue, &backend, &cfg)?;
    Ok((corpus, queue, report))
}

fn mining_audit() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let (corpus, queue, report) = mined(dir.path(), 8)?;
    let train = corpus.query(&SampleFilter::split(Split::Train));
    let (mut pairs, mut degenerate) = (0, 0);
    for s in &train {
        // independent rescan: first run index wins ties, as for any stable argmin
        let mut scored = Vec::new();
        for k in 0..8 {
            let rec = corpus.prediction(&s.sample_id, "noisy", k).with_context(|| format!("{} run {k}", s.sample_id))?;
            if let Some(p) = &rec.parsed {
                scored.push((k, grid_edit_distance(&p.grid, &s.gt_grid), emit_prediction(&p.grid)));
            }
        }
        ensure!(scored.len() >= 2, "{}: shortfall", s.sample_id);
        let lo = scored.iter().fold(&scored[0], |a, b| if b.1 < a.1 { b } else { a });
        let hi = scored.iter().fold(&scored[0], |a, b| if b.1 > a.1 { b } else { a });
        let pair = queue.get(&PreferencePair::id_for(&s.sample_id, "noisy"));
        if lo.1 == hi.1 {
            degenerate += 1;
            ensure!(pair.is_none(), "{}: degenerate sample was paired", s.sample_id);
            ensure!(report.degenerate.contains(&s.sample_id), "{}: not reported degenerate", s.sample_id);
            continue;
        }
        let Some(p) = pair else { bail!("{}: no pair emitted", s.sample_id) };
        pairs += 1;
        ensure!(
            (p.chosen_run, p.rejected_run) == (lo.0, hi.0)
                && (p.chosen_ed, p.rejected_ed) == (lo.1, hi.1)
                && (&p.chosen_text, &p.rejected_text) == (&lo.2, &hi.2),
            "{}: pair {:?} differs from rescan ({}, {})",
            s.sample_id,
            (p.chosen_run, p.rejected_run),
            lo.0,
            hi.0
        );
    }
    ensure!(pairs == queue.len() && pairs == report.emitted, "{pairs} rescanned pairs, {} queued", queue.len());
    ensure!(pairs > 0 && degenerate > 0, "audit is vacuous: {pairs} pairs, {degenerate} degenerate");
    Ok(format!("{} train samples: {pairs} pairs match the rescan, {degenerate} degenerate skipped", train.len()))
}

fn mhb(dir: &Path, args: &[&str]) -> Result<String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mhb"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("MHB_")) {
        cmd.env_remove(k);
    }
    let out = cmd.current_dir(dir).args(args).output()?;
    ensure!(out.status.success(), "mhb {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    Ok(String::from_utf8(out.stdout)?)
}

fn scored(dir: &Path, model: &str) -> Result<Value> {
    mhb(dir, &["score", "--model", model])?;
    let text = std::fs::read_to_string(dir.join(format!("corpus/reports/{model}.test.r0.json")))?;
    Ok(serde_json::from_str::<Value>(&text)?["outcome"]["report"].clone())
}

fn end_to_end() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    let summary = mhb(d, &["generate", "--seed", "0"])?;
    ensure!(summary.contains("30 scenarios"), "unexpected plan: {summary}");
    mhb(d, &["predict"])?;
    let report = scored(d, "oracle")?;
    let cells = report["cells"].as_array().context("no cells")?;
    ensure!(cells.len() >= 6, "only {} cells", cells.len());
    for c in cells {
        let m = &c["means"];
        let got: Vec<f64> = ["full", "verb", "noun", "cs", "ed"].iter().map(|k| m[k].as_f64().unwrap_or(f64::NAN)).collect();
        ensure!(got == [1.0, 1.0, 1.0, 1.0, 0.0], "cell {} {}: {got:?}", c["room"], c["num_humans"]);
    }

    let mut nouns = Vec::new();
    let mut verb_at_half = 0.0;
    for level in ["0.2", "0.5", "0.8"] {
        let model = format!("scramble{level}");
        mhb(d, &["predict", "--model", &model, "--mock", "scrambler", "--noun-corruption", level, "--mock-seed", "4"])?;
        let overall = scored(d, &model)?["overall"].clone();
        let (verb, noun) = (overall["verb"].as_f64().unwrap_or(f64::NAN), overall["noun"].as_f64().unwrap_or(f64::NAN));
        if level == "0.5" {
            verb_at_half = verb;
            ensure!(0.0 < noun && noun < verb, "noun {noun} not strictly between 0 and verb {verb}");
        }
        nouns.push(noun);
    }
    ensure!(nouns.windows(2).all(|w| w[0] > w[1]), "noun accuracy not monotone: {nouns:?}");
    Ok(format!(
        "{} oracle cells exact; noun acc {:.3} > {:.3} > {:.3}, verb acc {:.3} at 0.5",
        cells.len(),
        nouns[0],
        nouns[1],
        nouns[2],
        verb_at_half
    ))
}

fn review_fuzz() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let (corpus, mut queue, _) = mined(dir.path(), 4)?;
    let ids: Vec<String> = queue.pairs().iter().map(|p| p.pair_id.clone()).collect();
    ensure!(ids.len() >= 20, "only {} pairs to fuzz", ids.len());
    let log = queue.path().to_path_buf();
    let size = || std::fs::metadata(&log).map(|m| m.len()).unwrap_or(0);

    let mut r = rng(8);
    let mut first_terminal: BTreeMap<String, PairStatus> = BTreeMap::new();
    let mut keys: Vec<(String, String, DecisionRequest)> = Vec::new();
    let (mut replays, mut writes) = (0, 0);
    for op in 0..10_000 {
        let (id, req) = if !keys.is_empty() && r.random_bool(0.2) {
            let (_, id, req) = keys.choose(&mut r).unwrap().clone();
            (id, req)
        } else {
            let id = if r.random_bool(0.05) { format!("ghost{op}") } else { ids.choose(&mut r).unwrap().clone() };
            let decision = *[Decision::Approve, Decision::Swap, Decision::Edit, Decision::Reject].choose(&mut r).unwrap();
            let edit = ["[[(0, walk, door)]]", "[[(0, walk, door), (0, open, door)]]", "not a grid"];
            let req = DecisionRequest {
                decision,
                edited_text: Some(edit.choose(&mut r).unwrap().to_string()),
                idempotency_key: r.random_bool(0.6).then(|| format!("k{}", r.random_range(0..400))),
                reviewer: Some(["ana", "bo", "cy"].choose(&mut r).unwrap().to_string()),
            };
            (id, req)
        };
        let was_pending = queue.get(&id).is_some_and(|p| p.status == PairStatus::Pending);
        let key_seen = req.idempotency_key.as_ref().and_then(|k| keys.iter().find(|e| &e.0 == k)).cloned();
        let before = size();
        let result = queue.decide(&id, &req);
        let grew = size() != before;
        match (&key_seen, &result) {
            (Some(prior), Ok(_)) => {
                ensure!(prior.1 == id && !grew, "op {op}: replay of key {} wrote", prior.0);
                replays += 1;
            }
            (Some(prior), Err(_)) => ensure!(prior.1 != id && !grew, "op {op}: keyed replay failed or wrote"),
            (None, Ok(_)) => {
                ensure!(was_pending && grew, "op {op}: decision on a non-pending pair accepted, or not logged");
                writes += 1;
                if let Some(k) = &req.idempotency_key {
                    keys.push((k.clone(), id.clone(), req.clone()));
                }
            }
            (None, Err(_)) => ensure!(!grew, "op {op}: rejected decision wrote to the log"),
        }
        if let Ok(p) = &result {
            let first = first_terminal.entry(p.pair_id.clone()).or_insert(p.status);
            ensure!(*first == p.status, "op {op}: {} left terminal status {first}", p.pair_id);
        }
    }
    for p in queue.pairs() {
        if let Some(s) = first_terminal.get(&p.pair_id) {
            ensure!(*s == p.status, "{} changed status after its decision", p.pair_id);
        }
    }
    let replayed = ReviewQueue::load(&log, corpus.t())?;
    if let Some((a, b)) = replayed.pairs().iter().zip(queue.pairs()).find(|(a, b)| a != b) {
        bail!("log replay differs from memory: {a:?} vs {b:?}");
    }
    ensure!(replayed.len() == queue.len(), "log replay lost pairs");

    let stats = queue.stats();
    ensure!(stats.by_status.values().sum::<usize>() == stats.total, "status counts do not sum to the total");
    let includes = [PairStatus::default_export(), PairStatus::ALL.iter().copied().collect(), [PairStatus::Rejected].into()];
    for include in includes {
        let expected: usize = include.iter().map(|s| stats.count(*s)).sum();
        let exported = match export_dpo(&corpus, &queue, &include, PromptConfig::default()) {
            Ok(records) => records.len(),
            Err(mhb_core::pipeline::PipelineError::Miner(mhb_core::miner::MinerError::NothingToExport)) => 0,
            Err(e) => return Err(e.into()),
        };
        ensure!(exported == expected, "include {include:?}: exported {exported}, stats say {expected}");
    }
    Ok(format!(
        "10000 ops on {} pairs: {writes} logged decisions, {replays} idempotent replays, export reconciles",
        ids.len()
    ))
}
