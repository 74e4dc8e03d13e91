use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_PLAN: [&str; 6] = [
    "--cell",
    "kitchen:1:3",
    "--cell",
    "bedroom:2:3",
    "--cell",
    "living_room:3:3",
];

fn mhb(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mhb"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("MHB_")) {
        cmd.env_remove(k);
    }
    cmd.current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mhb(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn generated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["generate", "--seed", "3"];
    args.extend(SMALL_PLAN);
    ok(dir.path(), &args);
    dir
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for sub in ["generate", "ingest", "predict", "score", "mine", "export", "review-serve", "dpo-check", "report"] {
        assert!(help.contains(sub), "{sub}");
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "run = [").unwrap();
    for args in [
        &["frobnicate"][..],
        &["score", "--no-such-flag"],
        &["dpo-check", "--set", "dpo.nope=1"],
        &["dpo-check", "--set", "dpo.beta=-1"],
        &["generate", "--cell", "attic:1:1"],
        &["--config", "bad.toml", "dpo-check"],
    ] {
        let out = mhb(dir.path(), args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn seeded_pipeline_is_byte_identical() {
    let run = || {
        let dir = generated();
        let d = dir.path();
        ok(d, &["predict", "--model", "s", "--mock", "scrambler", "--noun-corruption", "0.5", "--mock-seed", "9"]);
        ok(d, &["score", "--model", "s"]);
        ok(d, &["mine", "--model", "n", "--mock", "noisy-oracle", "--verb-corruption", "0.3", "--j", "4"]);
        ok(d, &["export", "dpo", "--auto-approve"]);
        ok(d, &["export", "sft", "--icl-count", "2"]);
        dir
    };
    let (a, b) = (run(), run());
    let root = |d: &tempfile::TempDir| d.path().join("corpus");
    let listing = files(&root(&a));
    assert_eq!(listing, files(&root(&b)));
    assert!(listing.iter().any(|p| p.ends_with("s.test.r0.csv")));
    for rel in &listing {
        let (x, y) = (
            std::fs::read_to_string(root(&a).join(rel)).unwrap(),
            std::fs::read_to_string(root(&b).join(rel)).unwrap(),
        );
        if rel.ends_with("pairs.jsonl") {
            // decision times are wall-clock; the mined pairs are not
            let mined = |s: &str| s.lines().filter(|l| l.contains("\"event\":\"mined\"")).collect::<Vec<_>>().join("\n");
            assert_eq!(mined(&x), mined(&y));
        } else {
            assert!(x == y, "{} differs", rel.display());
        }
    }
}

#[test]
fn oracle_closure_and_resume() {
    let dir = generated();
    let d = dir.path();
    let first = ok(d, &["predict"]);
    let again = ok(d, &["predict"]);
    assert!(first.contains("0 skipped") && first.contains("0 failed"), "{first}");
    assert!(again.contains("0 succeeded"), "{again}");
    let lines = std::fs::read_to_string(d.join("corpus/predictions.jsonl")).unwrap().lines().count();
    let score = json(d.join("corpus/runs/predict.oracle.test.r0.json"));
    assert_eq!(lines as u64, score["summary"]["requested"].as_u64().unwrap());

    ok(d, &["score"]);
    let file = json(d.join("corpus/reports/oracle.test.r0.json"));
    let cells = file["outcome"]["report"]["cells"].as_array().unwrap();
    let total: u64 = cells.iter().map(|c| c["samples"].as_u64().unwrap()).sum();
    assert_eq!(total as usize, lines);
    for c in cells {
        let m = &c["means"];
        assert_eq!((m["full"].as_f64(), m["cs"].as_f64(), m["ed"].as_f64()), (Some(1.0), Some(1.0), Some(0.0)));
    }
    let text = std::fs::read_to_string(d.join("corpus/reports/oracle.test.r0.txt")).unwrap();
    assert!(text.contains("# embedder: char-trigram-count"));
    assert!(text.contains(&format!("# config: {}", file["config_hash"].as_str().unwrap())));
}

#[test]
fn unreachable_backend_exits_3() {
    let dir = generated();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}/v1/chat/completions");
    let out = mhb(
        dir.path(),
        &[
            "predict",
            "--backend",
            "remote",
            "--model",
            "far",
            "--endpoint",
            &endpoint,
            "--set",
            "backend.remote.max_retries=0",
            "--set",
            "backend.remote.placeholder_frames=true",
        ],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let failures = std::fs::read_to_string(dir.path().join("corpus/failures.jsonl")).unwrap();
    assert!(failures.lines().count() > 0);
    let out = mhb(dir.path(), &["score", "--model", "far"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn export_gate_and_mining_accounting() {
    let dir = generated();
    let d = dir.path();
    let out = mhb(d, &["export", "dpo"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--auto-approve"));

    let stdout = ok(d, &["mine", "--model", "n", "--mock", "noisy-oracle", "--verb-corruption", "0.03", "--noun-corruption", "0.02"]);
    let report = &json(d.join("corpus/runs/mine.n.json"))["summary"];
    let n = |k: &str| report[k].as_u64().unwrap_or_else(|| report[k].as_array().unwrap().len() as u64);
    let emitted = n("emitted");
    assert!(emitted > 0 && n("degenerate") > 0, "{report}");
    assert_eq!(emitted, n("samples") - n("degenerate") - n("shortfall"));
    assert!(stdout.contains(&format!("queue: {emitted} pending")), "{stdout}");
    assert_eq!(report["calls"]["succeeded"].as_u64(), Some(n("samples") * 8));

    let out = mhb(d, &["export", "dpo"]);
    assert_eq!(code(&out), 2);
    ok(d, &["export", "dpo", "--auto-approve", "--include", "approved"]);
    let records = std::fs::read_to_string(d.join("corpus/exports/dpo.jsonl")).unwrap();
    assert_eq!(records.lines().count() as u64, emitted);
    let echo = std::fs::read_to_string(d.join("corpus/exports/dpo.jsonl.config.toml")).unwrap();
    assert!(echo.contains("include = [\"approved\"]"));
}

#[test]
fn dpo_check_reports_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["dpo-check", "--batches", "200", "--trace", "trace.csv"]);
    assert!(out.contains("ln 2 fixed point") && out.contains("max rel. err"), "{out}");
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "step,loss,mean_margin");
    assert_eq!(rows.len(), 52);
}

#[test]
fn three_human_bedroom_is_honored_with_notice() {
    let dir = tempfile::tempdir().unwrap();
    let out = mhb(dir.path(), &["generate", "--cell", "bedroom:3:2", "--cell", "kitchen:1:2"]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("notice"));
    let stats = std::fs::read_to_string(dir.path().join("corpus/stats.txt")).unwrap();
    assert!(stats.lines().any(|l| l.contains("3  bedroom")), "{stats}");
}

#[test]
fn config_precedence_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("mhb.toml"), "[run]\nmodel_id = \"file\"\nseed = 11\nicl_count = 2\n").unwrap();
    let print = |extra: &[&str], env: &[(&str, &str)]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mhb"));
        cmd.current_dir(dir.path()).envs(env.iter().copied());
        cmd.args(["--config", "mhb.toml", "--print-config", "predict"]).args(extra);
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        let v: toml::Value = toml::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
        v["run"].clone()
    };
    let run = print(&[], &[("MHB_RUN__ICL_COUNT", "5")]);
    assert_eq!(run["model_id"].as_str(), Some("file"));
    assert_eq!((run["seed"].as_integer(), run["icl_count"].as_integer()), (Some(11), Some(5)));
    let run = print(&["--model", "flag", "--icl-count", "7"], &[("MHB_RUN__MODEL_ID", "env")]);
    assert_eq!((run["model_id"].as_str(), run["icl_count"].as_integer()), (Some("flag"), Some(7)));
}

#[test]
fn header_mismatch_is_a_usage_error() {
    let dir = generated();
    let out = mhb(dir.path(), &["score", "--set", "t=4"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn report_combines_models() {
    let dir = generated();
    let d = dir.path();
    ok(d, &["predict"]);
    ok(d, &["predict", "--model", "noisy", "--mock", "scrambler", "--verb-corruption", "0.4"]);
    ok(d, &["score"]);
    ok(d, &["score", "--model", "noisy"]);
    let text = ok(
        d,
        &["report", "corpus/reports/oracle.test.r0.json", "corpus/reports/noisy.test.r0.json", "--out", "table"],
    );
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("oracle") || l.starts_with("noisy")).collect();
    assert_eq!(rows.len(), 2);
    let csv = std::fs::read_to_string(d.join("table.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("model,")));
    assert_eq!(csv.lines().filter(|l| l.starts_with("# source")).count(), 2);
}
