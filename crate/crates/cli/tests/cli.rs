use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn dpicl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpicl"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line =
        text.lines().last().unwrap_or_else(|| panic!("no output; stderr: {}", String::from_utf8_lossy(&out.stderr)));
    serde_json::from_str(line).unwrap()
}

/// A store where 14 reviews say Positive and 6 say Negative, and three queries.
fn workspace() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let ex = dir.path().join("exemplars.jsonl");
    let lines: Vec<String> = (0..20)
        .map(|i| {
            let label = if i < 14 { "Positive" } else { "Negative" };
            format!(r#"{{"input": "review {i}", "answer": "{label}"}}"#)
        })
        .collect();
    std::fs::write(&ex, lines.join("\n") + "\n").unwrap();
    let q = dir.path().join("queries.jsonl");
    std::fs::write(
        &q,
        "{\"query\": \"a lovely movie\"}\n{\"query\": \"dull and slow\"}\n{\"query\": \"fine acting\"}\n",
    )
    .unwrap();
    (dir, ex, q)
}

fn classify_args<'a>(ex: &'a Path, q: &'a Path, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "classify",
        "--seed",
        "11",
        "--exemplars",
        ex.to_str().unwrap(),
        "--queries",
        q.to_str().unwrap(),
        "--output",
        out,
        "--n-subsets",
        "5",
        "--shots",
        "4",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn calibrate_matches_the_classical_bound() {
    let dir = TempDir::new().unwrap();
    let out = dpicl(dir.path(), &["calibrate", "--epsilon", "1", "--delta", "1e-5", "--queries", "1"]);
    assert!(out.status.success());
    let sigma = stdout_json(&out)["sigma"].as_f64().unwrap();
    // sqrt(2 ln(1.25 / delta)) / eps
    let classical = (2.0 * (1.25f64 / 1e-5).ln()).sqrt();
    assert!(sigma > 0.0 && sigma <= classical, "sigma {sigma} vs {classical}");
}

#[test]
fn noiseless_classification_is_the_majority_and_reproducible() {
    let (dir, ex, q) = workspace();
    let run = |name: &str| {
        let out = dpicl(dir.path(), &classify_args(&ex, &q, name, &["--sigma", "0"]));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(stdout_json(&out)["epsilon"], 0.0);
        std::fs::read(dir.path().join(name)).unwrap()
    };
    let (a, b) = (run("a.jsonl"), run("b.jsonl"));
    assert_eq!(a, b);
    let records: Vec<Value> = String::from_utf8(a).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["index"], i);
        assert_eq!(r["answer"], "Positive");
    }
    // Zero-noise runs record nothing.
    assert!(!dir.path().join("a.ledger.jsonl").exists());
}

#[test]
fn noisy_runs_are_reproducible_and_stay_in_budget() {
    let (dir, ex, q) = workspace();
    let run = |name: &str| {
        let out = dpicl(dir.path(), &classify_args(&ex, &q, name, &["--epsilon", "2"]));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let eps = stdout_json(&out)["epsilon"].as_f64().unwrap();
        assert!(eps <= 2.0 && eps > 1.99, "spent {eps}");
        std::fs::read(dir.path().join(name)).unwrap()
    };
    assert_eq!(run("a.jsonl"), run("b.jsonl"));
    let ledger = std::fs::read_to_string(dir.path().join("a.ledger.jsonl")).unwrap();
    assert_eq!(ledger.lines().count(), 3);
}

#[test]
fn parallel_queries_give_the_sequential_results() {
    let (dir, ex, q) = workspace();
    let seq = dpicl(dir.path(), &classify_args(&ex, &q, "s.jsonl", &["--epsilon", "2"]));
    let par = dpicl(dir.path(), &classify_args(&ex, &q, "p.jsonl", &["--epsilon", "2", "--parallel-queries"]));
    assert!(seq.status.success() && par.status.success());
    assert_eq!(std::fs::read(dir.path().join("s.jsonl")).unwrap(), std::fs::read(dir.path().join("p.jsonl")).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("s.ledger.jsonl")).unwrap(),
        std::fs::read(dir.path().join("p.ledger.jsonl")).unwrap()
    );
}

#[test]
fn parallel_queries_need_a_target() {
    let (dir, ex, q) = workspace();
    let out = dpicl(dir.path(), &classify_args(&ex, &q, "o.jsonl", &["--sigma", "5", "--parallel-queries"]));
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn budget_stops_before_the_query_that_would_exceed_it() {
    let (dir, ex, q) = workspace();
    // The cost of two queries, measured by a run over only the first two.
    let two = dir.path().join("two.jsonl");
    let text = std::fs::read_to_string(&q).unwrap();
    std::fs::write(&two, text.lines().take(2).collect::<Vec<_>>().join("\n")).unwrap();
    let out = dpicl(dir.path(), &classify_args(&ex, &two, "t.jsonl", &["--sigma", "4"]));
    let budget = stdout_json(&out)["epsilon"].as_f64().unwrap().to_string();

    let out = dpicl(dir.path(), &classify_args(&ex, &q, "o.jsonl", &["--sigma", "4", "--budget", budget.as_str()]));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let results = std::fs::read_to_string(dir.path().join("o.jsonl")).unwrap();
    let ledger = std::fs::read_to_string(dir.path().join("o.ledger.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 2, "budget {budget}: {results} {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(ledger.lines().count(), 2);
    assert_eq!(results, std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap());
}

#[test]
fn a_spent_ledger_blocks_the_next_run() {
    let (dir, ex, q) = workspace();
    let first = dpicl(dir.path(), &classify_args(&ex, &q, "o.jsonl", &["--epsilon", "1", "--ledger", "shared.jsonl"]));
    assert!(first.status.success());
    let second =
        dpicl(dir.path(), &classify_args(&ex, &q, "o2.jsonl", &["--epsilon", "1", "--ledger", "shared.jsonl"]));
    assert_eq!(second.status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(dir.path().join("shared.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn account_of_an_empty_ledger_is_zero() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = dpicl(dir.path(), &["account", "--ledger", "empty.jsonl"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["epsilon"], 0.0);
    assert_eq!(v["entries"], 0);
}

#[test]
fn account_rejects_a_corrupt_ledger() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{\"kind\": \"laplace\"}\n").unwrap();
    assert_eq!(dpicl(dir.path(), &["account", "--ledger", "bad.jsonl"]).status.code(), Some(4));
}

#[test]
fn configuration_errors_exit_4() {
    let (dir, ex, q) = workspace();
    let cases: Vec<Vec<&str>> = vec![
        classify_args(&ex, &q, "o.jsonl", &["--sigma", "1", "--epsilon", "1"]),
        classify_args(&ex, &q, "o.jsonl", &[]),
        classify_args(&ex, &q, "o.jsonl", &["--sigma", "1", "--subsample-rate", "1.5"]),
        vec!["classify", "--sigma", "1", "--exemplars", "x", "--queries", "y", "--output", "z"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let out = dpicl(dir.path(), &args);
        assert_eq!(out.status.code(), Some(4), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    std::fs::write(dir.path().join("bad.toml"), "[ensemble]\nn_subsets = \"many\"\n").unwrap();
    let out = dpicl(dir.path(), &["--config", "bad.toml", "calibrate", "--epsilon", "1"]);
    // calibrate does not read the file
    assert!(out.status.success());
    let mut args = classify_args(&ex, &q, "o.jsonl", &["--sigma", "1"]);
    args.splice(0..0, ["--config", "bad.toml"]);
    assert_eq!(dpicl(dir.path(), &args).status.code(), Some(4));
}

#[test]
fn unreachable_backend_exits_3() {
    let (dir, ex, q) = workspace();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    std::fs::write(dir.path().join("http.toml"), "[profile]\nmax_retries = 0\nretry_base_delay_ms = 1\n").unwrap();
    let mut args = classify_args(&ex, &q, "o.jsonl", &["--sigma", "1"]);
    args.splice(0..0, ["--config", "http.toml", "--backend", "http", "--endpoint-url", url.as_str()]);
    let out = dpicl(dir.path(), &args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_drives_a_keyword_run() {
    let dir = TempDir::new().unwrap();
    let lines: Vec<String> =
        (0..30).map(|i| format!(r#"{{"input": "dialogue {i}", "answer": "summary {i}"}}"#)).collect();
    std::fs::write(dir.path().join("ex.jsonl"), lines.join("\n")).unwrap();
    std::fs::write(dir.path().join("q.txt"), "Anna: train tickets for friday?\nBob: meeting moved to noon\n").unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        r#"
seed = 5
exemplars = "ex.jsonl"
queries = "q.txt"
output = "out.jsonl"

[ensemble]
n_subsets = 6
shots_per_subset = 2

[privacy]
sigma = 1.0
k_epsilon = 1.0
ptr_delta = 1e-6

[ksa]
method = "ptr"
k_min = 1
k_max = 3

[[mock.rules]]
pattern = "Anna"
response = "anna buys train tickets friday"
"#,
    )
    .unwrap();
    let out = dpicl(dir.path(), &["--config", "run.toml", "--privacy-off-debug", "ksa"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NOT differentially private"));
    let text = std::fs::read_to_string(dir.path().join("out.jsonl")).unwrap();
    let records: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r["diagnostics"].is_object()));
    assert_eq!(std::fs::read_to_string(dir.path().join("out.ledger.jsonl")).unwrap().lines().count(), 4);

    // Target budgets are not supported for the PTR variant.
    let out = dpicl(dir.path(), &["--config", "run.toml", "ksa", "--epsilon", "1"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn esa_with_target_budget() {
    let dir = TempDir::new().unwrap();
    let lines: Vec<String> =
        (0..16).map(|i| format!(r#"{{"input": "dialogue {i}", "answer": "they meet at {i}"}}"#)).collect();
    std::fs::write(dir.path().join("ex.jsonl"), lines.join("\n")).unwrap();
    std::fs::write(dir.path().join("q.txt"), "Sam: lunch today?\n").unwrap();
    std::fs::write(dir.path().join("run.toml"), "[mock]\ndimension = 16\n[esa]\nn_candidates = 4\n").unwrap();
    let out = dpicl(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "--seed",
            "2",
            "esa",
            "--exemplars",
            "ex.jsonl",
            "--queries",
            "q.txt",
            "--output",
            "out.jsonl",
            "--epsilon",
            "3",
            "--n-subsets",
            "4",
            "--shots",
            "2",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_json(&out)["epsilon"].as_f64().unwrap() <= 3.0);
    let record: Value =
        serde_json::from_str(std::fs::read_to_string(dir.path().join("out.jsonl")).unwrap().trim()).unwrap();
    assert!(!record["answer"].as_str().unwrap().is_empty());
}

#[test]
fn score_reports_means() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("p.jsonl"), "{\"answer\": \"a b c d\"}\n{\"answer\": \"same\"}\n").unwrap();
    std::fs::write(dir.path().join("r.jsonl"), "{\"reference\": \"a b x y\"}\n{\"answer\": \"same\"}\n").unwrap();
    let out =
        dpicl(dir.path(), &["score", "--predictions", "p.jsonl", "--references", "r.jsonl", "--output", "s.json"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["n"], 2);
    // unigram F1 50 and 100
    assert!((v["mean"]["rouge1"].as_f64().unwrap() - 75.0).abs() < 1e-9);
    assert!((v["mean"]["accuracy"].as_f64().unwrap() - 50.0).abs() < 1e-9);
    assert!(dir.path().join("s.json").exists());

    std::fs::write(dir.path().join("short.jsonl"), "{\"answer\": \"x\"}\n").unwrap();
    let out = dpicl(dir.path(), &["score", "--predictions", "p.jsonl", "--references", "short.jsonl"]);
    assert_eq!(out.status.code(), Some(4));
}
