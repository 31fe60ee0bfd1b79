use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use d2cache::DecodeTrace;

fn d2cache(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2cache"))
        .args(args)
        .env("D2CACHE_OUT", out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_run<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "run",
        "--set",
        "run.prompt=\"random:8:1\"",
        "--set",
        "run.gen_len=16",
        "--set",
        "decode.block_size=8",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn run_writes_trace_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = d2cache(&small_run(&["--set", "run.run_id=\"a\""]), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("a.trace.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 17);
    assert!(lines[16].contains("\"type\":\"summary\""));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["resolved"]["T"], 16);
    assert_eq!(metrics["config"]["decode"]["sigma"], 10.0);
    assert_eq!(metrics["config"]["decode"]["steps"], 16);
}

#[test]
fn invalid_sigma_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["decode.sigma=0", "decode.sigma=-2"] {
        let o = d2cache(&small_run(&["--set", bad]), dir.path());
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains("sigma"), "{}", stderr(&o));
    }
}

#[test]
fn config_file_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[decode]\nsigma = -1.0\n").unwrap();
    let o = d2cache(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sigma"));

    fs::write(&cfg, "[decode]\nsigam = 1.0\n").unwrap();
    let o = d2cache(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sigam"));

    let o = d2cache(&["run", "--config", "/nonexistent/x.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = d2cache(&["nonsense"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_sections_are_read() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "[model]\nseed = 4\nprecision = \"f64\"\n\n[decode]\npolicy = \"vanilla\"\nstrategy = \"confidence_nar\"\n\n[run]\nprompt = [1, 2, 3, 4]\ngen_len = 8\nrun_id = \"file\"\n",
    )
    .unwrap();
    let o = d2cache(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = DecodeTrace::read_jsonl(
        fs::read(dir.path().join("file.trace.jsonl")).unwrap().as_slice(),
    )
    .unwrap();
    assert_eq!(&trace.final_tokens[..4], &[1, 2, 3, 4]);
    assert_eq!(trace.stats.total_position_updates, 8 * 12);
}

#[test]
fn reruns_are_byte_identical_and_out_flag_wins() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let env_dir = tempfile::tempdir().unwrap();
    let args = small_run(&["--set", "decode.strategy=\"random_order\""]);
    assert!(d2cache(&args, a.path()).status.success());
    let mut with_out = args.clone();
    with_out.extend(["--out", b.path().to_str().unwrap()]);
    assert!(d2cache(&with_out, env_dir.path()).status.success());
    assert!(!env_dir.path().join("run.trace.jsonl").exists());
    for f in ["run.trace.jsonl", "run.metrics.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn bench_sweeps_policies() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small_run(&["--policies", "vanilla,d2cache", "--seeds", "3"]);
    args[0] = "bench";
    let o = d2cache(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&dir.path().join("bench.csv"));
    assert_eq!(rows[0][0], "run_id");
    assert_eq!(rows[0].len(), 14);
    assert_eq!(rows.len(), 3);
    let vanilla = rows.iter().find(|r| r[1] == "vanilla").unwrap();
    assert_eq!(vanilla[10], "0");
    assert_eq!(vanilla[13], "ok");
    assert!(Path::new(&vanilla[12]).exists());
    let d2 = rows.iter().find(|r| r[1] == "d2cache").unwrap();
    assert!(d2[10].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn bench_is_independent_of_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sweep = ["--k", "2,4", "--sigma", "1,10", "--policies", "vanilla,d2cache,block_cache,interval_refresh"];
    let mut args = small_run(&sweep);
    args[0] = "bench";
    let mut serial = args.clone();
    serial.extend(["--jobs", "1", "--out", a.path().to_str().unwrap()]);
    let mut parallel = args.clone();
    parallel.extend(["--jobs", "4", "--out", b.path().to_str().unwrap()]);
    assert!(d2cache(&serial, a.path()).status.success());
    assert!(d2cache(&parallel, b.path()).status.success());
    let strip_dir = |p: &Path| fs::read_to_string(p.join("bench.csv")).unwrap().replace(p.to_str().unwrap(), "");
    assert_eq!(strip_dir(a.path()), strip_dir(b.path()));
    assert_eq!(read_csv(&a.path().join("bench.csv")).len(), 17);
}

#[test]
fn bench_records_failures_per_row() {
    let dir = tempfile::tempdir().unwrap();
    // block_size 5 does not divide gen_len 16, so only block policies fail.
    let mut args = small_run(&["--set", "decode.block_size=5", "--policies", "vanilla,block_cache"]);
    args[0] = "bench";
    let o = d2cache(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&dir.path().join("bench.csv"));
    let block = rows.iter().find(|r| r[1] == "block_cache").unwrap();
    assert!(block[13].starts_with("error"));

    let mut all_bad = small_run(&["--set", "decode.block_size=5", "--policies", "block_cache"]);
    all_bad[0] = "bench";
    assert_eq!(d2cache(&all_bad, dir.path()).status.code(), Some(2));
}

#[test]
fn analyze_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let run = |id: &str, extra: &[&str]| {
        let id_set = format!("run.run_id=\"{id}\"");
        let mut args = small_run(&["--set", &id_set]);
        args.extend_from_slice(extra);
        let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = d2cache(&refs, out);
        assert!(o.status.success(), "{}", stderr(&o));
        out.join(format!("{id}.trace.jsonl"))
    };
    let d2 = run(
        "d2",
        &["--set", "run.snapshot_positions=[2, 10]", "--set", "run.record_rollout_matrix=true"],
    );
    let van = run("van", &["--set", "decode.policy=\"vanilla\""]);
    let semi = run("semi", &["--set", "decode.strategy=\"semi_ar_block\""]);

    let analyze = |args: &[&str]| d2cache(&[&["analyze"], args].concat(), out);

    let o = analyze(&["--kind", "decode-distances", d2.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_csv(&out.join("decode_distances_d2.csv")).len(), 1 + 15);

    let o = analyze(&["--kind", "rollout-diff", van.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no influence vectors"));
    assert!(stderr(&o).contains("van.trace.jsonl"));

    let o = analyze(&["--kind", "rollout-diff", d2.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_csv(&out.join("rollout_diff_d2.csv")).len(), 1 + 16 * 16);
    let first = fs::read(out.join("rollout_diff_d2.csv")).unwrap();
    let o = analyze(&["--kind", "rollout-diff", "--full-matrix", d2.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = analyze(&["--kind", "pca-trajectory", "--position", "10", d2.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&out.join("pca_trajectory_d2.csv"));
    assert_eq!(rows[0], ["step", "pc1", "pc2", "phase", "displacement"]);
    assert_eq!(rows.len(), 1 + 16);
    let o = analyze(&["--kind", "pca-trajectory", van.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = analyze(&[
        "--kind",
        "decode-order",
        d2.to_str().unwrap(),
        van.to_str().unwrap(),
        semi.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_csv(&out.join("decode_order_merged.csv")).len(), 1 + 48);

    assert!(analyze(&["--kind", "rollout-diff", d2.to_str().unwrap()]).status.success());
    assert_eq!(first, fs::read(out.join("rollout_diff_d2.csv")).unwrap());
}

#[test]
fn analyze_reports_missing_and_corrupt_traces() {
    let dir = tempfile::tempdir().unwrap();
    let o = d2cache(&["analyze", "--kind", "decode-order", "/nonexistent/t.trace.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/t.trace.jsonl"));
    let bad = dir.path().join("bad.trace.jsonl");
    fs::write(&bad, "{not json}\n").unwrap();
    let o = d2cache(&["analyze", "--kind", "decode-distances", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.trace.jsonl"));
    assert!(stderr(&o).contains("line 1"));
}

#[test]
fn selftest_passes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = d2cache(&["selftest"], dir.path());
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    let b = d2cache(&["selftest"], dir.path());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8_lossy(&a.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 10);
}

#[test]
fn selftest_detects_stale_splices() {
    let dir = tempfile::tempdir().unwrap();
    let o = d2cache(&["selftest", "--inject-fault", "stale-splice"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let text = String::from_utf8_lossy(&o.stdout);
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("FAIL [ 1] degenerate_cache_equivalence"), "{first}");
}
