use d2cache_cli::bench::{run_bench, BenchOptions, SweepSpec};
use d2cache_cli::{PolicyKind, RunConfig, StrategyKind};

fn base(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::load(None, &o).unwrap()
}

fn opts() -> BenchOptions {
    BenchOptions {
        jobs: Some(2),
        timing: false,
    }
}

#[test]
fn vanilla_and_d2cache_rows() {
    let cfg = base(&[]);
    let mut sweep = SweepSpec::from_base(&cfg);
    sweep.policies = vec![PolicyKind::Vanilla, PolicyKind::D2cache];
    let rows = run_bench(&cfg, &sweep, None, &opts()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.windows(2).all(|w| w[0].run_id < w[1].run_id));
    let vanilla = rows.iter().find(|r| r.policy == PolicyKind::Vanilla).unwrap();
    assert_eq!(vanilla.savings_ratio, Some(0.0));
    for r in &rows {
        let s = r.savings_ratio.unwrap();
        assert!((0.0..=1.0).contains(&s));
    }
}

#[test]
fn d2cache_total_respects_budget_at_length_128() {
    let cfg = base(&[
        "run.prompt=\"random:32:0\"",
        "run.gen_len=96",
        "decode.k=8",
        "decode.p=0.1",
        "decode.block_size=32",
    ]);
    let rows = run_bench(&cfg, &SweepSpec::from_base(&cfg), None, &opts()).unwrap();
    let (len, t, k) = (128usize, 96usize, 8usize);
    let bound = len + (t - 1) * (k + (0.1 * (len - k) as f64).ceil() as usize + 1);
    assert_eq!(rows[0].len, Some(len));
    assert!(rows[0].total_position_updates.unwrap() <= bound);
}

#[test]
fn larger_k_never_queries_less() {
    let cfg = base(&["run.prompt=\"random:16:2\"", "run.gen_len=48", "decode.block_size=16"]);
    for strategy in [StrategyKind::CertaintyPrior, StrategyKind::ConfidenceNar] {
        let mut sweep = SweepSpec::from_base(&cfg);
        sweep.ks = vec![2, 4, 8];
        sweep.strategies = vec![strategy];
        let mut rows = run_bench(&cfg, &sweep, None, &opts()).unwrap();
        rows.sort_by_key(|r| r.k);
        let totals: Vec<usize> = rows.iter().map(|r| r.total_position_updates.unwrap()).collect();
        assert!(totals.windows(2).all(|w| w[0] <= w[1]), "{strategy}: {totals:?}");
    }
}
