//! End-to-end acceptance checks with independent oracles.
//!
//! Every check is deterministic and its text output carries no timings, so
//! two runs print the same lines.

use std::fmt;

use d2cache::analysis::{decode_distances, pca_2d, rollout_step_diffs, PointCloud};
use d2cache::decoder::random_prompt;
use d2cache::selection::{
    attention_rollout, certainty_density, gaussian_weight, rank_descending,
};
use d2cache::tensor::{Matrix, Real};
use d2cache::{
    generate, CachePolicy, CertaintyParams, DecodeConfig, DecodeTrace, Decoder, MaskedUpdate,
    Model, ModelConfig, Precision, RolloutParams, Strategy, TokenId,
};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analyze::{report_csv, single_report, AnalyzeOptions};
use crate::bench::{bench_csv, run_bench, BenchOptions, SweepSpec};
use crate::config::{PolicyKind, RunConfig, StrategyKind};
use crate::run::{execute, metrics, metrics_bytes, trace_bytes};

pub const CHECK_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Splices return cached rows in place of fresh ones.
    StaleSplice,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stale-splice" => Ok(Fault::StaleSplice),
            _ => Err(format!("unknown fault `{s}` (known: stale-splice)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestOptions {
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} [{:>2}] {}: {}", self.id, self.name, self.detail)
    }
}

pub fn check_name(id: usize) -> &'static str {
    match id {
        1 => "degenerate_cache_equivalence",
        2 => "splice_oracle",
        3 => "rollout_oracle",
        4 => "certainty_prior_unit_suite",
        5 => "budget_bound",
        6 => "quasi_left_to_right",
        7 => "hyperparameter_defaults",
        8 => "analysis_correctness",
        9 => "baseline_accounting",
        10 => "determinism",
        _ => "unknown",
    }
}

type CheckResult = Result<String, String>;

pub fn run_check(id: usize, opts: &SelftestOptions) -> CheckOutcome {
    let result = match id {
        1 => degenerate_cache_equivalence(opts),
        2 => splice_oracle(),
        3 => rollout_oracle(),
        4 => certainty_prior_unit_suite(),
        5 => budget_bound(),
        6 => quasi_left_to_right(),
        7 => hyperparameter_defaults(),
        8 => analysis_correctness(),
        9 => baseline_accounting(),
        10 => determinism(),
        _ => Err(format!("no check with id {id}")),
    };
    let (passed, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckOutcome {
        id,
        name: check_name(id),
        passed,
        detail,
    }
}

pub fn run_all(opts: &SelftestOptions) -> Vec<CheckOutcome> {
    (1..=CHECK_COUNT).map(|id| run_check(id, opts)).collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toy_config(seed: u64, precision: Precision) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_head: 16,
        vocab_size: 64,
        mask_token_id: 63,
        seed,
        precision,
        ..ModelConfig::default()
    }
}

fn toy_model<T: Real>(seed: u64, precision: Precision) -> Result<Model<T>, String> {
    Model::<T>::new(toy_config(seed, precision)).map_err(|e| e.to_string())
}

fn d2cache(sigma: f64, k: usize, p: f64) -> CachePolicy {
    CachePolicy::D2Cache {
        certainty: CertaintyParams { sigma, k },
        rollout: RolloutParams { p },
        masked_update: MaskedUpdate::PriorTopk,
    }
}

fn run_decoder(
    model: &Model<f64>,
    prompt: &[TokenId],
    n: usize,
    config: DecodeConfig,
    fault: Option<Fault>,
) -> Result<DecodeTrace, String> {
    let steps = config.steps;
    let mut dec = Decoder::new(model, prompt, n, config).map_err(|e| e.to_string())?;
    if fault == Some(Fault::StaleSplice) {
        dec.cache_mut().set_stale_splice_fault(true);
    }
    for _ in 0..steps {
        dec.step().map_err(|e| e.to_string())?;
    }
    Ok(dec.into_trace())
}

fn degenerate_cache_equivalence(opts: &SelftestOptions) -> CheckResult {
    let (prompt_len, n) = (16, 32);
    let len = prompt_len + n;
    let model = toy_model::<f64>(11, Precision::F64)?;
    let mut worst = 0.0f64;
    let strategies = [
        Strategy::CertaintyPrior { sigma: 10.0 },
        Strategy::ConfidenceNar,
        Strategy::RandomOrder { seed: 3 },
    ];
    for strategy in &strategies {
        let prompt = random_prompt(prompt_len, 5, 64, 63);
        let mut vanilla = DecodeConfig::new(strategy.clone(), CachePolicy::Vanilla, n);
        vanilla.trace.capture_logits = true;
        let mut cached = DecodeConfig::new(strategy.clone(), d2cache(10.0, len, 1.0), n);
        cached.trace.capture_logits = true;
        let a = run_decoder(&model, &prompt, n, vanilla, None)?;
        let b = run_decoder(&model, &prompt, n, cached, opts.fault)?;
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            let (ia, ib) = (sa.decoded_positions(), sb.decoded_positions());
            ensure(ia == ib, || {
                format!("{}: step {} decoded {ia:?} vs {ib:?}", strategy.name(), sa.step)
            })?;
            let la = sa.logits.as_ref().ok_or("vanilla logits missing")?;
            let lb = sb.logits.as_ref().ok_or("cached logits missing")?;
            ensure(lb.len() == len, || {
                format!("{}: step {} queried {} of {len}", strategy.name(), sb.step, lb.len())
            })?;
            for ((pa, ra), (pb, rb)) in la.iter().zip(lb) {
                ensure(pa == pb, || format!("step {}: row order differs", sa.step))?;
                for (x, y) in ra.iter().zip(rb) {
                    worst = worst.max((x - y).abs());
                }
            }
            ensure(worst <= 1e-12, || {
                format!(
                    "{}: step {} logit max-abs-diff {worst:.3e} > 1e-12",
                    strategy.name(),
                    sa.step
                )
            })?;
        }
        ensure(a.final_tokens == b.final_tokens, || {
            format!("{}: final sequences differ", strategy.name())
        })?;
    }
    Ok(format!(
        "{} strategies x {n} steps identical, max logit diff {worst:.3e}",
        strategies.len()
    ))
}

fn splice_case<T: Real>(precision: Precision, tol: f64, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let model = toy_model::<T>(rng.random_range(0..1000), precision)?;
    let len = rng.random_range(2..=48);
    let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..64)).collect();
    let mut q: Vec<usize> = (0..len).filter(|_| rng.random_bool(0.3)).collect();
    if q.is_empty() {
        q.push(rng.random_range(0..len));
    }
    let full = model.full_forward(&tokens).map_err(|e| e.to_string())?;
    let mut cache = model.new_cache(len).map_err(|e| e.to_string())?;
    cache.commit(0, &full).map_err(|e| e.to_string())?;
    let part = model
        .partial_forward(&tokens, &q, &cache)
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (r, &pos) in q.iter().enumerate() {
        for (a, b) in part.logits.row(r).iter().zip(full.logits.row(pos)) {
            worst = worst.max((a.as_f64() - b.as_f64()).abs());
        }
    }
    ensure(worst <= tol, || {
        format!("{precision:?} L={len} |Q|={}: diff {worst:.3e} > {tol:e}", q.len())
    })?;
    Ok(worst)
}

fn splice_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        w32 = w32.max(splice_case::<f32>(Precision::F32, 1e-6, &mut rng)?);
        w64 = w64.max(splice_case::<f64>(Precision::F64, 1e-12, &mut rng)?);
    }
    Ok(format!("20 pairs per precision, max diff f32 {w32:.3e}, f64 {w64:.3e}"))
}

/// Dense rollout written directly from the definition.
fn naive_rollout(attn: &[Vec<Vec<f64>>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let len = attn[0].len();
    let mut c: Vec<Vec<f64>> = (0..len)
        .map(|i| (0..len).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for a in attn {
        let w: Vec<Vec<f64>> = (0..len)
            .map(|i| {
                let row: Vec<f64> = (0..len)
                    .map(|j| a[i][j] + if i == j { 1.0 } else { 0.0 })
                    .collect();
                let s: f64 = row.iter().sum();
                row.into_iter().map(|x| x / s).collect()
            })
            .collect();
        c = (0..len)
            .map(|i| {
                (0..len)
                    .map(|j| (0..len).map(|r| w[i][r] * c[r][j]).sum())
                    .collect()
            })
            .collect();
    }
    let col = (0..len).map(|j| (0..len).map(|i| c[i][j]).sum()).collect();
    (c, col)
}

fn to_f64(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn rollout_oracle() -> CheckResult {
    let len = 8;
    let model = toy_model::<f64>(21, Precision::F64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..63)).collect();
    let full = model.full_forward(&tokens).map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..len).collect();
    let state = attention_rollout(&full.attention, &all, len).map_err(|e| e.to_string())?;
    let dense: Vec<Vec<Vec<f64>>> = full.attention.iter().map(to_f64).collect();
    let (c, col) = naive_rollout(&dense);
    let mut worst = 0.0f64;
    for i in 0..len {
        for j in 0..len {
            worst = worst.max((state.cumulative[(i, j)] - c[i][j]).abs());
        }
        worst = worst.max((state.influence[i] - col[i]).abs());
    }
    ensure(worst <= 1e-9, || format!("Q=all: diff {worst:.3e} > 1e-9"))?;

    let mut cache = model.new_cache(len).map_err(|e| e.to_string())?;
    cache.commit(0, &full).map_err(|e| e.to_string())?;
    let mut worst_row = 0.0f64;
    let mut worst_mass = 0.0f64;
    for _ in 0..10 {
        let mut q: Vec<usize> = (0..len).filter(|_| rng.random_bool(0.4)).collect();
        if q.is_empty() {
            q.push(0);
        }
        let part = model
            .partial_forward(&tokens, &q, &cache)
            .map_err(|e| e.to_string())?;
        let st = attention_rollout(&part.attention, &q, len).map_err(|e| e.to_string())?;
        for m in st.transition.iter().chain(std::iter::once(&st.cumulative)) {
            for i in 0..len {
                let s: f64 = m.row(i).iter().sum();
                worst_row = worst_row.max((s - 1.0).abs());
            }
        }
        let mass: f64 = st.influence.iter().sum();
        worst_mass = worst_mass.max((mass - len as f64).abs());
    }
    ensure(worst_row <= 1e-8, || format!("partial Q: row sum off by {worst_row:.3e}"))?;
    ensure(worst_mass <= 1e-6, || format!("partial Q: influence mass off by {worst_mass:.3e}"))?;
    Ok(format!(
        "dense diff {worst:.3e}; partial Q row-sum err {worst_row:.3e}, mass err {worst_mass:.3e}"
    ))
}

fn certainty_prior_unit_suite() -> CheckResult {
    let g0 = gaussian_weight(0, 3.0).map_err(|e| e.to_string())?;
    ensure(g0 == 1.0, || format!("phi(0) = {g0}"))?;
    let gs = gaussian_weight(10, 10.0).map_err(|e| e.to_string())?;
    ensure((gs - (-0.5f64).exp()).abs() <= 1e-15, || format!("phi(sigma, sigma) = {gs}"))?;

    let d = certainty_density(&[1, 2], 3, 10.0).map_err(|e| e.to_string())?;
    let expect = [(-1.0f64 / 200.0).exp(), (-4.0f64 / 200.0).exp()];
    for (got, want) in d.iter().zip(expect) {
        ensure((got - want).abs() <= 1e-6, || format!("D = {d:?}, expected {expect:?}"))?;
    }
    ensure((d[0] - 0.995012).abs() <= 1e-6 && (d[1] - 0.980199).abs() <= 1e-6, || {
        format!("D = {d:?}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..50 {
        let len = rng.random_range(2..40);
        let mut masked: Vec<usize> = (0..len).filter(|_| rng.random_bool(0.6)).collect();
        if masked.len() == len {
            masked.pop();
        }
        if masked.is_empty() {
            masked.push(0);
        }
        let dens_all = certainty_density(&masked, len, 1e9).map_err(|e| e.to_string())?;
        let conf: Vec<f64> = masked.iter().map(|_| rng.random::<f64>()).collect();
        let prior: Vec<f64> = dens_all.iter().zip(&conf).map(|(d, s)| d * s).collect();
        let a = rank_descending(&masked, &prior);
        let b = rank_descending(&masked, &conf);
        ensure(a == b, || format!("wide sigma case {case}: orderings differ"))?;
    }
    Ok(format!(
        "phi cases exact, D(1)={:.6} D(2)={:.6}, 50 wide-sigma orderings match",
        d[0], d[1]
    ))
}

fn budget_bound() -> CheckResult {
    let (len, n, k, p) = (128usize, 96usize, 8usize, 0.1f64);
    let prompt_len = len - n;
    let model = toy_model::<f64>(5, Precision::F64)?;
    let bound_total = len + (n - 1) * (k + 12 + 1);
    let mut worst_ratio = 0.0f64;
    for seed in 0..2u64 {
        let prompt = random_prompt(prompt_len, seed, 64, 63);
        let cfg = DecodeConfig::new(Strategy::CertaintyPrior { sigma: 10.0 }, d2cache(10.0, k, p), n);
        let (_, trace) = generate(&model, &prompt, n, cfg).map_err(|e| e.to_string())?;
        for t in 1..trace.steps.len() {
            let prev = &trace.steps[t - 1];
            let bound = k + (p * (len - prev.m_star.len()) as f64).ceil() as usize + prev.decoded.len();
            let q = trace.steps[t].query_size;
            ensure(q <= bound, || format!("seed {seed} step {t}: |Q|={q} > {bound}"))?;
        }
        let total = trace.stats.total_position_updates;
        ensure(total <= bound_total, || {
            format!("seed {seed}: total {total} > {bound_total}")
        })?;
        worst_ratio = worst_ratio.max(total as f64 / (n * len) as f64);
    }
    Ok(format!(
        "2 seeds within per-step bounds, totals <= {bound_total}, at most {:.1}% of vanilla",
        100.0 * worst_ratio
    ))
}

fn left_to_right_trace(policy: CachePolicy) -> Result<DecodeTrace, String> {
    let model = toy_model::<f64>(6, Precision::F64)?;
    let prompt = random_prompt(4, 6, 64, 63);
    let mut cfg = DecodeConfig::new(Strategy::CertaintyPrior { sigma: 1.0 }, policy, 16);
    cfg.uniform_confidence = true;
    generate(&model, &prompt, 16, cfg)
        .map(|(_, t)| t)
        .map_err(|e| e.to_string())
}

fn quasi_left_to_right() -> CheckResult {
    for policy in [CachePolicy::Vanilla, d2cache(1.0, 32, 0.1)] {
        let name = policy.name();
        let trace = left_to_right_trace(policy)?;
        let order: Vec<usize> = trace.decode_order().iter().map(|(p, _)| *p).collect();
        let want: Vec<usize> = (4..20).collect();
        ensure(order == want, || format!("{name}: order {order:?}"))?;
    }
    Ok("positions 4..19 decoded in sequence under vanilla and d2cache".into())
}

fn hyperparameter_defaults() -> CheckResult {
    let cfg = RunConfig::load(None, &[]).map_err(|e| e.to_string())?;
    let trace = execute(&cfg).map_err(|e| e.to_string())?;
    let m = metrics(&cfg, &trace);
    let r = &m["resolved"];
    ensure(r["sigma"] == 10.0 && r["k"] == 32 && r["p"] == 0.1, || {
        format!("resolved {r}")
    })?;
    let c = &m["config"]["decode"];
    ensure(c["sigma"] == 10.0 && c["k"] == 32 && c["p"] == 0.1, || {
        format!("config echo {c}")
    })?;
    ensure(r["policy"] == "d2cache", || format!("policy {}", r["policy"]))?;
    let k_eff = r["k_effective"].as_u64().unwrap_or(0) as usize;
    ensure(k_eff == 32.min(trace.gen_len), || format!("k_effective {k_eff}"))?;
    for s in &trace.steps[..trace.steps.len() - 1] {
        let remaining = trace.gen_len - (s.step + 1);
        ensure(s.m_star.len() == 32.min(remaining), || {
            format!("step {}: |M*| = {} with {remaining} masked", s.step, s.m_star.len())
        })?;
    }
    Ok(format!(
        "sigma=10 k=32 (effective {k_eff}) p=0.1 at L={} n={}",
        trace.len, trace.gen_len
    ))
}

fn oracle_pca(points: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = points.len();
    let dim = points[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().take(2).map(|&i| eig.eigenvalues[i]).collect();
    let axes = order
        .iter()
        .take(2)
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (values, axes)
}

fn analysis_correctness() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for case in 0..10 {
        let dim = rng.random_range(2..=16);
        let n = rng.random_range(3..=64);
        let scales: Vec<f64> = (0..dim).map(|j| 1.0 + 2.0 * j as f64).collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let proj = pca_2d(&PointCloud::new(points.clone(), (0..n).collect()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let (values, axes) = oracle_pca(&points);
        for a in 0..2 {
            worst = worst.max((proj.variances[a] - values[a]).abs());
            let dot: f64 = proj.axes[a].iter().zip(&axes[a]).map(|(x, y)| x * y).sum();
            let sign = dot.signum();
            for (x, y) in proj.axes[a].iter().zip(&axes[a]) {
                worst = worst.max((x - sign * y).abs());
            }
        }
        ensure(worst <= 1e-8, || format!("cloud {case} (dim {dim}, n {n}): diff {worst:.3e}"))?;
    }

    let model = toy_model::<f64>(9, Precision::F64)?;
    let prompt = random_prompt(8, 9, 64, 63);
    let cfg = DecodeConfig::new(Strategy::ConfidenceNar, d2cache(10.0, 4, 0.2), 16);
    let (_, trace) = generate(&model, &prompt, 16, cfg).map_err(|e| e.to_string())?;
    let report = rollout_step_diffs(&trace.influence_vectors()).map_err(|e| e.to_string())?;
    let steps = trace.influence_vectors().len();
    let cell = |a: usize, b: usize| report.rows[a * steps + b][2];
    for a in 0..steps {
        ensure(cell(a, a) == 0.0, || format!("diagonal {a} = {}", cell(a, a)))?;
        for b in 0..steps {
            ensure(cell(a, b) >= 0.0 && cell(a, b) == cell(b, a), || {
                format!("delta[{a}][{b}] = {}, delta[{b}][{a}] = {}", cell(a, b), cell(b, a))
            })?;
        }
    }

    let l2r = left_to_right_trace(CachePolicy::Vanilla)?;
    let dist = decode_distances(&l2r)
        .column("distance")
        .ok_or("no distance column")?;
    ensure(dist.len() == 15 && dist.iter().all(|&d| d == 1.0), || {
        format!("left-to-right distances {dist:?}")
    })?;
    Ok(format!(
        "10 clouds within {worst:.3e}, {steps}x{steps} diff matrix symmetric, 15 unit distances"
    ))
}

fn baseline_accounting() -> CheckResult {
    let model = toy_model::<f64>(10, Precision::F64)?;
    let prompt = random_prompt(8, 10, 64, 63);
    let n = 24;
    let len = prompt.len() + n;
    let run = |strategy: Strategy, policy: CachePolicy, m: usize| -> Result<DecodeTrace, String> {
        let mut cfg = DecodeConfig::new(strategy, policy, n);
        cfg.tokens_per_step = m;
        cfg.steps = n / m;
        generate(&model, &prompt, n, cfg)
            .map(|(_, t)| t)
            .map_err(|e| e.to_string())
    };
    let vanilla = run(Strategy::ConfidenceNar, CachePolicy::Vanilla, 1)?;
    let total = vanilla.stats.total_position_updates;
    ensure(total == n * len, || format!("vanilla total {total} != T*L = {}", n * len))?;

    let block = 8;
    for (policy, m) in [
        (CachePolicy::Vanilla, 2),
        (d2cache(10.0, 4, 0.1), 2),
        (CachePolicy::BlockCache { block_size: block }, 1),
    ] {
        let name = policy.name();
        let trace = run(Strategy::SemiArBlock { block_size: block }, policy, m)?;
        let mut done = vec![false; len];
        for s in &trace.steps {
            let first_masked = (prompt.len()..len).find(|&p| !done[p]).ok_or("nothing masked")?;
            let b = (first_masked - prompt.len()) / block;
            let range = prompt.len() + b * block..prompt.len() + (b + 1) * block;
            for d in &s.decoded {
                ensure(range.contains(&d.position), || {
                    format!("{name}: step {} decoded {} outside {range:?}", s.step, d.position)
                })?;
            }
            for d in &s.decoded {
                done[d.position] = true;
            }
        }
    }

    let interval = run(
        Strategy::ConfidenceNar,
        CachePolicy::IntervalRefresh {
            prompt_interval: 1,
            response_interval: 1,
        },
        1,
    )?;
    ensure(interval.stats == vanilla.stats, || {
        format!(
            "interval(1,1) total {} vs vanilla {total}",
            interval.stats.total_position_updates
        )
    })?;
    Ok(format!(
        "vanilla {total} = T*L, semi-AR stays in block, interval(1,1) equals vanilla"
    ))
}

fn determinism() -> CheckResult {
    let overrides: Vec<String> = [
        "run.snapshot_positions=[3, 20]",
        "run.record_rollout_matrix=true",
        "decode.k=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = RunConfig::load(None, &overrides).map_err(|e| e.to_string())?;
    let once = |cfg: &RunConfig| -> Result<Vec<Vec<u8>>, String> {
        let trace = execute(cfg).map_err(|e| e.to_string())?;
        let mut files = vec![trace_bytes(&trace), metrics_bytes(cfg, &trace)];
        for kind in d2cache::analysis::ReportKind::ALL {
            for full_matrix in [false, true] {
                let opts = AnalyzeOptions {
                    full_matrix,
                    ..AnalyzeOptions::default()
                };
                let report = single_report(kind, &trace, &opts)?;
                files.push(report_csv(&report));
            }
        }
        Ok(files)
    };
    let a = once(&cfg)?;
    let b = once(&cfg)?;
    ensure(a == b, || "run/analyze outputs differ between reruns".into())?;

    let reloaded = RunConfig::from_toml_str(&cfg.effective().to_toml_string()).map_err(|e| e.to_string())?;
    let c = once(&reloaded)?;
    ensure(a[0] == c[0], || "trace differs after config round trip".into())?;

    let sweep = SweepSpec {
        sigmas: vec![1.0, 10.0],
        ks: vec![2],
        ps: vec![0.1],
        policies: vec![PolicyKind::Vanilla, PolicyKind::D2cache],
        strategies: vec![StrategyKind::CertaintyPrior],
        seeds: vec![0, 1],
    };
    let bench = |jobs| -> Result<Vec<u8>, String> {
        let opts = BenchOptions {
            jobs: Some(jobs),
            timing: false,
        };
        run_bench(&cfg, &sweep, None, &opts)
            .map(|rows| bench_csv(&rows))
            .map_err(|e| e.to_string())
    };
    let serial = bench(1)?;
    ensure(serial == bench(4)?, || "bench rows depend on thread count".into())?;
    ensure(serial == bench(1)?, || "bench rows differ between reruns".into())?;
    Ok(format!(
        "{} run/report files and {} bench rows byte-identical across reruns",
        a.len(),
        sweep.len()
    ))
}
