//! Cartesian hyperparameter sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use d2cache::trace::round_sig9;
use rayon::prelude::*;

use crate::config::{PolicyKind, RunConfig, StrategyKind};
use crate::error::{io_err, CliError};
use crate::run::{execute, trace_bytes, trace_path, write_file};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub sigmas: Vec<f64>,
    pub ks: Vec<usize>,
    pub ps: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    pub strategies: Vec<StrategyKind>,
    /// Each seed drives the model weights, a random prompt and the
    /// random-order scheduler.
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Single-point sweep at the base config's values.
    pub fn from_base(base: &RunConfig) -> Self {
        Self {
            sigmas: vec![base.decode.sigma],
            ks: vec![base.decode.k],
            ps: vec![base.decode.p],
            policies: vec![base.decode.policy],
            strategies: vec![base.decode.strategy],
            seeds: vec![base.model.seed],
        }
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
            * self.ks.len()
            * self.ps.len()
            * self.policies.len()
            * self.strategies.len()
            * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn points(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(self.len());
        for &policy in &self.policies {
            for &strategy in &self.strategies {
                for &sigma in &self.sigmas {
                    for &k in &self.ks {
                        for &p in &self.ps {
                            for &seed in &self.seeds {
                                out.push(Point {
                                    policy,
                                    strategy,
                                    sigma,
                                    k,
                                    p,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Point {
    policy: PolicyKind,
    strategy: StrategyKind,
    sigma: f64,
    k: usize,
    p: f64,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub run_id: String,
    pub policy: PolicyKind,
    pub strategy: StrategyKind,
    pub sigma: f64,
    pub k: usize,
    pub p: f64,
    pub len: Option<usize>,
    pub gen_len: usize,
    pub steps: usize,
    pub total_position_updates: Option<usize>,
    pub savings_ratio: Option<f64>,
    pub wall_time: Option<f64>,
    pub trace_path: Option<PathBuf>,
    /// `ok` or `error: <message>`.
    pub status: String,
}

impl BenchRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const BENCH_COLUMNS: [&str; 14] = [
    "run_id",
    "policy",
    "strategy",
    "sigma",
    "k",
    "p",
    "L",
    "n",
    "T",
    "total_position_updates",
    "savings_ratio",
    "wall_time",
    "trace_path",
    "status",
];

pub struct BenchOptions {
    /// Worker threads; `None` uses the rayon default.
    pub jobs: Option<usize>,
    /// Record wall-clock seconds per run (makes `bench.csv` nondeterministic).
    pub timing: bool,
}

fn point_config(base: &RunConfig, pt: &Point) -> RunConfig {
    let mut cfg = base.clone();
    cfg.decode.policy = pt.policy;
    cfg.decode.strategy = pt.strategy;
    cfg.decode.sigma = pt.sigma;
    cfg.decode.k = pt.k;
    cfg.decode.p = pt.p;
    cfg.decode.scheduler_seed = pt.seed;
    cfg.model.seed = pt.seed;
    cfg.run.prompt = base.run.prompt.with_seed(pt.seed);
    cfg.run.run_id = format!(
        "{}-{}-{}-sigma{}-k{}-p{}-seed{}",
        base.run.run_id, pt.policy, pt.strategy, pt.sigma, pt.k, pt.p, pt.seed
    );
    cfg
}

fn run_point(base: &RunConfig, pt: &Point, out_dir: Option<&Path>, timing: bool) -> BenchRow {
    let cfg = point_config(base, pt);
    let mut row = BenchRow {
        run_id: cfg.run.run_id.clone(),
        policy: pt.policy,
        strategy: pt.strategy,
        sigma: pt.sigma,
        k: pt.k,
        p: pt.p,
        len: None,
        gen_len: cfg.run.gen_len,
        steps: cfg.steps(),
        total_position_updates: None,
        savings_ratio: None,
        wall_time: None,
        trace_path: None,
        status: "ok".into(),
    };
    let start = Instant::now();
    let result = cfg.validate().and_then(|_| execute(&cfg)).and_then(|trace| {
        let path = match out_dir {
            Some(dir) => {
                let path = trace_path(dir, &cfg.run.run_id);
                write_file(&path, &trace_bytes(&trace))?;
                Some(path)
            }
            None => None,
        };
        Ok((trace, path))
    });
    match result {
        Ok((trace, path)) => {
            row.len = Some(trace.len);
            row.total_position_updates = Some(trace.stats.total_position_updates);
            row.savings_ratio = Some(trace.stats.savings_ratio());
            row.trace_path = path;
            if timing {
                row.wall_time = Some(start.elapsed().as_secs_f64());
            }
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    row
}

/// Runs every sweep point (concurrently) and returns rows sorted by run id.
/// Traces are written only when `out_dir` is given.
pub fn run_bench(
    base: &RunConfig,
    sweep: &SweepSpec,
    out_dir: Option<&Path>,
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>, CliError> {
    if sweep.is_empty() {
        return Err(CliError::Validation("bench sweep is empty".into()));
    }
    let points = sweep.points();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = opts.jobs {
        if j == 0 {
            return Err(CliError::Validation("jobs must be at least 1".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    let mut rows: Vec<BenchRow> = pool.install(|| {
        points
            .par_iter()
            .map(|pt| run_point(base, pt, out_dir, opts.timing))
            .collect()
    });
    rows.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(rows)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn bench_csv(rows: &[BenchRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(BENCH_COLUMNS).expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.policy.to_string(),
            r.strategy.to_string(),
            r.sigma.to_string(),
            r.k.to_string(),
            r.p.to_string(),
            opt(&r.len),
            r.gen_len.to_string(),
            r.steps.to_string(),
            opt(&r.total_position_updates),
            opt(&r.savings_ratio.map(round_sig9)),
            opt(&r.wall_time),
            r.trace_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            r.status.clone(),
        ])
        .expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

/// Runs the sweep and writes `<out>/bench.csv`. Fails only when every run
/// failed.
pub fn cmd_bench(
    base: &RunConfig,
    sweep: &SweepSpec,
    out_dir: &Path,
    opts: &BenchOptions,
) -> Result<(PathBuf, Vec<BenchRow>), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let rows = run_bench(base, sweep, Some(out_dir), opts)?;
    let path = out_dir.join("bench.csv");
    write_file(&path, &bench_csv(&rows))?;
    if rows.iter().all(|r| !r.ok()) {
        return Err(CliError::Runtime(format!(
            "all {} bench runs failed; see {}",
            rows.len(),
            path.display()
        )));
    }
    Ok((path, rows))
}
