//! Single generation runs: trace and metrics files.

use std::fs;
use std::path::{Path, PathBuf};

use d2cache::{generate, DecodeTrace, Model, Precision};
use serde_json::{json, Value};

use crate::config::{PolicyKind, RunConfig};
use crate::error::{io_err, CliError};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "D2CACHE_OUT";

/// `explicit` wins over `D2CACHE_OUT`, which wins over the config value.
pub fn resolve_out_dir(explicit: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.run.out_dir.clone(),
    }
}

/// Builds the model at the configured precision and runs one generation.
pub fn execute(cfg: &RunConfig) -> Result<DecodeTrace, CliError> {
    let prompt = cfg.prompt()?;
    let decode = cfg.decode_config();
    let n = cfg.run.gen_len;
    let (_, trace) = match cfg.model.precision {
        Precision::F32 => generate(&Model::<f32>::new(cfg.model.clone())?, &prompt, n, decode)?,
        Precision::F64 => generate(&Model::<f64>::new(cfg.model.clone())?, &prompt, n, decode)?,
    };
    Ok(trace)
}

pub fn trace_bytes(trace: &DecodeTrace) -> Vec<u8> {
    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf).expect("writing to memory");
    buf
}

/// Effective configuration echo plus compute statistics.
pub fn metrics(cfg: &RunConfig, trace: &DecodeTrace) -> Value {
    let summary = trace.summary();
    let d2 = cfg.decode.policy == PolicyKind::D2cache;
    json!({
        "run_id": cfg.run.run_id,
        "config": cfg.effective(),
        "resolved": {
            "strategy": cfg.decode.strategy.as_str(),
            "policy": cfg.decode.policy.as_str(),
            "sigma": cfg.decode.sigma,
            "k": cfg.decode.k,
            "k_effective": if d2 { Some(cfg.decode.k.min(trace.gen_len)) } else { None },
            "p": cfg.decode.p,
            "L": trace.len,
            "n": trace.gen_len,
            "T": trace.steps.len(),
            "m": cfg.decode.tokens_per_step,
        },
        "stats": {
            "total_position_updates": summary.total_position_updates,
            "full_recompute_equivalent": summary.full_recompute_equivalent,
            "savings_ratio": summary.savings_ratio,
            "per_step_query_sizes": summary.per_step_query_sizes,
        },
    })
}

pub fn metrics_bytes(cfg: &RunConfig, trace: &DecodeTrace) -> Vec<u8> {
    let mut buf = serde_json::to_vec_pretty(&metrics(cfg, trace)).expect("metrics serialize");
    buf.push(b'\n');
    buf
}

pub struct RunArtifacts {
    pub trace_path: PathBuf,
    pub metrics_path: PathBuf,
    pub trace: DecodeTrace,
}

pub fn trace_path(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join(format!("{run_id}.trace.jsonl"))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Runs one generation and writes `<run_id>.trace.jsonl` and
/// `<run_id>.metrics.json` into `out_dir`.
pub fn cmd_run(cfg: &RunConfig, out_dir: &Path) -> Result<RunArtifacts, CliError> {
    let trace = execute(cfg)?;
    let trace_path = trace_path(out_dir, &cfg.run.run_id);
    let metrics_path = out_dir.join(format!("{}.metrics.json", cfg.run.run_id));
    write_file(&trace_path, &trace_bytes(&trace))?;
    write_file(&metrics_path, &metrics_bytes(cfg, &trace))?;
    Ok(RunArtifacts {
        trace_path,
        metrics_path,
        trace,
    })
}

pub fn read_trace(path: &Path) -> Result<DecodeTrace, CliError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    DecodeTrace::read_jsonl(std::io::BufReader::new(file)).map_err(|e| io_err(path, e))
}
