//! Report generation over saved traces.

use std::path::{Path, PathBuf};

use d2cache::analysis::{
    decode_distances, decode_order_map, kv_trajectory, rollout_step_diffs,
    rollout_step_diffs_matrix, AnalysisReport, ReportKind, StateKind,
};
use d2cache::DecodeTrace;

use crate::error::CliError;
use crate::run::{read_trace, write_file};

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    /// Compare whole rollout matrices instead of influence vectors.
    pub full_matrix: bool,
    /// Position followed by `pca_trajectory`; defaults to the first
    /// snapshotted position.
    pub position: Option<usize>,
    pub state: StateKind,
    /// Name of the merged `decode_order` report.
    pub merged_id: Option<String>,
}

/// `a/b/run.trace.jsonl` -> `run`.
pub fn run_id_of(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    for suffix in [".trace.jsonl", ".jsonl"] {
        if let Some(stem) = name.strip_suffix(suffix) {
            return stem.to_string();
        }
    }
    name
}

fn with_file(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Builds one report for a single trace.
pub fn single_report(
    kind: ReportKind,
    trace: &DecodeTrace,
    opts: &AnalyzeOptions,
) -> Result<AnalysisReport, String> {
    match kind {
        ReportKind::DecodeDistances => Ok(decode_distances(trace)),
        ReportKind::RolloutDiff => {
            if opts.full_matrix {
                let mats: Vec<(usize, &[Vec<f64>])> = trace
                    .steps
                    .iter()
                    .filter_map(|s| s.rollout_matrix.as_deref().map(|m| (s.step, m)))
                    .collect();
                if mats.is_empty() {
                    return Err("no rollout matrices recorded (set run.record_rollout_matrix)".into());
                }
                rollout_step_diffs_matrix(&mats).map_err(|e| e.to_string())
            } else {
                let vecs = trace.influence_vectors();
                if vecs.is_empty() {
                    return Err("no influence vectors in trace".into());
                }
                rollout_step_diffs(&vecs).map_err(|e| e.to_string())
            }
        }
        ReportKind::PcaTrajectory => {
            let snaps: Vec<_> = trace
                .steps
                .iter()
                .filter_map(|s| s.snapshots.as_ref())
                .flatten()
                .collect();
            let position = match opts.position.or_else(|| snaps.first().map(|s| s.position)) {
                Some(p) => p,
                None => return Err("no K/V snapshots in trace (set run.snapshot_positions)".into()),
            };
            let picked: Vec<_> = snaps
                .into_iter()
                .filter(|s| s.position == position)
                .cloned()
                .collect();
            if picked.is_empty() {
                return Err(format!("no K/V snapshots for position {position}"));
            }
            let decode_step = trace
                .decode_order()
                .into_iter()
                .find(|(p, _)| *p == position)
                .map(|(_, s)| s);
            kv_trajectory(&picked, decode_step, opts.state).map_err(|e| e.to_string())
        }
        ReportKind::DecodeOrder => decode_order_map(&[trace]).map_err(|e| e.to_string()),
    }
}

pub fn report_csv(report: &AnalysisReport) -> Vec<u8> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf).expect("writing to memory");
    buf
}

/// Writes `<out>/<kind>_<run_id>.csv` per trace, or a single merged file
/// for `decode_order`. Returns the written paths with their reports.
pub fn cmd_analyze(
    kind: ReportKind,
    traces: &[PathBuf],
    out_dir: &Path,
    opts: &AnalyzeOptions,
) -> Result<Vec<(PathBuf, AnalysisReport)>, CliError> {
    if traces.is_empty() {
        return Err(CliError::Validation("analyze needs at least one trace".into()));
    }
    let loaded: Vec<DecodeTrace> = traces
        .iter()
        .map(|p| read_trace(p))
        .collect::<Result<_, _>>()?;
    let mut written = Vec::new();
    if kind == ReportKind::DecodeOrder {
        let refs: Vec<&DecodeTrace> = loaded.iter().collect();
        let report = decode_order_map(&refs)?;
        let id = match (&opts.merged_id, traces) {
            (Some(id), _) => id.clone(),
            (None, [single]) => run_id_of(single),
            (None, _) => "merged".into(),
        };
        let path = out_dir.join(format!("{}_{id}.csv", kind.as_str()));
        write_file(&path, &report_csv(&report))?;
        written.push((path, report));
        return Ok(written);
    }
    for (path, trace) in traces.iter().zip(&loaded) {
        let report = single_report(kind, trace, opts).map_err(|e| with_file(path, e))?;
        let out = out_dir.join(format!("{}_{}.csv", kind.as_str(), run_id_of(path)));
        write_file(&out, &report_csv(&report))?;
        written.push((out, report));
    }
    Ok(written)
}
