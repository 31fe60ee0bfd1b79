//! Diagnostics over decode traces: KV-state trajectories, decode distances,
//! step-to-step rollout differences and decode-order maps.
//!
//! Every analysis produces an [`AnalysisReport`], a numeric table with a
//! fixed column set per kind, written as CSV with a one-line header.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::KVSnapshot;
use crate::trace::{round_sig9, DecodeTrace};

/// Jacobi sweep budget for the symmetric eigen-solve.
pub const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    PcaTrajectory,
    DecodeDistances,
    RolloutDiff,
    DecodeOrder,
}

impl ReportKind {
    pub const ALL: [ReportKind; 4] = [
        ReportKind::PcaTrajectory,
        ReportKind::DecodeDistances,
        ReportKind::RolloutDiff,
        ReportKind::DecodeOrder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::PcaTrajectory => "pca_trajectory",
            ReportKind::DecodeDistances => "decode_distances",
            ReportKind::RolloutDiff => "rollout_diff",
            ReportKind::DecodeOrder => "decode_order",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub kind: ReportKind,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Named scalar statistics, not part of the table.
    pub summary: Vec<(String, f64)>,
    /// Free-text notes (reference values from large pretrained models).
    pub annotations: Vec<String>,
}

impl AnalysisReport {
    fn new(kind: ReportKind, columns: &[&str]) -> Self {
        Self {
            kind,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            summary: Vec::new(),
            annotations: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn summary_value(&self, name: &str) -> Option<f64> {
        self.summary.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|&x| format!("{}", round_sig9(x))).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Equal-dimension points with a step label each.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Input("a point cloud needs at least two points".into()));
        }
        if labels.len() != points.len() {
            return Err(Error::Input("one label per point is required".into()));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Input("points have different dimensions".into()));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Input("points must be finite".into()));
        }
        Ok(Self { points, labels })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance along each of the two axes.
    pub variances: [f64; 2],
    /// The two principal axes (unit vectors).
    pub axes: [Vec<f64>; 2],
    /// Set when the cloud has zero variance and every projection is zero.
    pub degenerate: bool,
}

/// Projects a cloud onto its top two principal components.
///
/// Axes come from a cyclic Jacobi eigen-solve of the sample covariance and
/// are signed so that their first non-negligible component is positive.
pub fn pca_2d(cloud: &PointCloud) -> Result<Projection> {
    let dim = cloud.dim();
    if dim < 2 {
        return Err(Error::Input("PCA to two dimensions needs dimension >= 2".into()));
    }
    let n = cloud.points.len();
    let mut mean = vec![0.0; dim];
    for p in &cloud.points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = cloud
        .points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut cov = vec![vec![0.0; dim]; dim];
    for p in &centered {
        for i in 0..dim {
            for j in i..dim {
                cov[i][j] += p[i] * p[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }

    let total_var: f64 = (0..dim).map(|i| cov[i][i]).sum();
    if total_var <= f64::MIN_POSITIVE {
        return Ok(Projection {
            points: vec![[0.0, 0.0]; n],
            variances: [0.0, 0.0],
            axes: [vec![0.0; dim], vec![0.0; dim]],
            degenerate: true,
        });
    }

    let (values, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let col = order[k];
        let mut v: Vec<f64> = (0..dim).map(|r| vectors[r][col]).collect();
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-9 * scale) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        v
    };
    let axes = [axis(0), axis(1)];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let points = centered
        .iter()
        .map(|p| [dot(p, &axes[0]), dot(p, &axes[1])])
        .collect();
    Ok(Projection {
        points,
        variances: [values[order[0]].max(0.0), values[order[1]].max(0.0)],
        axes,
        degenerate: false,
    })
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns the
/// eigenvalues and a matrix whose columns are the matching eigenvectors.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let norm: f64 = a.iter().flatten().map(|x| x * x).sum();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off <= 1e-30 * norm {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Which cached state a trajectory follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateKind {
    #[default]
    Key,
    Value,
}

/// PCA trajectory of one position's layer-averaged K (or V) state.
///
/// Rows: `step, pc1, pc2, phase, displacement`. `phase` is 0 while the
/// position is still masked, 1 at the step it is decoded and 2 afterwards
/// (always 0 when `decode_step` is `None`). `displacement` is the Euclidean
/// distance to the previous step's state in the original space.
pub fn kv_trajectory(
    snapshots: &[KVSnapshot],
    decode_step: Option<usize>,
    kind: StateKind,
) -> Result<AnalysisReport> {
    if snapshots.len() < 2 {
        return Err(Error::Input(format!(
            "trajectory needs snapshots for at least two steps, got {}",
            snapshots.len()
        )));
    }
    let mut snaps: Vec<&KVSnapshot> = snapshots.iter().collect();
    snaps.sort_by_key(|s| s.step);
    let pick = |s: &KVSnapshot| match kind {
        StateKind::Key => s.key.clone(),
        StateKind::Value => s.value.clone(),
    };
    let cloud = PointCloud::new(
        snaps.iter().map(|s| pick(s)).collect(),
        snaps.iter().map(|s| s.step).collect(),
    )?;
    let proj = pca_2d(&cloud)?;

    let mut report = AnalysisReport::new(
        ReportKind::PcaTrajectory,
        &["step", "pc1", "pc2", "phase", "displacement"],
    );
    for (n, s) in snaps.iter().enumerate() {
        let phase = match decode_step {
            Some(d) if s.step == d => 1.0,
            Some(d) if s.step > d => 2.0,
            _ => 0.0,
        };
        let displacement = if n == 0 {
            0.0
        } else {
            let (a, b) = (&cloud.points[n - 1], &cloud.points[n]);
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        report.rows.push(vec![
            s.step as f64,
            proj.points[n][0],
            proj.points[n][1],
            phase,
            displacement,
        ]);
    }
    report.summary = vec![
        ("position".into(), snaps[0].position as f64),
        ("pc1_variance".into(), proj.variances[0]),
        ("pc2_variance".into(), proj.variances[1]),
        ("degenerate".into(), if proj.degenerate { 1.0 } else { 0.0 }),
    ];
    if let Some(d) = decode_step {
        report.summary.push(("decode_step".into(), d as f64));
    }
    report.annotations.push(
        "reference (8B model, 256 steps): gradual change over steps 0-64, rapid change 64-98, stable after decode"
            .into(),
    );
    Ok(report)
}

/// Linear-interpolated quantile of already sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Distances between positions decoded back to back.
///
/// Decodes within one step are flattened in position order. Rows:
/// `step, position, prev_position, distance`, one per consecutive pair.
pub fn decode_distances(trace: &DecodeTrace) -> AnalysisReport {
    let order = trace.decode_order();
    distances_from_order(&order)
}

pub fn distances_from_order(order: &[(usize, usize)]) -> AnalysisReport {
    let mut report = AnalysisReport::new(
        ReportKind::DecodeDistances,
        &["step", "position", "prev_position", "distance"],
    );
    report.annotations.push(
        "reference (8B model): 90% of consecutive decodes fall within distance 10".into(),
    );
    if order.len() < 2 {
        return report;
    }
    let mut dists = Vec::with_capacity(order.len() - 1);
    for w in order.windows(2) {
        let ((prev, _), (pos, step)) = (w[0], w[1]);
        let d = pos.abs_diff(prev) as f64;
        dists.push(d);
        report.rows.push(vec![step as f64, pos as f64, prev as f64, d]);
    }
    let within = dists.iter().filter(|&&d| d <= 10.0).count() as f64 / dists.len() as f64;
    dists.sort_by(f64::total_cmp);
    report.summary = vec![
        ("p50".into(), quantile(&dists, 0.5)),
        ("p90".into(), quantile(&dists, 0.9)),
        ("fraction_within_10".into(), within),
    ];
    report
}

/// Pairwise total absolute differences between influence vectors:
/// `delta[a][b] = Σ_j |c_a[j] - c_b[j]|`.
pub fn diff_matrix(vectors: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    if vectors.len() < 2 {
        return Err(Error::Input("need at least two vectors to compare".into()));
    }
    let len = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != len) {
        return Err(Error::Input(format!(
            "vector length mismatch: {} vs {len}",
            v.len()
        )));
    }
    let n = vectors.len();
    let mut delta = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let d: f64 = vectors[a].iter().zip(vectors[b]).map(|(x, y)| (x - y).abs()).sum();
            delta[a][b] = d;
            delta[b][a] = d;
        }
    }
    Ok(delta)
}

/// Step-to-step rollout differences as a long table
/// `step_a, step_b, delta` over every ordered pair.
pub fn rollout_step_diffs(vectors: &[(usize, &[f64])]) -> Result<AnalysisReport> {
    let only: Vec<&[f64]> = vectors.iter().map(|(_, v)| *v).collect();
    let delta = diff_matrix(&only)?;
    Ok(diff_report(vectors.iter().map(|(s, _)| *s).collect(), delta))
}

/// Same as [`rollout_step_diffs`] but over whole rollout matrices.
pub fn rollout_step_diffs_matrix(matrices: &[(usize, &[Vec<f64>])]) -> Result<AnalysisReport> {
    let flat: Vec<Vec<f64>> = matrices
        .iter()
        .map(|(_, m)| m.iter().flatten().copied().collect())
        .collect();
    let refs: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
    let delta = diff_matrix(&refs)?;
    Ok(diff_report(matrices.iter().map(|(s, _)| *s).collect(), delta))
}

fn diff_report(steps: Vec<usize>, delta: Vec<Vec<f64>>) -> AnalysisReport {
    let mut report = AnalysisReport::new(ReportKind::RolloutDiff, &["step_a", "step_b", "delta"]);
    for (a, row) in delta.iter().enumerate() {
        for (b, d) in row.iter().enumerate() {
            report.rows.push(vec![steps[a] as f64, steps[b] as f64, *d]);
        }
    }
    let adjacent: Vec<f64> = (1..steps.len()).map(|i| delta[i - 1][i]).collect();
    if !adjacent.is_empty() {
        report.summary.push((
            "mean_adjacent_delta".into(),
            adjacent.iter().sum::<f64>() / adjacent.len() as f64,
        ));
    }
    report
}

/// `(run, position, step)` for every decode of every trace; `run` is the
/// index of the trace in the input.
pub fn decode_order_map(traces: &[&DecodeTrace]) -> Result<AnalysisReport> {
    if traces.is_empty() {
        return Err(Error::Input("no traces given".into()));
    }
    let mut report = AnalysisReport::new(ReportKind::DecodeOrder, &["run", "position", "step"]);
    for (run, trace) in traces.iter().enumerate() {
        for (pos, step) in trace.decode_order() {
            report.rows.push(vec![run as f64, pos as f64, step as f64]);
        }
    }
    report.annotations.push(
        "reference (8B instruct model): confidence-ordered decoding traces a U shape, small sigma approaches left-to-right"
            .into(),
    );
    Ok(report)
}
