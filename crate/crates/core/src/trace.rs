//! Per-step decode records and their line-delimited JSON form.
//!
//! A trace file holds one `{"type":"step",...}` line per decoding step
//! followed by a single `{"type":"summary",...}` line. Real-valued payloads
//! are written with 9 significant digits.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{CacheStats, KVSnapshot};
use crate::model::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedToken {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
    /// `D(i) * s_i` at decode time.
    pub prior: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// `I_t`, sorted by position.
    pub decoded: Vec<DecodedToken>,
    /// `Q_t`, the positions recomputed this step.
    pub query_positions: Vec<usize>,
    pub query_size: usize,
    /// Masked positions pulled into `Q_t` so that decoding had fresh logits.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback: Vec<usize>,
    /// Selection made at this step for the next one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub m_star: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub u: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forced: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub influence: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<Vec<KVSnapshot>>,
    /// `(position, logits)` for every queried position; never serialized.
    #[serde(skip)]
    pub logits: Option<Vec<(usize, Vec<f64>)>>,
}

impl StepRecord {
    pub fn decoded_positions(&self) -> Vec<usize> {
        self.decoded.iter().map(|d| d.position).collect()
    }

    fn rounded(&self) -> StepRecord {
        let round_all = |v: &[f64]| v.iter().map(|&x| round_sig9(x)).collect::<Vec<_>>();
        StepRecord {
            decoded: self
                .decoded
                .iter()
                .map(|d| DecodedToken {
                    confidence: round_sig9(d.confidence),
                    prior: round_sig9(d.prior),
                    ..*d
                })
                .collect(),
            influence: self.influence.as_deref().map(round_all),
            rollout_matrix: self
                .rollout_matrix
                .as_ref()
                .map(|m| m.iter().map(|r| round_all(r)).collect()),
            snapshots: self.snapshots.as_ref().map(|s| {
                s.iter()
                    .map(|k| KVSnapshot {
                        key: round_all(&k.key),
                        value: round_all(&k.value),
                        ..k.clone()
                    })
                    .collect()
            }),
            logits: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub final_tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub len: usize,
    pub steps: usize,
    pub total_position_updates: usize,
    pub full_recompute_equivalent: usize,
    pub savings_ratio: f64,
    pub per_step_query_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TraceLine {
    Step(StepRecord),
    Summary(TraceSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub len: usize,
    pub steps: Vec<StepRecord>,
    pub final_tokens: Vec<TokenId>,
    pub stats: CacheStats,
}

impl DecodeTrace {
    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            final_tokens: self.final_tokens.clone(),
            prompt_len: self.prompt_len,
            gen_len: self.gen_len,
            len: self.len,
            steps: self.steps.len(),
            total_position_updates: self.stats.total_position_updates,
            full_recompute_equivalent: self.stats.full_recompute_equivalent,
            savings_ratio: round_sig9(self.stats.savings_ratio()),
            per_step_query_sizes: self.stats.per_step_query_sizes.clone(),
        }
    }

    /// `(position, step)` for every decoded token, in decode order.
    pub fn decode_order(&self) -> Vec<(usize, usize)> {
        self.steps
            .iter()
            .flat_map(|s| s.decoded.iter().map(move |d| (d.position, s.step)))
            .collect()
    }

    pub fn influence_vectors(&self) -> Vec<(usize, &[f64])> {
        self.steps
            .iter()
            .filter_map(|s| s.influence.as_deref().map(|c| (s.step, c)))
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            let line = serde_json::to_string(&TraceLine::Step(s.rounded()))
                .map_err(|e| Error::Io(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        let line = serde_json::to_string(&TraceLine::Summary(self.summary()))
            .map_err(|e| Error::Io(e.to_string()))?;
        writeln!(w, "{line}")?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut steps = Vec::new();
        let mut summary = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(Error::Input(format!("line {}: record after summary", n + 1)));
            }
            match serde_json::from_str::<TraceLine>(&line)
                .map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))?
            {
                TraceLine::Step(s) => steps.push(s),
                TraceLine::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or_else(|| Error::Input("trace has no summary record".into()))?;
        Ok(DecodeTrace {
            prompt_len: summary.prompt_len,
            gen_len: summary.gen_len,
            len: summary.len,
            steps,
            final_tokens: summary.final_tokens,
            stats: CacheStats {
                total_position_updates: summary.total_position_updates,
                per_step_query_sizes: summary.per_step_query_sizes,
                full_recompute_equivalent: summary.full_recompute_equivalent,
            },
        })
    }
}

/// Rounds to 9 significant decimal digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}
