//! Iterative unmasking loop with pluggable decoding strategies and cache
//! policies.
//!
//! Each step plans a query set, runs a (partial) forward pass, commits the
//! fresh K/V states, predicts tokens for the masked positions that were
//! queried, unmasks `m` of them, and finally lets the cache policy choose
//! what to recompute next.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::KVCache;
use crate::model::{ForwardOutput, Model, TokenId};
use crate::selection::{
    attention_rollout, certainty_density, rank_descending, select_masked_topk, select_remaining,
    CertaintyParams, RolloutParams, RolloutState, SelectionOutcome,
};
use crate::tensor::Real;
use crate::trace::{DecodeTrace, DecodedToken, StepRecord};

/// Sigma used for the prior column of traces when no strategy or policy
/// supplies one.
pub const DEFAULT_SIGMA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Highest prediction confidence first.
    ConfidenceNar,
    /// Highest `D(i) * s_i` first.
    CertaintyPrior { sigma: f64 },
    /// Confidence order inside the lowest block that still has masks.
    SemiArBlock { block_size: usize },
    /// Uniform draws from a seeded stream.
    RandomOrder { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskedUpdate {
    /// Recompute only the top-`k` masked positions by certainty prior.
    #[default]
    PriorTopk,
    /// Recompute every masked position each step.
    AllMasked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CachePolicy {
    /// Full recompute every step.
    Vanilla,
    /// Two-stage adaptive selection.
    D2Cache {
        certainty: CertaintyParams,
        rollout: RolloutParams,
        masked_update: MaskedUpdate,
    },
    /// Recompute the active block and everything still masked after it;
    /// refresh all positions once a block completes.
    BlockCache { block_size: usize },
    /// Refresh the prompt every `prompt_interval` steps and the response
    /// every `response_interval` steps. Masked positions are always queried.
    IntervalRefresh {
        prompt_interval: usize,
        response_interval: usize,
    },
}

impl CachePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            CachePolicy::Vanilla => "vanilla",
            CachePolicy::D2Cache { .. } => "d2cache",
            CachePolicy::BlockCache { .. } => "block_cache",
            CachePolicy::IntervalRefresh { .. } => "interval_refresh",
        }
    }
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::ConfidenceNar => "confidence_nar",
            Strategy::CertaintyPrior { .. } => "certainty_prior",
            Strategy::SemiArBlock { .. } => "semi_ar_block",
            Strategy::RandomOrder { .. } => "random_order",
        }
    }
}

/// Optional data captured into the trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    /// Keep logits of every queried position (in memory only).
    pub capture_logits: bool,
    /// Positions whose layer-averaged K/V are snapshotted after each commit.
    pub snapshot_positions: Vec<usize>,
    /// Store the full rollout matrix alongside the influence vector.
    pub record_rollout_matrix: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub cache_policy: CachePolicy,
    /// `m`, tokens unmasked per step.
    pub tokens_per_step: usize,
    /// `T`; `tokens_per_step * steps` must equal the generation length.
    pub steps: usize,
    /// Test hook: every confidence is replaced by 1.
    pub uniform_confidence: bool,
    pub trace: TraceOptions,
}

impl DecodeConfig {
    pub fn new(strategy: Strategy, cache_policy: CachePolicy, gen_len: usize) -> Self {
        Self {
            strategy,
            cache_policy,
            tokens_per_step: 1,
            steps: gen_len,
            uniform_confidence: false,
            trace: TraceOptions::default(),
        }
    }

    pub fn validate(&self, gen_len: usize) -> Result<()> {
        let m = self.tokens_per_step;
        if m == 0 {
            return Err(Error::Config("tokens_per_step must be at least 1".into()));
        }
        if m * self.steps != gen_len {
            return Err(Error::Config(format!(
                "tokens_per_step * steps must equal gen_len ({m} * {} != {gen_len})",
                self.steps
            )));
        }
        match &self.strategy {
            Strategy::CertaintyPrior { sigma } if !(*sigma > 0.0) => {
                return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
            }
            Strategy::SemiArBlock { block_size } => {
                check_block(*block_size, gen_len)?;
                if block_size % m != 0 {
                    return Err(Error::Config(format!(
                        "block_size {block_size} must be a multiple of tokens_per_step {m}"
                    )));
                }
            }
            _ => {}
        }
        match &self.cache_policy {
            CachePolicy::D2Cache {
                certainty, rollout, ..
            } => {
                certainty.validate()?;
                rollout.validate()?;
            }
            CachePolicy::BlockCache { block_size } => check_block(*block_size, gen_len)?,
            CachePolicy::IntervalRefresh {
                prompt_interval,
                response_interval,
            } => {
                if *prompt_interval == 0 || *response_interval == 0 {
                    return Err(Error::Config(
                        "refresh intervals prompt_interval and response_interval must be positive".into(),
                    ));
                }
            }
            CachePolicy::Vanilla => {}
        }
        Ok(())
    }

    /// Sigma used for density-weighted scores outside of stage-1 selection.
    fn display_sigma(&self) -> f64 {
        match (&self.strategy, &self.cache_policy) {
            (Strategy::CertaintyPrior { sigma }, _) => *sigma,
            (_, CachePolicy::D2Cache { certainty, .. }) => certainty.sigma,
            _ => DEFAULT_SIGMA,
        }
    }
}

fn check_block(block_size: usize, gen_len: usize) -> Result<()> {
    if block_size == 0 || !gen_len.is_multiple_of(block_size) {
        return Err(Error::Config(format!(
            "block_size {block_size} must be positive and divide gen_len {gen_len}"
        )));
    }
    Ok(())
}

/// Token sequence `y_t` together with its masked index set.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub gen_len: usize,
    /// Sorted masked positions `M_t`.
    pub masked: Vec<usize>,
    pub step: usize,
    pub total_steps: usize,
}

impl SequenceState {
    pub fn new(prompt: &[TokenId], gen_len: usize, mask_token_id: TokenId, total_steps: usize) -> Self {
        let mut tokens = prompt.to_vec();
        tokens.extend(std::iter::repeat_n(mask_token_id, gen_len));
        Self {
            tokens,
            prompt_len: prompt.len(),
            gen_len,
            masked: (prompt.len()..prompt.len() + gen_len).collect(),
            step: 0,
            total_steps,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_done(&self) -> bool {
        self.masked.is_empty()
    }

    fn unmask(&mut self, decoded: &[DecodedToken]) {
        for d in decoded {
            self.tokens[d.position] = d.token;
        }
        self.masked
            .retain(|p| decoded.binary_search_by_key(p, |d| d.position).is_err());
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub predictions: Vec<Prediction>,
    /// Step whose forward pass produced these predictions.
    pub freshness: usize,
}

/// Argmax token (lowest id among ties) and its softmax probability for each
/// requested position.
pub fn predict<T: Real>(
    out: &ForwardOutput<T>,
    positions: &[usize],
    step: usize,
) -> Result<PredictionSet> {
    let predictions = positions
        .iter()
        .map(|&pos| {
            let row = out.row_of(pos).ok_or_else(|| {
                Error::Input(format!("position {pos} was not queried in this forward pass"))
            })?;
            let logits = out.logits.row(row);
            let (mut best, mut best_val) = (0usize, logits[0].as_f64());
            for (id, l) in logits.iter().enumerate().skip(1) {
                if l.as_f64() > best_val {
                    best = id;
                    best_val = l.as_f64();
                }
            }
            let partition: f64 = logits.iter().map(|l| (l.as_f64() - best_val).exp()).sum();
            Ok(Prediction {
                position: pos,
                token: best as TokenId,
                confidence: 1.0 / partition,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionSet {
        predictions,
        freshness: step,
    })
}

/// Masked positions that may be decoded this step, with their scores.
#[derive(Debug, Clone, Copy)]
pub struct Eligible<'a> {
    pub positions: &'a [usize],
    pub confidence: &'a [f64],
    pub density: &'a [f64],
}

/// Picks `min(m, |eligible|)` positions to unmask. `active_block` restricts
/// semi-autoregressive decoding to one block.
pub fn schedule_decode<R: Rng>(
    strategy: &Strategy,
    eligible: Eligible<'_>,
    m: usize,
    active_block: Option<Range<usize>>,
    rng: &mut R,
    step: usize,
) -> Result<Vec<usize>> {
    let mut positions = Vec::new();
    let mut confidence = Vec::new();
    let mut density = Vec::new();
    for (n, &p) in eligible.positions.iter().enumerate() {
        if active_block.as_ref().is_none_or(|b| b.contains(&p)) {
            positions.push(p);
            confidence.push(eligible.confidence[n]);
            density.push(eligible.density[n]);
        }
    }
    if positions.is_empty() {
        return Err(Error::Deadlock {
            step,
            masked: eligible.positions.len(),
        });
    }
    let take = m.min(positions.len());
    let mut chosen: Vec<usize> = match strategy {
        Strategy::ConfidenceNar | Strategy::SemiArBlock { .. } => {
            rank_descending(&positions, &confidence).into_iter().take(take).collect()
        }
        Strategy::CertaintyPrior { .. } => {
            let prior: Vec<f64> = density.iter().zip(&confidence).map(|(d, s)| d * s).collect();
            rank_descending(&positions, &prior).into_iter().take(take).collect()
        }
        Strategy::RandomOrder { .. } => rand::seq::index::sample(rng, positions.len(), take)
            .into_iter()
            .map(|i| positions[i])
            .collect(),
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// Response block `[start, end)` holding the lowest masked position.
pub fn active_block(masked: &[usize], prompt_len: usize, block_size: usize) -> Option<Range<usize>> {
    let first = *masked.first()?;
    let b = (first - prompt_len) / block_size;
    let start = prompt_len + b * block_size;
    Some(start..start + block_size)
}

/// Uniform prompt tokens that avoid the mask id.
pub fn random_prompt(len: usize, seed: u64, vocab_size: usize, mask_token_id: TokenId) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let t = rng.random_range(0..vocab_size as TokenId - 1);
            if t >= mask_token_id {
                t + 1
            } else {
                t
            }
        })
        .collect()
}

/// One generation run: owns the sequence, the cache and the carried
/// selection.
pub struct Decoder<'m, T> {
    model: &'m Model<T>,
    config: DecodeConfig,
    state: SequenceState,
    cache: KVCache<T>,
    carry: Option<SelectionOutcome>,
    refresh_pending: bool,
    /// Most recent confidence of every position, if it was ever predicted.
    last_confidence: Vec<Option<f64>>,
    rng: ChaCha8Rng,
    records: Vec<StepRecord>,
}

impl<'m, T: Real> Decoder<'m, T> {
    pub fn new(model: &'m Model<T>, prompt: &[TokenId], gen_len: usize, config: DecodeConfig) -> Result<Self> {
        config.validate(gen_len)?;
        let mcfg = model.config();
        let len = prompt.len() + gen_len;
        if gen_len == 0 {
            return Err(Error::Config("gen_len must be positive".into()));
        }
        if len > mcfg.max_len {
            return Err(Error::Config(format!(
                "prompt length {} plus gen_len {gen_len} exceeds max_len {}",
                prompt.len(),
                mcfg.max_len
            )));
        }
        if let Some(t) = prompt
            .iter()
            .find(|&&t| t as usize >= mcfg.vocab_size || t == mcfg.mask_token_id)
        {
            return Err(Error::Input(format!("prompt token {t} is invalid or the mask id")));
        }
        if let Some(&p) = config.trace.snapshot_positions.iter().find(|&&p| p >= len) {
            return Err(Error::Config(format!("snapshot position {p} outside sequence of length {len}")));
        }
        let seed = match config.strategy {
            Strategy::RandomOrder { seed } => seed,
            _ => 0,
        };
        Ok(Self {
            model,
            state: SequenceState::new(prompt, gen_len, mcfg.mask_token_id, config.steps),
            cache: model.new_cache(len)?,
            carry: None,
            refresh_pending: false,
            last_confidence: vec![None; len],
            rng: ChaCha8Rng::seed_from_u64(seed),
            records: Vec::with_capacity(config.steps),
            config,
        })
    }

    pub fn state(&self) -> &SequenceState {
        &self.state
    }

    pub fn cache(&self) -> &KVCache<T> {
        &self.cache
    }

    #[doc(hidden)]
    pub fn cache_mut(&mut self) -> &mut KVCache<T> {
        &mut self.cache
    }

    pub fn carry(&self) -> Option<&SelectionOutcome> {
        self.carry.as_ref()
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    fn strategy_block(&self) -> Option<Range<usize>> {
        match self.config.strategy {
            Strategy::SemiArBlock { block_size } => {
                active_block(&self.state.masked, self.state.prompt_len, block_size)
            }
            _ => None,
        }
    }

    fn plan_query(&self) -> Vec<usize> {
        let len = self.state.len();
        let t = self.state.step;
        let all = || (0..len).collect::<Vec<_>>();
        if t == 0 {
            return all();
        }
        match &self.config.cache_policy {
            CachePolicy::Vanilla => all(),
            CachePolicy::D2Cache { .. } => self.carry.as_ref().map(|c| c.query_set()).unwrap_or_else(all),
            CachePolicy::BlockCache { block_size } => {
                if self.refresh_pending {
                    return all();
                }
                match active_block(&self.state.masked, self.state.prompt_len, *block_size) {
                    Some(block) => {
                        let end = block.end;
                        block
                            .chain(self.state.masked.iter().copied().filter(|&p| p >= end))
                            .collect()
                    }
                    None => all(),
                }
            }
            CachePolicy::IntervalRefresh {
                prompt_interval,
                response_interval,
            } => {
                let mut q = Vec::new();
                if t.is_multiple_of(*prompt_interval) {
                    q.extend(0..self.state.prompt_len);
                }
                if t.is_multiple_of(*response_interval) {
                    q.extend(self.state.prompt_len..len);
                } else {
                    q.extend(self.state.masked.iter().copied());
                }
                q.sort_unstable();
                q.dedup();
                q
            }
        }
    }

    /// Runs one decoding step and returns its trace record.
    pub fn step(&mut self) -> Result<&StepRecord> {
        if self.state.is_done() {
            return Err(Error::State("no masked positions left".into()));
        }
        let t = self.state.step;
        let len = self.state.len();
        let m = self.config.tokens_per_step;
        let sigma = self.config.display_sigma();

        let density_all = certainty_density(&self.state.masked, len, sigma)?;
        let density_of = |pos: usize, masked: &[usize]| -> f64 {
            density_all[masked.binary_search(&pos).expect("masked position")]
        };

        // Never decode from stale logits: if too few decodable masked
        // positions are queried, pull the densest ones in now.
        let mut query = self.plan_query();
        let block = self.strategy_block();
        let decodable: Vec<usize> = self
            .state
            .masked
            .iter()
            .copied()
            .filter(|p| block.as_ref().is_none_or(|b| b.contains(p)))
            .collect();
        let need = m.min(decodable.len());
        let have = decodable.iter().filter(|p| query.binary_search(p).is_ok()).count();
        let mut fallback = Vec::new();
        if have < need {
            let missing: Vec<usize> = decodable
                .iter()
                .copied()
                .filter(|p| query.binary_search(p).is_err())
                .collect();
            let dens: Vec<f64> = missing.iter().map(|&p| density_of(p, &self.state.masked)).collect();
            fallback = rank_descending(&missing, &dens).into_iter().take(need - have).collect();
            fallback.sort_unstable();
            query.extend(&fallback);
            query.sort_unstable();
        }

        let out = match (&self.config.cache_policy, t) {
            (_, 0) | (CachePolicy::Vanilla, _) => self.model.full_forward(&self.state.tokens)?,
            _ => self.model.partial_forward(&self.state.tokens, &query, &self.cache)?,
        };
        self.cache.commit(t, &out)?;

        let masked_in_query: Vec<usize> = self
            .state
            .masked
            .iter()
            .copied()
            .filter(|p| query.binary_search(p).is_ok())
            .collect();
        let mut preds = predict(&out, &masked_in_query, t)?;
        if self.config.uniform_confidence {
            preds.predictions.iter_mut().for_each(|p| p.confidence = 1.0);
        }
        for p in &preds.predictions {
            self.last_confidence[p.position] = Some(p.confidence);
        }

        let confidence: Vec<f64> = preds.predictions.iter().map(|p| p.confidence).collect();
        let density: Vec<f64> = masked_in_query
            .iter()
            .map(|&p| density_of(p, &self.state.masked))
            .collect();
        let chosen = schedule_decode(
            &self.config.strategy,
            Eligible {
                positions: &masked_in_query,
                confidence: &confidence,
                density: &density,
            },
            m,
            block,
            &mut self.rng,
            t,
        )?;
        let decoded: Vec<DecodedToken> = chosen
            .iter()
            .map(|&pos| {
                let n = masked_in_query.binary_search(&pos).expect("chosen from eligible");
                DecodedToken {
                    position: pos,
                    token: preds.predictions[n].token,
                    confidence: confidence[n],
                    prior: density[n] * confidence[n],
                }
            })
            .collect();

        let block_before = match self.config.cache_policy {
            CachePolicy::BlockCache { block_size } => {
                active_block(&self.state.masked, self.state.prompt_len, block_size)
            }
            _ => None,
        };
        self.state.unmask(&decoded);
        if let Some(b) = block_before {
            self.refresh_pending = !self.state.masked.iter().any(|p| b.contains(p));
        }

        let mut record = StepRecord {
            step: t,
            decoded,
            query_size: query.len(),
            query_positions: query,
            fallback,
            ..StepRecord::default()
        };

        if let CachePolicy::D2Cache {
            certainty,
            rollout,
            masked_update,
        } = self.config.cache_policy
        {
            let (outcome, rollout_state) =
                self.select_next(&out, &record, certainty, rollout, masked_update)?;
            record.m_star = outcome.m_star.clone();
            record.u = outcome.u.clone();
            record.forced = outcome.forced.clone();
            record.influence = outcome.influence_used.clone();
            if self.config.trace.record_rollout_matrix {
                let c = &rollout_state.cumulative;
                record.rollout_matrix = Some((0..len).map(|i| c.row(i).to_vec()).collect());
            }
            self.carry = Some(outcome);
        }

        if self.config.trace.capture_logits {
            record.logits = Some(
                out.query_positions
                    .iter()
                    .enumerate()
                    .map(|(r, &p)| (p, out.logits.row(r).iter().map(|x| x.as_f64()).collect()))
                    .collect(),
            );
        }
        if !self.config.trace.snapshot_positions.is_empty() {
            record.snapshots = Some(self.cache.snapshot(t, &self.config.trace.snapshot_positions)?);
        }

        self.state.step += 1;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    fn select_next(
        &self,
        out: &ForwardOutput<T>,
        record: &StepRecord,
        certainty: CertaintyParams,
        rollout: RolloutParams,
        masked_update: MaskedUpdate,
    ) -> Result<(SelectionOutcome, RolloutState)> {
        let len = self.state.len();
        let masked = &self.state.masked;
        let density = certainty_density(masked, len, certainty.sigma)?;
        let confidence: Vec<f64> = masked
            .iter()
            .map(|&p| self.last_confidence[p].unwrap_or(0.0))
            .collect();
        let (top, prior_scores) = select_masked_topk(masked, &density, &confidence, certainty.k)?;
        let m_star = match masked_update {
            MaskedUpdate::PriorTopk => top,
            MaskedUpdate::AllMasked => masked.clone(),
        };

        let attn: Vec<_> = out.attention.iter().map(|a| a.map(|x| x.as_f64())).collect();
        let state = attention_rollout(&attn, &out.query_positions, len)?;
        let candidates: Vec<usize> = (0..len).filter(|p| m_star.binary_search(p).is_err()).collect();
        let u = select_remaining(&state.influence, &candidates, rollout.p)?;

        let outcome = SelectionOutcome {
            m_star,
            u,
            prior_scores,
            influence_used: Some(state.influence.clone()),
            forced: record.decoded.iter().map(|d| d.position).collect(),
        };
        Ok((outcome, state))
    }

    /// Finishes the run and hands back the trace.
    pub fn into_trace(self) -> DecodeTrace {
        DecodeTrace {
            prompt_len: self.state.prompt_len,
            gen_len: self.state.gen_len,
            len: self.state.len(),
            steps: self.records,
            final_tokens: self.state.tokens,
            stats: self.cache.stats().clone(),
        }
    }
}

/// Runs all `T` steps and returns the final tokens with the full trace.
pub fn generate<T: Real>(
    model: &Model<T>,
    prompt: &[TokenId],
    gen_len: usize,
    config: DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    let steps = config.steps;
    let mut decoder = Decoder::new(model, prompt, gen_len, config)?;
    for _ in 0..steps {
        decoder.step()?;
    }
    if !decoder.state().is_done() {
        return Err(Error::State(format!(
            "{} positions still masked after {steps} steps",
            decoder.state().masked.len()
        )));
    }
    let trace = decoder.into_trace();
    Ok((trace.final_tokens.clone(), trace))
}
