//! Run configuration: a TOML file with `[model]`, `[decode]` and `[run]`
//! sections, plus `section.field=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use d2cache::decoder::random_prompt;
use d2cache::{
    CachePolicy, CertaintyParams, DecodeConfig, MaskedUpdate, ModelConfig, RolloutParams, Strategy,
    TokenId,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ConfidenceNar,
    #[default]
    CertaintyPrior,
    SemiArBlock,
    RandomOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Vanilla,
    #[default]
    D2cache,
    BlockCache,
    IntervalRefresh,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::ConfidenceNar,
        StrategyKind::CertaintyPrior,
        StrategyKind::SemiArBlock,
        StrategyKind::RandomOrder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::ConfidenceNar => "confidence_nar",
            StrategyKind::CertaintyPrior => "certainty_prior",
            StrategyKind::SemiArBlock => "semi_ar_block",
            StrategyKind::RandomOrder => "random_order",
        }
    }
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Vanilla,
        PolicyKind::D2cache,
        PolicyKind::BlockCache,
        PolicyKind::IntervalRefresh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Vanilla => "vanilla",
            PolicyKind::D2cache => "d2cache",
            PolicyKind::BlockCache => "block_cache",
            PolicyKind::IntervalRefresh => "interval_refresh",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown policy `{s}`"))
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub strategy: StrategyKind,
    pub policy: PolicyKind,
    pub sigma: f64,
    pub k: usize,
    pub p: f64,
    pub masked_update: MaskedUpdate,
    /// Used by `semi_ar_block` and `block_cache`.
    pub block_size: usize,
    pub prompt_interval: usize,
    pub response_interval: usize,
    pub tokens_per_step: usize,
    /// Defaults to `gen_len / tokens_per_step`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub scheduler_seed: u64,
    pub uniform_confidence: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::default(),
            policy: PolicyKind::default(),
            sigma: 10.0,
            k: 32,
            p: 0.1,
            masked_update: MaskedUpdate::default(),
            block_size: 32,
            prompt_interval: 25,
            response_interval: 5,
            tokens_per_step: 1,
            steps: None,
            scheduler_seed: 0,
            uniform_confidence: false,
        }
    }
}

/// Either explicit token ids or `random:<len>:<seed>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptSpec {
    Tokens(Vec<TokenId>),
    Text(String),
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec::Text("random:16:0".into())
    }
}

impl PromptSpec {
    fn parse_random(s: &str) -> Result<(usize, u64), CliError> {
        let bad = || {
            CliError::Validation(format!(
                "run.prompt must be a token list or `random:<len>:<seed>`, got `{s}`"
            ))
        };
        let mut parts = s.split(':');
        if parts.next() != Some("random") {
            return Err(bad());
        }
        let len = parts.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        let seed = parts.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok((len, seed))
    }

    pub fn resolve(&self, model: &ModelConfig) -> Result<Vec<TokenId>, CliError> {
        match self {
            PromptSpec::Tokens(t) => Ok(t.clone()),
            PromptSpec::Text(s) => {
                let (len, seed) = Self::parse_random(s)?;
                Ok(random_prompt(len, seed, model.vocab_size, model.mask_token_id))
            }
        }
    }

    /// Replaces the seed of a random prompt; explicit token lists are kept.
    pub fn with_seed(&self, seed: u64) -> Self {
        match self {
            PromptSpec::Text(s) => match Self::parse_random(s) {
                Ok((len, _)) => PromptSpec::Text(format!("random:{len}:{seed}")),
                Err(_) => self.clone(),
            },
            PromptSpec::Tokens(_) => self.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub prompt: PromptSpec,
    pub gen_len: usize,
    pub run_id: String,
    pub out_dir: PathBuf,
    pub snapshot_positions: Vec<usize>,
    pub record_rollout_matrix: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            prompt: PromptSpec::default(),
            gen_len: 32,
            run_id: "run".into(),
            out_dir: PathBuf::from("out"),
            snapshot_positions: Vec::new(),
            record_rollout_matrix: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub decode: DecodeSection,
    pub run: RunSection,
}

impl RunConfig {
    /// Reads an optional TOML file, applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>().map_err(|e| {
                    CliError::Validation(format!("cannot parse config {}: {e}", p.display()))
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| CliError::Validation(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Config with every derived default filled in.
    pub fn effective(&self) -> Self {
        let mut cfg = self.clone();
        cfg.decode.steps = Some(self.steps());
        cfg
    }

    pub fn steps(&self) -> usize {
        self.decode
            .steps
            .unwrap_or(self.run.gen_len / self.decode.tokens_per_step.max(1))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |msg: String| Err(CliError::Validation(msg));
        self.model
            .validate()
            .map_err(|e| CliError::Validation(format!("model: {}", strip(&e))))?;
        let d = &self.decode;
        if !(d.sigma > 0.0 && d.sigma.is_finite()) {
            return invalid(format!("decode.sigma must be positive and finite, got {}", d.sigma));
        }
        if d.k == 0 {
            return invalid("decode.k must be at least 1".into());
        }
        if !(d.p > 0.0 && d.p <= 1.0) {
            return invalid(format!("decode.p must lie in (0, 1], got {}", d.p));
        }
        if d.tokens_per_step == 0 {
            return invalid("decode.tokens_per_step must be at least 1".into());
        }
        let r = &self.run;
        if r.gen_len == 0 {
            return invalid("run.gen_len must be at least 1".into());
        }
        if d.steps.is_none() && !r.gen_len.is_multiple_of(d.tokens_per_step) {
            return invalid(format!(
                "decode.tokens_per_step {} must divide run.gen_len {}",
                d.tokens_per_step, r.gen_len
            ));
        }
        if r.run_id.is_empty()
            || !r
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return invalid(format!(
                "run.run_id must be non-empty and use only [A-Za-z0-9._-], got `{}`",
                r.run_id
            ));
        }
        let prompt = self.prompt()?;
        if let Some(t) = prompt
            .iter()
            .find(|&&t| t as usize >= self.model.vocab_size || t == self.model.mask_token_id)
        {
            return invalid(format!(
                "run.prompt token {t} must be below model.vocab_size and differ from model.mask_token_id"
            ));
        }
        let len = prompt.len() + r.gen_len;
        if len > self.model.max_len {
            return invalid(format!(
                "run.gen_len: sequence length {len} exceeds model.max_len {}",
                self.model.max_len
            ));
        }
        if let Some(p) = r.snapshot_positions.iter().find(|&&p| p >= len) {
            return invalid(format!("run.snapshot_positions: {p} is outside 0..{len}"));
        }
        self.decode_config()
            .validate(r.gen_len)
            .map_err(|e| CliError::Validation(format!("decode: {}", strip(&e))))
    }

    pub fn prompt(&self) -> Result<Vec<TokenId>, CliError> {
        self.run.prompt.resolve(&self.model)
    }

    pub fn strategy(&self) -> Strategy {
        let d = &self.decode;
        match d.strategy {
            StrategyKind::ConfidenceNar => Strategy::ConfidenceNar,
            StrategyKind::CertaintyPrior => Strategy::CertaintyPrior { sigma: d.sigma },
            StrategyKind::SemiArBlock => Strategy::SemiArBlock {
                block_size: d.block_size,
            },
            StrategyKind::RandomOrder => Strategy::RandomOrder {
                seed: d.scheduler_seed,
            },
        }
    }

    pub fn cache_policy(&self) -> CachePolicy {
        let d = &self.decode;
        match d.policy {
            PolicyKind::Vanilla => CachePolicy::Vanilla,
            PolicyKind::D2cache => CachePolicy::D2Cache {
                certainty: CertaintyParams {
                    sigma: d.sigma,
                    k: d.k,
                },
                rollout: RolloutParams { p: d.p },
                masked_update: d.masked_update,
            },
            PolicyKind::BlockCache => CachePolicy::BlockCache {
                block_size: d.block_size,
            },
            PolicyKind::IntervalRefresh => CachePolicy::IntervalRefresh {
                prompt_interval: d.prompt_interval,
                response_interval: d.response_interval,
            },
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        let mut cfg = DecodeConfig::new(self.strategy(), self.cache_policy(), self.run.gen_len);
        cfg.tokens_per_step = self.decode.tokens_per_step;
        cfg.steps = self.steps();
        cfg.uniform_confidence = self.decode.uniform_confidence;
        cfg.trace.snapshot_positions = self.run.snapshot_positions.clone();
        cfg.trace.record_rollout_matrix = self.run.record_rollout_matrix;
        cfg
    }
}

fn strip(e: &d2cache::Error) -> String {
    match e {
        d2cache::Error::Config(m) | d2cache::Error::Input(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Applies `section.field=value`; the value is read as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| {
        CliError::Validation(format!("override `{spec}` must look like section.field=value"))
    })?;
    let (section, field) = key.trim().split_once('.').ok_or_else(|| {
        CliError::Validation(format!("override key `{key}` must look like section.field"))
    })?;
    if !matches!(section, "model" | "decode" | "run") {
        return Err(CliError::Validation(format!(
            "unknown config section `{section}` in override `{spec}`"
        )));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let section_table = entry.as_table_mut().ok_or_else(|| {
        CliError::Validation(format!("config entry `{section}` must be a section"))
    })?;
    section_table.insert(field.to_string(), value);
    Ok(())
}
