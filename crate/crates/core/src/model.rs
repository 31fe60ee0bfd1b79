//! Small deterministic bidirectional transformer.
//!
//! Pre-norm blocks (RMS norm with learned gains), multi-head attention with
//! no causal mask, a GELU MLP with expansion 4, and an untied output head.
//! Absolute sinusoidal position signals are added at the embedding, indexed
//! by absolute position, so any subset of positions can be recomputed on
//! its own while the rest of the sequence is served from a [`KVCache`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::KVCache;
use crate::tensor::{vec_mat, vec_mat_into, Matrix, Real};

pub type TokenId = u32;

/// Standard deviation of every initialized weight.
pub const INIT_SCALE: f64 = 0.02;
const NORM_EPS: f64 = 1e-6;
const MLP_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn byte_width(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// Includes the reserved mask token.
    pub vocab_size: usize,
    pub mask_token_id: TokenId,
    pub max_len: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Test hook: when false the sinusoidal position signal is omitted.
    pub position_signal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_head: 16,
            vocab_size: 64,
            mask_token_id: 63,
            max_len: 256,
            seed: 0,
            precision: Precision::F32,
            position_signal: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads * d_head must equal d_model ({} * {} != {})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.mask_token_id as usize >= self.vocab_size {
            return Err(Error::Config(format!(
                "mask_token_id {} must be below vocab_size {}",
                self.mask_token_id, self.vocab_size
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must leave room for at least one non-mask token".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block<T> {
    attn_gain: Vec<T>,
    wq: Matrix<T>,
    wk: Matrix<T>,
    wv: Matrix<T>,
    wo: Matrix<T>,
    mlp_gain: Vec<T>,
    w_up: Matrix<T>,
    w_down: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    embedding: Matrix<T>,
    blocks: Vec<Block<T>>,
    final_gain: Vec<T>,
    head: Matrix<T>,
}

/// Result of a forward pass over a set of query positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// `|Q| × vocab_size`.
    pub logits: Matrix<T>,
    /// Per layer, head-averaged attention `|Q| × L`.
    pub attention: Vec<Matrix<T>>,
    /// Per layer, `|Q| × d_model` keys computed in this pass.
    pub fresh_keys: Vec<Matrix<T>>,
    pub fresh_values: Vec<Matrix<T>>,
    /// Sorted absolute positions; row `r` of every matrix above belongs to
    /// `query_positions[r]`.
    pub query_positions: Vec<usize>,
}

impl<T> ForwardOutput<T> {
    pub fn row_of(&self, position: usize) -> Option<usize> {
        self.query_positions.binary_search(&position).ok()
    }
}

impl<T: Real> Model<T> {
    /// Draws every weight from N(0, 0.02²) using a ChaCha8 stream seeded with
    /// `config.seed`; normalization gains start at 1.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_SCALE).expect("valid normal");
        let mut draw = |rows: usize, cols: usize| -> Matrix<T> {
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| T::from_f64(normal.sample(&mut rng))).collect(),
            )
        };
        let d = config.d_model;
        let embedding = draw(config.vocab_size, d);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                attn_gain: vec![T::one(); d],
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                mlp_gain: vec![T::one(); d],
                w_up: draw(d, MLP_EXPANSION * d),
                w_down: draw(MLP_EXPANSION * d, d),
            })
            .collect();
        let head = draw(d, config.vocab_size);
        Ok(Self {
            final_gain: vec![T::one(); d],
            config,
            embedding,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix<T> {
        &self.embedding
    }

    pub fn new_cache(&self, seq_len: usize) -> Result<KVCache<T>> {
        KVCache::new(self.config.n_layers, seq_len, self.config.d_model)
    }

    pub fn full_forward(&self, tokens: &[TokenId]) -> Result<ForwardOutput<T>> {
        self.check_tokens(tokens)?;
        let all: Vec<usize> = (0..tokens.len()).collect();
        self.forward(tokens, &all, None)
    }

    /// Recomputes only `query` and splices in cached K/V for every other
    /// position. The cache is read, never written.
    pub fn partial_forward(
        &self,
        tokens: &[TokenId],
        query: &[usize],
        cache: &KVCache<T>,
    ) -> Result<ForwardOutput<T>> {
        self.check_tokens(tokens)?;
        if query.is_empty() {
            return Err(Error::Input("query set is empty".into()));
        }
        if query.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("query positions must be strictly increasing".into()));
        }
        if let Some(&p) = query.iter().find(|&&p| p >= tokens.len()) {
            return Err(Error::Input(format!(
                "query position {p} outside sequence of length {}",
                tokens.len()
            )));
        }
        if cache.seq_len() != tokens.len()
            || cache.n_layers() != self.config.n_layers
            || cache.d_model() != self.config.d_model
        {
            return Err(Error::Input(format!(
                "cache shape ({} layers, {} positions, width {}) does not match model and sequence",
                cache.n_layers(),
                cache.seq_len(),
                cache.d_model()
            )));
        }
        self.forward(tokens, query, Some(cache))
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn forward(
        &self,
        tokens: &[TokenId],
        query: &[usize],
        cache: Option<&KVCache<T>>,
    ) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let (d, n_heads, d_head) = (cfg.d_model, cfg.n_heads, cfg.d_head);
        let seq_len = tokens.len();
        let q_len = query.len();
        let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
        let head_share = T::from_f64(1.0 / n_heads as f64);

        let mut hidden = Matrix::zeros(q_len, d);
        for (r, &pos) in query.iter().enumerate() {
            let row = hidden.row_mut(r);
            row.copy_from_slice(self.embedding.row(tokens[pos] as usize));
            if cfg.position_signal {
                for (c, x) in row.iter_mut().enumerate() {
                    *x = *x + T::from_f64(sinusoid(pos, c, d));
                }
            }
        }

        let mut attention = Vec::with_capacity(cfg.n_layers);
        let mut fresh_keys = Vec::with_capacity(cfg.n_layers);
        let mut fresh_values = Vec::with_capacity(cfg.n_layers);

        for (layer, block) in self.blocks.iter().enumerate() {
            let mut queries = Matrix::zeros(q_len, d);
            let mut keys = Matrix::zeros(q_len, d);
            let mut values = Matrix::zeros(q_len, d);
            for r in 0..q_len {
                let normed = rms_norm(hidden.row(r), &block.attn_gain);
                vec_mat_into(&normed, &block.wq, queries.row_mut(r));
                vec_mat_into(&normed, &block.wk, keys.row_mut(r));
                vec_mat_into(&normed, &block.wv, values.row_mut(r));
            }

            let spliced;
            let (all_k, all_v) = match cache {
                Some(c) => {
                    spliced = c.assemble(layer, query, &keys, &values)?;
                    (&spliced.0, &spliced.1)
                }
                None => (&keys, &values),
            };

            let mut avg_attn = Matrix::zeros(q_len, seq_len);
            let mut scores = vec![T::zero(); seq_len];
            for r in 0..q_len {
                let mut mixed = vec![T::zero(); d];
                for h in 0..n_heads {
                    let span = h * d_head..(h + 1) * d_head;
                    let q = &queries.row(r)[span.clone()];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &all_k.row(j)[span.clone()];
                        *s = dot(q, k) * scale;
                        max = max.max(*s);
                    }
                    let mut total = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total = total + *s;
                    }
                    let out = &mut mixed[span.clone()];
                    let attn_row = avg_attn.row_mut(r);
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = *s / total;
                        attn_row[j] = attn_row[j] + *s * head_share;
                        for (o, &v) in out.iter_mut().zip(&all_v.row(j)[span.clone()]) {
                            *o = *o + *s * v;
                        }
                    }
                }
                let projected = vec_mat(&mixed, &block.wo);
                let row = hidden.row_mut(r);
                for (x, p) in row.iter_mut().zip(projected) {
                    *x = *x + p;
                }

                let normed = rms_norm(hidden.row(r), &block.mlp_gain);
                let mut up = vec_mat(&normed, &block.w_up);
                up.iter_mut().for_each(|x| *x = gelu(*x));
                let down = vec_mat(&up, &block.w_down);
                let row = hidden.row_mut(r);
                for (x, p) in row.iter_mut().zip(down) {
                    *x = *x + p;
                }
            }

            attention.push(avg_attn);
            fresh_keys.push(keys);
            fresh_values.push(values);
        }

        let mut logits = Matrix::zeros(q_len, cfg.vocab_size);
        for r in 0..q_len {
            let normed = rms_norm(hidden.row(r), &self.final_gain);
            vec_mat_into(&normed, &self.head, logits.row_mut(r));
        }

        Ok(ForwardOutput {
            logits,
            attention,
            fresh_keys,
            fresh_values,
            query_positions: query.to_vec(),
        })
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn rms_norm<T: Real>(x: &[T], gain: &[T]) -> Vec<T> {
    let mean_sq = x.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::from_f64(x.len() as f64);
    let inv = T::one() / (mean_sq + T::from_f64(NORM_EPS)).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + T::from_f64(0.044715) * x * x * x)).tanh())
}

/// Sinusoidal position signal for dimension `dim` of absolute position `pos`.
fn sinusoid(pos: usize, dim: usize, d_model: usize) -> f64 {
    let pair = (dim / 2) as f64;
    let freq = 10000f64.powf(-2.0 * pair / d_model as f64);
    let angle = pos as f64 * freq;
    if dim.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}
