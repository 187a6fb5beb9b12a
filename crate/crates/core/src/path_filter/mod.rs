//! The FLOPs-conditioned path ranking model.
//!
//! Forward pass: token embedding + layer position code (+ block position code)
//! → stacked post-norm encoder layers with multi-head self-attention → mean
//! over positions → concat bucket embedding → FC → ReLU → FC → sigmoid.

mod metrics;
mod pairs;
mod train;

pub use metrics::{pair_accuracy, weak_detection_metrics, WeakMetrics};
pub use pairs::{build_pairs, build_pairs_unbounded, pair_loss, read_dataset, write_dataset, Pair, PairBatch, ScoredPath};
pub use train::{mean_pair_loss, pair_gradients, stratified_split, train, EpochStats, TrainConfig, TrainReport};

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_space::{Path, SearchSpace};
use crate::cost_model::{total_flops, BucketSpec, CostError};
use crate::tensor::{checkpoint, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{positional_encoding, TokenError, TokenSequence, Tokenizer, Vocabulary};

/// Paths per forward chunk; bounds tape memory.
pub(crate) const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("invalid filter config: {0}")]
    Config(String),
    #[error("checkpoint vocabulary or bucket spec does not match the search space")]
    VocabMismatch,
    #[error("no trainable pairs in dataset")]
    NoPairs,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub head_hidden: usize,
    pub use_bucket_embedding: bool,
    pub use_block_pe: bool,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            d_model: 128,
            heads: 4,
            layers: 3,
            ffn_dim: 128,
            head_hidden: 128,
            use_bucket_embedding: true,
            use_block_pe: true,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl FilterConfig {
    fn validate(&self) -> Result<(), FilterError> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(FilterError::Config(format!("d_model {} must be positive and even", self.d_model)));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(FilterError::Config(format!("{} heads do not divide d_model {}", self.heads, self.d_model)));
        }
        if self.ffn_dim == 0 || self.head_hidden == 0 {
            return Err(FilterError::Config("ffn_dim and head_hidden must be positive".into()));
        }
        Ok(())
    }
}

const LAYER_PARAMS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "ff_w1", "ff_b1", "ff_w2", "ff_b2", "ln2_g",
    "ln2_b",
];

/// Learnable parameters plus everything needed to tokenize and bucket paths.
#[derive(Debug, Clone)]
pub struct PathFilter {
    config: FilterConfig,
    space: SearchSpace,
    buckets: BucketSpec,
    tokenizer: Tokenizer,
    names: Vec<String>,
    params: Vec<Tensor>,
    positions: Tensor,
}

impl PathFilter {
    /// Freshly initialized filter, seeded by `config.init_seed`.
    pub fn new(space: &SearchSpace, buckets: &BucketSpec, config: FilterConfig) -> Result<Self, FilterError> {
        config.validate()?;
        let vocab = Vocabulary::for_space(space, buckets.num_buckets);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.d_model;
        let mut named: Vec<(String, Tensor)> = vec![
            ("token_embedding".into(), Tensor::normal(vocab.len(), d, 0.02, &mut rng)),
            ("bucket_embedding".into(), Tensor::normal(buckets.num_buckets, d, 0.02, &mut rng)),
        ];
        for l in 0..config.layers {
            for name in LAYER_PARAMS {
                let t = match name {
                    "wq" | "wk" | "wv" | "wo" => Tensor::fan_in_uniform(d, d, &mut rng),
                    "ff_w1" => Tensor::fan_in_uniform(d, config.ffn_dim, &mut rng),
                    "ff_b1" => Tensor::zeros(&[1, config.ffn_dim]),
                    "ff_w2" => Tensor::fan_in_uniform(config.ffn_dim, d, &mut rng),
                    "ln1_g" | "ln2_g" => Tensor::full(&[1, d], 1.0),
                    _ => Tensor::zeros(&[1, d]),
                };
                named.push((format!("encoder{l}.{name}"), t));
            }
        }
        named.push(("head.w1".into(), Tensor::fan_in_uniform(2 * d, config.head_hidden, &mut rng)));
        named.push(("head.b1".into(), Tensor::zeros(&[1, config.head_hidden])));
        named.push(("head.w2".into(), Tensor::fan_in_uniform(config.head_hidden, 1, &mut rng)));
        named.push(("head.b2".into(), Tensor::zeros(&[1, 1])));
        Self::assemble(space, buckets, config, vocab, named)
    }

    fn assemble(
        space: &SearchSpace,
        buckets: &BucketSpec,
        config: FilterConfig,
        vocab: Vocabulary,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, FilterError> {
        let tokenizer = Tokenizer::new(space, &vocab)?;
        let positions = position_table(&tokenizer, space.num_blocks(), config.d_model, config.use_block_pe)?;
        let (names, params) = named.into_iter().unzip();
        Ok(PathFilter { config, space: space.clone(), buckets: buckets.clone(), tokenizer, names, params, positions })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn buckets(&self) -> &BucketSpec {
        &self.buckets
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.tokenizer.vocab()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Summed position codes per sequence slot, `[L, d]`.
    pub fn position_codes(&self) -> &Tensor {
        &self.positions
    }

    pub fn bucket_of(&self, path: &Path) -> Result<usize, FilterError> {
        if !self.space.validate_path(path) {
            return Err(TokenError::InvalidPath(format!("{:?}", self.space.check_path(path))).into());
        }
        Ok(self.buckets.bucket_of(total_flops(&self.space, path))?)
    }

    pub fn tokenize(&self, path: &Path, bucket: usize) -> Result<TokenSequence, FilterError> {
        Ok(self.tokenizer.tokenize(path, bucket)?)
    }

    /// Token sequence with the bucket derived from the path's FLOPs.
    pub fn encode(&self, path: &Path) -> Result<TokenSequence, FilterError> {
        let bucket = self.bucket_of(path)?;
        self.tokenize(path, bucket)
    }

    /// Path score in (0, 1) with an explicit bucket.
    pub fn score_with_bucket(&self, path: &Path, bucket: usize) -> Result<f64, FilterError> {
        let seq = self.tokenize(path, bucket)?;
        Ok(self.score_sequences(std::slice::from_ref(&seq))?[0])
    }

    pub fn score(&self, path: &Path) -> Result<f64, FilterError> {
        let seq = self.encode(path)?;
        Ok(self.score_sequences(std::slice::from_ref(&seq))?[0])
    }

    pub fn score_paths(&self, paths: &[Path]) -> Result<Vec<f64>, FilterError> {
        let seqs = paths.iter().map(|p| self.encode(p)).collect::<Result<Vec<_>, _>>()?;
        self.score_sequences(&seqs)
    }

    pub fn score_sequences(&self, seqs: &[TokenSequence]) -> Result<Vec<f64>, FilterError> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(CHUNK) {
            let mut tape = Tape::new();
            let vars = self.param_leaves(&mut tape);
            let y = self.forward(&mut tape, &vars, chunk)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Ok(out)
    }

    pub(crate) fn param_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Scores `[N, 1]` for a batch of sequences, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], seqs: &[TokenSequence]) -> Result<Var, FilterError> {
        let d = self.config.d_model;
        let seq_len = self.tokenizer.seq_len();
        let n = seqs.len();
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.tokens.iter().copied()).collect();
        let emb = tape.embedding(p[0], &ids)?;
        let mut pos = Vec::with_capacity(n * seq_len * d);
        for _ in 0..n {
            pos.extend_from_slice(self.positions.data());
        }
        let pos = tape.leaf(Tensor::matrix(n * seq_len, d, pos)?);
        let mut x = tape.add(emb, pos)?;

        let heads = self.config.heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let eps = self.config.ln_eps;
        for l in 0..self.config.layers {
            let w = &p[2 + l * LAYER_PARAMS.len()..2 + (l + 1) * LAYER_PARAMS.len()];
            let q = affine(tape, x, w[0], w[1])?;
            let k = affine(tape, x, w[2], w[3])?;
            let v = affine(tape, x, w[4], w[5])?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
                let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
                let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
                let s = tape.group_matmul_nt(qh, kh, seq_len)?;
                let s = tape.scale(s, inv_sqrt);
                let a = tape.softmax_rows(s);
                outs.push(tape.group_matmul(a, vh, seq_len)?);
            }
            let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let att = affine(tape, cat, w[6], w[7])?;
            let r = tape.add(x, att)?;
            x = norm(tape, r, w[8], w[9], eps)?;
            let f = affine(tape, x, w[10], w[11])?;
            let f = tape.relu(f);
            let f = affine(tape, f, w[12], w[13])?;
            let r = tape.add(x, f)?;
            x = norm(tape, r, w[14], w[15], eps)?;
        }
        let pooled = tape.mean_groups(x, seq_len)?;
        let bucket = if self.config.use_bucket_embedding {
            let b: Vec<usize> = seqs.iter().map(|s| s.bucket).collect();
            tape.embedding(p[1], &b)?
        } else {
            tape.leaf(Tensor::zeros(&[n, d]))
        };
        let z = tape.concat_cols(&[pooled, bucket])?;
        let hd = p.len() - 4;
        let z = affine(tape, z, p[hd], p[hd + 1])?;
        let z = tape.relu(z);
        let z = affine(tape, z, p[hd + 2], p[hd + 3])?;
        Ok(tape.sigmoid(z))
    }

    /// Write the checkpoint (manifest line + raw payload).
    pub fn save<W: Write>(&self, w: W, extra: serde_json::Value) -> Result<(), FilterError> {
        let meta = serde_json::json!({
            "kind": "path_filter",
            "config": self.config,
            "space": self.space,
            "buckets": self.buckets,
            "vocab": self.vocab(),
            "param_count": self.param_count(),
            "extra": extra,
        });
        let named: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        checkpoint::write(w, meta, &named)?;
        Ok(())
    }

    /// Read a checkpoint; returns the filter and the `extra` metadata.
    pub fn load<R: BufRead>(r: R) -> Result<(Self, serde_json::Value), FilterError> {
        let (meta, named) = checkpoint::read(r)?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| FilterError::Checkpoint(format!("missing {k}")));
        let de_err = |e: serde_json::Error| FilterError::Checkpoint(e.to_string());
        let config: FilterConfig = serde_json::from_value(field("config")?).map_err(de_err)?;
        let space: SearchSpace = serde_json::from_value(field("space")?).map_err(de_err)?;
        let buckets: BucketSpec = serde_json::from_value(field("buckets")?).map_err(de_err)?;
        let vocab: Vocabulary = serde_json::from_value(field("vocab")?).map_err(de_err)?;
        if vocab != Vocabulary::for_space(&space, buckets.num_buckets) {
            return Err(FilterError::VocabMismatch);
        }
        let fresh = PathFilter::new(&space, &buckets, config.clone())?;
        if named.len() != fresh.params.len()
            || named.iter().zip(&fresh.params).zip(&fresh.names).any(|(((n, t), f), fname)| n != fname || t.shape() != f.shape())
        {
            return Err(FilterError::Checkpoint("parameter layout does not match config".into()));
        }
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((Self::assemble(&space, &buckets, config, vocab, named)?, extra))
    }

    /// Fails unless this filter was built for exactly `space` and `buckets`.
    pub fn check_compatible(&self, space: &SearchSpace, buckets: &BucketSpec) -> Result<(), FilterError> {
        if &self.space != space || &self.buckets != buckets {
            return Err(FilterError::VocabMismatch);
        }
        Ok(())
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm(tape: &mut Tape, x: Var, g: Var, b: Var, eps: f64) -> Result<Var, TensorError> {
    let y = tape.layer_norm(x, eps);
    let y = tape.mul_row(y, g)?;
    tape.add_row(y, b)
}

fn position_table(tk: &Tokenizer, num_blocks: usize, d: usize, with_block: bool) -> Result<Tensor, FilterError> {
    let seq_len = tk.seq_len();
    let mut data = Vec::with_capacity(seq_len * d);
    for (l, &b) in tk.block_of_positions().iter().enumerate() {
        let mut row = positional_encoding(l, d, seq_len.saturating_sub(1))?;
        if with_block {
            let pb = positional_encoding(b, d, num_blocks.saturating_sub(1))?;
            row.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
        }
        data.extend(row);
    }
    Ok(Tensor::matrix(seq_len, d, data)?)
}

/// Anything that can score paths; higher means better.
pub trait PathScorer {
    fn score_paths(&self, paths: &[Path]) -> Result<Vec<f64>, FilterError>;
}

impl PathScorer for PathFilter {
    fn score_paths(&self, paths: &[Path]) -> Result<Vec<f64>, FilterError> {
        PathFilter::score_paths(self, paths)
    }
}

/// Adapter turning a closure into a [`PathScorer`].
pub struct FnScorer<F>(pub F);

impl<F: Fn(&Path) -> f64> PathScorer for FnScorer<F> {
    fn score_paths(&self, paths: &[Path]) -> Result<Vec<f64>, FilterError> {
        Ok(paths.iter().map(&self.0).collect())
    }
}
