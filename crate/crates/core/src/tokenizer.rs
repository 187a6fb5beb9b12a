//! Layer-wise tokenization of paths and sinusoidal position codes.
//!
//! Every active layer becomes a `W{w}_E{e}` token (the block width repeated
//! per layer), inactive layers are padded with `SC` up to the block's maximum,
//! so every path of a space maps to a sequence of the same length.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_space::{fmt_ratio, Path, SearchSpace};

pub const SKIP_TOKEN: &str = "SC";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenError {
    #[error("encoding dimension {0} must be even")]
    OddDim(usize),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("token {0} missing from vocabulary")]
    UnknownToken(String),
    #[error("bucket {bucket} outside 0..{num_buckets}")]
    BadBucket { bucket: usize, num_buckets: usize },
}

/// Bijective token string <-> id map. Id 0 is always `SC`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub num_buckets: usize,
}

pub fn layer_token(width: f64, expand: f64) -> String {
    format!("W{}_E{}", fmt_ratio(width), fmt_ratio(expand))
}

impl Vocabulary {
    /// `SC` plus one token per (width, expand) pair occurring in any block.
    pub fn for_space(space: &SearchSpace, num_buckets: usize) -> Self {
        let mut widths: Vec<f64> = space.blocks.iter().flat_map(|b| b.width_choices.iter().copied()).collect();
        let mut expands: Vec<f64> = space.blocks.iter().flat_map(|b| b.expand_choices.iter().copied()).collect();
        for v in [&mut widths, &mut expands] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        let mut tokens = vec![SKIP_TOKEN.to_string()];
        for &w in &widths {
            for &e in &expands {
                tokens.push(layer_token(w, e));
            }
        }
        Vocabulary { tokens, num_buckets }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn index(&self) -> BTreeMap<String, usize> {
        self.tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect()
    }
}

/// Model input for one path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub layer_index: Vec<usize>,
    pub block_index: Vec<usize>,
    pub bucket: usize,
}

/// Precomputed (block, width, expand) -> token id table for one space.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    space: SearchSpace,
    vocab: Vocabulary,
    // ids[block][width_idx][expand_idx]
    ids: Vec<Vec<Vec<usize>>>,
    block_of: Vec<usize>,
}

impl Tokenizer {
    pub fn new(space: &SearchSpace, vocab: &Vocabulary) -> Result<Self, TokenError> {
        let index = vocab.index();
        let mut ids = Vec::with_capacity(space.num_blocks());
        for b in &space.blocks {
            let mut per_w = Vec::with_capacity(b.width_choices.len());
            for &w in &b.width_choices {
                let mut per_e = Vec::with_capacity(b.expand_choices.len());
                for &e in &b.expand_choices {
                    let t = layer_token(w, e);
                    per_e.push(*index.get(&t).ok_or(TokenError::UnknownToken(t))?);
                }
                per_w.push(per_e);
            }
            ids.push(per_w);
        }
        if vocab.id(SKIP_TOKEN) != Some(0) {
            return Err(TokenError::UnknownToken(SKIP_TOKEN.into()));
        }
        let block_of = space
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(b, spec)| std::iter::repeat_n(b, spec.max_layers()))
            .collect();
        Ok(Tokenizer { space: space.clone(), vocab: vocab.clone(), ids, block_of })
    }

    pub fn seq_len(&self) -> usize {
        self.block_of.len()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Block of each global layer position.
    pub fn block_of_positions(&self) -> &[usize] {
        &self.block_of
    }

    pub fn tokenize(&self, path: &Path, bucket: usize) -> Result<TokenSequence, TokenError> {
        if bucket >= self.vocab.num_buckets {
            return Err(TokenError::BadBucket { bucket, num_buckets: self.vocab.num_buckets });
        }
        let idx = self
            .space
            .path_indices(path)
            .ok_or_else(|| TokenError::InvalidPath(format!("{:?}", self.space.check_path(path))))?;
        let mut tokens = Vec::with_capacity(self.seq_len());
        for (b, bi) in idx.iter().enumerate() {
            for &e in &bi.expands {
                tokens.push(self.ids[b][bi.width][e]);
            }
            let pad = self.space.blocks[b].max_layers() - bi.expands.len();
            tokens.extend(std::iter::repeat_n(0, pad));
        }
        Ok(TokenSequence {
            tokens,
            layer_index: (0..self.seq_len()).collect(),
            block_index: self.block_of.clone(),
            bucket,
        })
    }

    pub fn token_strings(&self, seq: &TokenSequence) -> Vec<&str> {
        seq.tokens.iter().map(|&t| self.vocab.tokens[t].as_str()).collect()
    }
}

/// Tokenize a path against a space-derived vocabulary.
pub fn tokenize(space: &SearchSpace, path: &Path, bucket: usize, num_buckets: usize) -> Result<TokenSequence, TokenError> {
    Tokenizer::new(space, &Vocabulary::for_space(space, num_buckets))?.tokenize(path, bucket)
}

/// `P(l, 2i) = sin(l / 10000^(2i / max_index))`, `P(l, 2i+1) = cos(..)`.
///
/// A `max_index` of 0 (single position) is treated as 1.
pub fn positional_encoding(index: usize, dim: usize, max_index: usize) -> Result<Vec<f64>, TokenError> {
    if dim % 2 != 0 {
        return Err(TokenError::OddDim(dim));
    }
    let denom = max_index.max(1) as f64;
    let l = index as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let angle = l / 10000f64.powf(2.0 * i as f64 / denom);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}
