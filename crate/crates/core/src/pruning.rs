//! Operation scoring and pruning, per-bucket path thresholds and
//! threshold-based rejection sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::arch_space::{fmt_ratio, OpKey, Path, SearchSpace, SpaceError, SpaceView};
use crate::cost_model::{operation_flops, total_flops, BucketSampler, BucketSpec, CostError, LayerOp};
use crate::path_filter::{FilterError, PathScorer};

/// Paths averaged per operation score.
pub const DEFAULT_OP_SAMPLES: usize = 32;
/// FLOPs ranges used by the per-bucket strategies.
pub const OP_FLOPS_BUCKETS: usize = 5;
pub const DEFAULT_MAX_TRIES: usize = 100;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("ratio {name} = {value} outside [0, 1)")]
    BadRatio { name: &'static str, value: f64 },
    #[error("layer {layer} of block {block} is not active under any allowed depth with width {width}")]
    Unreachable { block: usize, layer: usize, width: f64 },
    #[error("unknown operation: {0}")]
    UnknownOperation(String),
    #[error("max_tries must be >= 1")]
    NoTries,
}

mod ratio_str {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&fmt_ratio(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One (block, layer, width, expand) choice with its cost and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationCandidate {
    pub block: usize,
    pub layer: usize,
    #[serde(with = "ratio_str")]
    pub width: f64,
    #[serde(with = "ratio_str")]
    pub expand: f64,
    pub flops: f64,
    pub score: f64,
}

/// Identity of an operation, as persisted in a [`PruneState`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperationId {
    pub block: usize,
    pub layer: usize,
    #[serde(with = "ratio_str")]
    pub width: f64,
    #[serde(with = "ratio_str")]
    pub expand: f64,
}

impl OperationId {
    pub fn key(&self, space: &SearchSpace) -> Result<OpKey, PruneError> {
        let spec = space.blocks.get(self.block).ok_or_else(|| PruneError::UnknownOperation(format!("{self:?}")))?;
        match (spec.width_index(self.width), spec.expand_index(self.expand)) {
            (Some(width), Some(expand)) if self.layer < spec.max_layers() => {
                Ok(OpKey { block: self.block, layer: self.layer, width, expand })
            }
            _ => Err(PruneError::UnknownOperation(format!("{self:?}"))),
        }
    }

    pub fn from_key(space: &SearchSpace, k: OpKey) -> Self {
        let spec = &space.blocks[k.block];
        OperationId {
            block: k.block,
            layer: k.layer,
            width: spec.width_choices[k.width],
            expand: spec.expand_choices[k.expand],
        }
    }
}

impl OperationCandidate {
    pub fn id(&self) -> OperationId {
        OperationId { block: self.block, layer: self.layer, width: self.width, expand: self.expand }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FlopsUniform,
    FlopsScorePerBucket,
    FlopsScoreAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneRatios {
    /// Per FLOPs range, for `flops_uniform` and `flops_score_per_bucket`.
    pub r_op: f64,
    /// Global share for `flops_score_all`.
    pub r_op1: f64,
    /// Per FLOPs range share for `flops_score_all`.
    pub r_op2: f64,
    pub r_path: f64,
}

impl Default for PruneRatios {
    fn default() -> Self {
        PruneRatios { r_op: 0.3, r_op1: 0.1, r_op2: 0.3, r_path: 0.25 }
    }
}

impl PruneRatios {
    pub fn validate(&self) -> Result<(), PruneError> {
        for (name, value) in [("r_op", self.r_op), ("r_op1", self.r_op1), ("r_op2", self.r_op2), ("r_path", self.r_path)] {
            check_ratio(name, value)?;
        }
        Ok(())
    }
}

fn check_ratio(name: &'static str, value: f64) -> Result<(), PruneError> {
    if (0.0..1.0).contains(&value) {
        Ok(())
    } else {
        Err(PruneError::BadRatio { name, value })
    }
}

/// Everything needed to rebuild a pruned space and its path filter gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneState {
    pub strategy: Strategy,
    pub ratios: PruneRatios,
    pub removed: Vec<OperationId>,
    /// δ per FLOPs bucket; 0 for buckets with nothing to threshold.
    pub thresholds: Vec<f64>,
    pub unreachable_buckets: Vec<usize>,
    pub seed: u64,
}

impl PruneState {
    /// The pruned view of `base`.
    pub fn apply(&self, base: &SpaceView) -> Result<SpaceView, PruneError> {
        let keys = self.removed.iter().map(|r| r.key(base.space())).collect::<Result<Vec<_>, _>>()?;
        Ok(base.without_ops(&keys)?)
    }

    /// Gate that admits everything: no removed operations, δ = 0.
    pub fn identity(num_buckets: usize, seed: u64) -> Self {
        PruneState {
            strategy: Strategy::FlopsScoreAll,
            ratios: PruneRatios { r_op: 0.0, r_op1: 0.0, r_op2: 0.0, r_path: 0.0 },
            removed: Vec::new(),
            thresholds: vec![0.0; num_buckets],
            unreachable_buckets: Vec::new(),
            seed,
        }
    }
}

/// Every (block, layer, width, expand) of the space with its FLOPs; score 0.
pub fn candidate_grid(space: &SearchSpace) -> Vec<OperationCandidate> {
    let mut out = Vec::new();
    for (b, spec) in space.blocks.iter().enumerate() {
        for layer in 0..spec.max_layers() {
            for &width in &spec.width_choices {
                for &expand in &spec.expand_choices {
                    let flops = operation_flops(space, b, layer, LayerOp::Bottleneck { width, expand })
                        .expect("grid choices are valid");
                    out.push(OperationCandidate { block: b, layer, width, expand, flops, score: 0.0 });
                }
            }
        }
    }
    out
}

/// `path` with `op` forced active: the block's width becomes the operation's,
/// the depth is raised to the smallest allowed depth that reaches the layer if
/// needed, new or disallowed expands are redrawn uniformly from the view.
pub fn insert_operation<R: Rng + ?Sized>(
    view: &SpaceView,
    path: &Path,
    op: OpKey,
    rng: &mut R,
) -> Result<Path, PruneError> {
    let space = view.space();
    let spec = &space.blocks[op.block];
    let mut idx = space.path_indices(path).ok_or_else(|| PruneError::UnknownOperation(format!("invalid path {path}")))?;
    let cur = &idx[op.block];
    let reach = |d: usize| view.tuples(op.block).contains(&(d, op.width)) && spec.layers(d) > op.layer;
    let depth = if reach(cur.depth) {
        cur.depth
    } else {
        (0..spec.depth_choices.len())
            .filter(|&d| reach(d))
            .min_by_key(|&d| spec.layers(d))
            .ok_or(PruneError::Unreachable { block: op.block, layer: op.layer, width: spec.width_choices[op.width] })?
    };
    let mut expands = Vec::with_capacity(spec.layers(depth));
    for l in 0..spec.layers(depth) {
        let allowed = view.allowed_expands(op.block, l, op.width);
        let e = if l == op.layer {
            op.expand
        } else {
            match cur.expands.get(l) {
                Some(e) if allowed.contains(e) => *e,
                _ => allowed[rng.random_range(0..allowed.len())],
            }
        };
        expands.push(e);
    }
    idx[op.block].depth = depth;
    idx[op.block].width = op.width;
    idx[op.block].expands = expands;
    Ok(space.path_from_indices(&idx))
}

/// Mean score of `n` uniform paths of `view` with the operation inserted.
pub fn score_operation<S: PathScorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    view: &SpaceView,
    op: OpKey,
    n: usize,
    rng: &mut R,
) -> Result<f64, PruneError> {
    let paths = (0..n)
        .map(|_| {
            let p = view.sample(rng);
            insert_operation(view, &p, op, rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scores = scorer.score_paths(&paths)?;
    Ok(scores.iter().sum::<f64>() / n.max(1) as f64)
}

/// Scores every grid candidate allowed in `view`, in grid order.
pub fn score_operations<S: PathScorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    view: &SpaceView,
    n: usize,
    rng: &mut R,
) -> Result<Vec<OperationCandidate>, PruneError> {
    let space = view.space();
    let mut out = Vec::new();
    for mut c in candidate_grid(space) {
        let key = c.id().key(space)?;
        if !view.op_allowed(key) {
            continue;
        }
        c.score = score_operation(scorer, view, key, n, rng)?;
        out.push(c);
    }
    Ok(out)
}

/// Removal order for the score-based cut: lowest score first, ties go to the
/// more expensive candidate, then grid order.
fn worst_first(cands: &[OperationCandidate], ids: &mut [usize]) {
    ids.sort_by(|&a, &b| {
        let (x, y) = (&cands[a], &cands[b]);
        x.score.total_cmp(&y.score).then(y.flops.total_cmp(&x.flops)).then(a.cmp(&b))
    });
}

fn removal_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

struct Pruner<'a> {
    view: &'a SpaceView,
    cands: &'a [OperationCandidate],
    keys: Vec<OpKey>,
    removed: Vec<bool>,
    // surviving expands per (block, layer, width) slot
    alive: BTreeMap<(usize, usize, usize), usize>,
    buckets: &'a BucketSpec,
    reachable: Vec<bool>,
}

impl<'a> Pruner<'a> {
    fn new(view: &'a SpaceView, cands: &'a [OperationCandidate], buckets: &'a BucketSpec) -> Result<Self, PruneError> {
        let keys = cands.iter().map(|c| c.id().key(view.space())).collect::<Result<Vec<_>, _>>()?;
        let mut alive = BTreeMap::new();
        for k in &keys {
            alive.entry((k.block, k.layer, k.width)).or_insert_with(|| view.allowed_expands(k.block, k.layer, k.width).len());
        }
        let reachable = BucketSampler::new(view, buckets)?.reachable();
        Ok(Pruner { view, cands, removed: vec![false; keys.len()], keys, alive, buckets, reachable })
    }

    // would removing candidate `i` as well empty a FLOPs bucket that is reachable now?
    fn loses_bucket(&self, i: usize) -> Result<bool, PruneError> {
        let keys: Vec<OpKey> = (0..self.keys.len()).filter(|&j| j == i || self.removed[j]).map(|j| self.keys[j]).collect();
        let after = BucketSampler::new(&self.view.without_ops(&keys)?, self.buckets)?.reachable();
        Ok(self.reachable.iter().zip(&after).any(|(&b, &a)| b && !a))
    }

    /// Remove up to `count` of `order`, skipping removals that would empty a
    /// decision slot or make a reachable FLOPs bucket unreachable.
    fn remove(&mut self, order: &[usize], count: usize) -> Result<(), PruneError> {
        let mut done = 0;
        for &i in order {
            if done == count {
                break;
            }
            let k = self.keys[i];
            if self.removed[i] || !self.view.op_allowed(k) {
                continue;
            }
            let slot = self.alive[&(k.block, k.layer, k.width)];
            if slot <= 1 {
                log::debug!("keeping last candidate of slot {:?}", (k.block, k.layer, k.width));
                continue;
            }
            if self.loses_bucket(i)? {
                log::debug!("keeping {:?}: its removal empties a FLOPs bucket", k);
                continue;
            }
            let slot = self.alive.get_mut(&(k.block, k.layer, k.width)).expect("slot registered");
            *slot -= 1;
            self.removed[i] = true;
            done += 1;
        }
        Ok(())
    }

    fn live(&self, ids: impl Iterator<Item = usize>) -> Vec<usize> {
        ids.filter(|&i| !self.removed[i] && self.view.op_allowed(self.keys[i])).collect()
    }

    fn by_range(&self) -> Result<Vec<Vec<usize>>, PruneError> {
        let lo = self.cands.iter().map(|c| c.flops).fold(f64::INFINITY, f64::min);
        let hi = self.cands.iter().map(|c| c.flops).fold(f64::NEG_INFINITY, f64::max);
        let spec = BucketSpec::from_range(lo, hi, OP_FLOPS_BUCKETS)?;
        let mut groups = vec![Vec::new(); OP_FLOPS_BUCKETS];
        for (i, c) in self.cands.iter().enumerate() {
            groups[spec.bucket_of(c.flops)?].push(i);
        }
        Ok(groups)
    }
}

/// Applies one operation-pruning strategy. Returns the pruned view and the
/// removed operations in removal-list order (grid order). Every bucket of
/// `buckets` reachable in `view` stays reachable.
pub fn prune_operations<R: Rng + ?Sized>(
    view: &SpaceView,
    candidates: &[OperationCandidate],
    strategy: Strategy,
    ratios: &PruneRatios,
    buckets: &BucketSpec,
    rng: &mut R,
) -> Result<(SpaceView, Vec<OperationId>), PruneError> {
    ratios.validate()?;
    if candidates.is_empty() {
        return Ok((view.clone(), Vec::new()));
    }
    let mut p = Pruner::new(view, candidates, buckets)?;
    match strategy {
        Strategy::FlopsUniform => {
            for g in p.by_range()? {
                let mut ids = p.live(g.into_iter());
                let n = removal_count(ratios.r_op, ids.len());
                ids.shuffle(rng);
                p.remove(&ids, n)?;
            }
        }
        Strategy::FlopsScorePerBucket => {
            for g in p.by_range()? {
                let mut ids = p.live(g.into_iter());
                let n = removal_count(ratios.r_op, ids.len());
                worst_first(candidates, &mut ids);
                p.remove(&ids, n)?;
            }
        }
        Strategy::FlopsScoreAll => {
            let mut ids = p.live(0..candidates.len());
            let n = removal_count(ratios.r_op1, ids.len());
            worst_first(candidates, &mut ids);
            p.remove(&ids, n)?;
            for g in p.by_range()? {
                let mut ids = p.live(g.into_iter());
                let n = removal_count(ratios.r_op2, ids.len());
                worst_first(candidates, &mut ids);
                p.remove(&ids, n)?;
            }
        }
    }
    let keys: Vec<OpKey> = (0..candidates.len()).filter(|&i| p.removed[i]).map(|i| p.keys[i]).collect();
    let ids = keys.iter().map(|&k| OperationId::from_key(view.space(), k)).collect();
    Ok((view.without_ops(&keys)?, ids))
}

/// Linear-interpolated quantile at position `q·(n-1)` of the sorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

/// Per-bucket score thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub delta: Vec<f64>,
    pub unreachable: Vec<usize>,
}

/// δ_k = `r_path`-quantile of the scores of `m` uniform paths from bucket k
/// of the pruned view. Empty buckets get δ = 0.
pub fn path_thresholds<S: PathScorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    view: &SpaceView,
    buckets: &BucketSpec,
    r_path: f64,
    m: usize,
    rng: &mut R,
) -> Result<Thresholds, PruneError> {
    check_ratio("r_path", r_path)?;
    let sampler = BucketSampler::new(view, buckets)?;
    let mut delta = Vec::with_capacity(buckets.num_buckets);
    let mut unreachable = Vec::new();
    for k in 0..buckets.num_buckets {
        let paths: Vec<Path> = match sampler.sample(k, rng) {
            None => {
                log::warn!("bucket {k} unreachable in pruned space; never filtered");
                unreachable.push(k);
                delta.push(0.0);
                continue;
            }
            Some(first) => std::iter::once(first).chain((1..m).filter_map(|_| sampler.sample(k, rng))).collect(),
        };
        let scores = scorer.score_paths(&paths)?;
        delta.push(quantile(&scores, r_path));
    }
    Ok(Thresholds { delta, unreachable })
}

/// Outcome of one gated draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub path: Path,
    pub bucket: usize,
    pub score: f64,
    pub tries: usize,
    pub fallback: bool,
}

/// Uniform draws from `view` until one clears its bucket's δ; after
/// `max_tries` the best-scoring draw is returned and flagged.
pub fn rejection_sample<S: PathScorer + ?Sized, R: Rng + ?Sized>(
    view: &SpaceView,
    scorer: &S,
    buckets: &BucketSpec,
    delta: &[f64],
    rng: &mut R,
    max_tries: usize,
) -> Result<Draw, PruneError> {
    if max_tries == 0 {
        return Err(PruneError::NoTries);
    }
    let mut best: Option<Draw> = None;
    for t in 1..=max_tries {
        let path = view.sample(rng);
        let bucket = buckets.bucket_of(total_flops(view.space(), &path))?;
        let d = delta.get(bucket).copied().unwrap_or(0.0);
        if d <= 0.0 {
            return Ok(Draw { path, bucket, score: f64::NAN, tries: t, fallback: false });
        }
        let score = scorer.score_paths(std::slice::from_ref(&path))?[0];
        if score >= d {
            return Ok(Draw { path, bucket, score, tries: t, fallback: false });
        }
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(Draw { path, bucket, score, tries: t, fallback: true });
        }
    }
    let mut b = best.expect("max_tries >= 1");
    b.tries = max_tries;
    log::info!("rejection sampling fell back after {max_tries} tries (bucket {})", b.bucket);
    Ok(b)
}
