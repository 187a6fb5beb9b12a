//! Analytic FLOPs of bottleneck paths and equal-width FLOPs buckets.
//!
//! Each active layer is a residual bottleneck: 1x1 reduce (C -> m),
//! k x k middle (m -> m), 1x1 restore (m -> C), evaluated over the block's
//! spatial area. One multiply-accumulate counts as 2 FLOPs; results are MFLOPs.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_space::{inner_channels, BlockIndices, Path, SearchSpace, SpaceView};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("invalid operation choice: {0}")]
    InvalidChoice(String),
    #[error("flops {flops} outside bucket range [{min}, {max}]")]
    OutOfRange { flops: f64, min: f64, max: f64 },
    #[error("number of buckets must be >= 1")]
    NoBuckets,
    #[error("view too large: {0}")]
    TooLarge(String),
}

/// Per-path cost breakdown in MFLOPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub total: f64,
    pub per_block: Vec<f64>,
    pub per_layer: Vec<Vec<f64>>,
}

/// Multiply-accumulates of one bottleneck layer per output pixel.
pub fn bottleneck_macs(channels: usize, inner: usize, kernel: usize) -> u64 {
    let (c, m, k) = (channels as u64, inner as u64, kernel as u64);
    c * m + k * k * m * m + m * c
}

// FLOPs (not MFLOPs) of one layer, exact
fn layer_flops(space: &SearchSpace, block: usize, channels: usize, expand: f64) -> u64 {
    let side = space.spatial_side(block) as u64;
    let macs = bottleneck_macs(channels, inner_channels(channels, expand), space.kernel_size);
    2 * macs * side * side
}

fn layer_mflops(space: &SearchSpace, block: usize, channels: usize, expand: f64) -> f64 {
    layer_flops(space, block, channels, expand) as f64 / 1e6
}

/// Analytic cost of a valid path.
pub fn path_flops(space: &SearchSpace, path: &Path) -> Result<FlopsReport, CostError> {
    let violations = space.check_path(path);
    if !violations.is_empty() {
        return Err(CostError::InvalidPath(format!("{violations:?}")));
    }
    Ok(path_flops_unchecked(space, path))
}

pub(crate) fn path_flops_unchecked(space: &SearchSpace, path: &Path) -> FlopsReport {
    let mut per_layer = Vec::with_capacity(path.blocks.len());
    let mut per_block = Vec::with_capacity(path.blocks.len());
    for (b, choice) in path.blocks.iter().enumerate() {
        let c = space.channels(b, choice.width);
        let layers: Vec<f64> = choice.expands.iter().map(|&e| layer_mflops(space, b, c, e)).collect();
        per_block.push(layers.iter().sum());
        per_layer.push(layers);
    }
    FlopsReport { total: per_block.iter().sum(), per_block, per_layer }
}

/// Total MFLOPs of a path known to be valid.
pub fn total_flops(space: &SearchSpace, path: &Path) -> f64 {
    path_flops_unchecked(space, path).total
}

/// One layer operation in isolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerOp {
    Skip,
    Bottleneck { width: f64, expand: f64 },
}

/// Standalone cost of one layer configuration at the block's nominal size.
pub fn operation_flops(space: &SearchSpace, block: usize, layer: usize, op: LayerOp) -> Result<f64, CostError> {
    let spec = space
        .blocks
        .get(block)
        .ok_or_else(|| CostError::InvalidChoice(format!("block {block}")))?;
    if layer >= spec.max_layers() {
        return Err(CostError::InvalidChoice(format!("layer {layer} of block {block}")));
    }
    match op {
        LayerOp::Skip => Ok(0.0),
        LayerOp::Bottleneck { width, expand } => {
            if spec.width_index(width).is_none() || spec.expand_index(expand).is_none() {
                return Err(CostError::InvalidChoice(format!("width {width} expand {expand}")));
            }
            Ok(layer_mflops(space, block, space.channels(block, width), expand))
        }
    }
}

/// Equal-width partition of `[min_flops, max_flops]` into `num_buckets` bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub num_buckets: usize,
    pub min_flops: f64,
    pub max_flops: f64,
    pub edges: Vec<f64>,
}

impl BucketSpec {
    pub fn from_range(min_flops: f64, max_flops: f64, num_buckets: usize) -> Result<Self, CostError> {
        if num_buckets == 0 {
            return Err(CostError::NoBuckets);
        }
        let width = (max_flops - min_flops) / num_buckets as f64;
        let mut edges: Vec<f64> = (0..num_buckets).map(|k| min_flops + width * k as f64).collect();
        edges.push(max_flops);
        Ok(BucketSpec { num_buckets, min_flops, max_flops, edges })
    }

    /// Upper edge of bucket `k`.
    pub fn upper_edge(&self, k: usize) -> f64 {
        self.edges[k + 1]
    }

    /// Half-open `[edge_k, edge_k+1)`, last bucket closed at the maximum.
    pub fn bucket_of(&self, flops: f64) -> Result<usize, CostError> {
        if !(flops >= self.min_flops && flops <= self.max_flops) {
            return Err(CostError::OutOfRange { flops, min: self.min_flops, max: self.max_flops });
        }
        // first edge strictly above flops, among the interior edges
        let k = self.edges[1..self.num_buckets].partition_point(|&e| e <= flops);
        Ok(k)
    }
}

/// Buckets spanning the full space, from its all-min and all-max paths.
pub fn make_buckets(space: &SearchSpace, num_buckets: usize) -> Result<BucketSpec, CostError> {
    let min = total_flops(space, &space.min_path());
    let max = total_flops(space, &space.max_path());
    BucketSpec::from_range(min, max, num_buckets)
}

/// Cheapest and most expensive path of a view.
pub fn flops_extremes(view: &SpaceView) -> (Path, Path) {
    let space = view.space();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for b in 0..space.num_blocks() {
        let spec = &space.blocks[b];
        let mut best_lo: Option<(f64, BlockIndices)> = None;
        let mut best_hi: Option<(f64, BlockIndices)> = None;
        for &(d, w) in view.tuples(b) {
            let c = space.channels(b, spec.width_choices[w]);
            let mut cost_lo = 0.0;
            let mut cost_hi = 0.0;
            let mut e_lo = Vec::new();
            let mut e_hi = Vec::new();
            for l in 0..spec.layers(d) {
                let opts = view.allowed_expands(b, l, w);
                // allowed lists are ascending, cost is monotone in expand
                let (a, z) = (opts[0], opts[opts.len() - 1]);
                cost_lo += layer_mflops(space, b, c, spec.expand_choices[a]);
                cost_hi += layer_mflops(space, b, c, spec.expand_choices[z]);
                e_lo.push(a);
                e_hi.push(z);
            }
            if best_lo.as_ref().is_none_or(|(v, _)| cost_lo < *v) {
                best_lo = Some((cost_lo, BlockIndices { depth: d, width: w, expands: e_lo }));
            }
            if best_hi.as_ref().is_none_or(|(v, _)| cost_hi > *v) {
                best_hi = Some((cost_hi, BlockIndices { depth: d, width: w, expands: e_hi }));
            }
        }
        lo.push(best_lo.unwrap().1);
        hi.push(best_hi.unwrap().1);
    }
    (space.path_from_indices(&lo), space.path_from_indices(&hi))
}

/// Buckets spanning a restricted view.
pub fn make_buckets_for(view: &SpaceView, num_buckets: usize) -> Result<BucketSpec, CostError> {
    let (lo, hi) = flops_extremes(view);
    BucketSpec::from_range(total_flops(view.space(), &lo), total_flops(view.space(), &hi), num_buckets)
}

/// Largest per-block option list the bucket sampler will materialize.
pub const MAX_BLOCK_OPTIONS: u128 = 1 << 20;

// Distribution of summed costs over a run of blocks: suffix[j] covers blocks j.. of the run.
#[derive(Debug, Clone)]
struct Half {
    blocks: std::ops::Range<usize>,
    suffix: Vec<HashMap<u64, f64>>,
    sums: Vec<u64>,
    weights: Vec<f64>,
}

impl Half {
    fn new(blocks: std::ops::Range<usize>, groups: &[Vec<(u64, Vec<BlockIndices>)>]) -> Self {
        let mut suffix = vec![HashMap::from([(0u64, 1.0)])];
        for b in blocks.clone().rev() {
            let next = suffix.last().unwrap();
            let mut m: HashMap<u64, f64> = HashMap::new();
            for (c, opts) in &groups[b] {
                for (s, w) in next {
                    *m.entry(c + s).or_default() += opts.len() as f64 * w;
                }
            }
            suffix.push(m);
        }
        suffix.reverse();
        let mut pairs: Vec<(u64, f64)> = suffix[0].iter().map(|(&k, &v)| (k, v)).collect();
        pairs.sort_unstable_by_key(|p| p.0);
        let (sums, weights) = pairs.into_iter().unzip();
        Half { blocks, suffix, sums, weights }
    }

    // per-block costs summing to `total`, drawn with path-count weights
    fn split<R: Rng + ?Sized>(&self, total: u64, groups: &[Vec<(u64, Vec<BlockIndices>)>], rng: &mut R) -> Vec<usize> {
        let mut rest = total;
        let mut picks = Vec::with_capacity(self.blocks.len());
        for (j, b) in self.blocks.clone().enumerate() {
            let w: Vec<f64> = groups[b]
                .iter()
                .map(|(c, opts)| match rest.checked_sub(*c) {
                    Some(r) => opts.len() as f64 * self.suffix[j + 1].get(&r).copied().unwrap_or(0.0),
                    None => 0.0,
                })
                .collect();
            let g = pick_weighted(&w, rng);
            rest -= groups[b][g].0;
            picks.push(g);
        }
        picks
    }
}

fn pick_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if r < w {
                return i;
            }
            r -= w;
            last = i;
        }
    }
    last
}

/// Uniform draws from the paths of a view that fall into one FLOPs bucket.
///
/// Block realizations are grouped by exact cost; the blocks are split into
/// two halves whose cost distributions are matched per bucket.
#[derive(Debug, Clone)]
pub struct BucketSampler {
    space: SearchSpace,
    buckets: BucketSpec,
    groups: Vec<Vec<(u64, Vec<BlockIndices>)>>,
    left: Half,
    right: Half,
    right_prefix: Vec<f64>,
    // per bucket: cumulative weight over left sums
    cum: Vec<Vec<f64>>,
}

impl BucketSampler {
    pub fn new(view: &SpaceView, buckets: &BucketSpec) -> Result<Self, CostError> {
        let space = view.space().clone();
        let n = space.num_blocks();
        let mut groups = Vec::with_capacity(n);
        for b in 0..n {
            if view.block_count(b) > MAX_BLOCK_OPTIONS {
                return Err(CostError::TooLarge(format!("block {b} has {} realizations", view.block_count(b))));
            }
            let spec = &space.blocks[b];
            let mut by_cost: BTreeMap<u64, Vec<BlockIndices>> = BTreeMap::new();
            for bi in view.block_options(b) {
                let c = space.channels(b, spec.width_choices[bi.width]);
                let cost = bi.expands.iter().map(|&e| layer_flops(&space, b, c, spec.expand_choices[e])).sum();
                by_cost.entry(cost).or_default().push(bi);
            }
            groups.push(by_cost.into_iter().collect());
        }
        let left = Half::new(0..n / 2, &groups);
        let right = Half::new(n / 2..n, &groups);
        let mut right_prefix = vec![0.0];
        for w in &right.weights {
            right_prefix.push(right_prefix.last().unwrap() + w);
        }
        let mut s = BucketSampler { space, buckets: buckets.clone(), groups, left, right, right_prefix, cum: Vec::new() };
        s.cum = (0..buckets.num_buckets)
            .map(|k| {
                let mut acc = 0.0;
                (0..s.left.sums.len())
                    .map(|i| {
                        let (lo, hi) = s.right_range(s.left.sums[i], k);
                        acc += s.left.weights[i] * (s.right_prefix[hi] - s.right_prefix[lo]);
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(s)
    }

    fn bin(&self, units: u64) -> isize {
        let f = units as f64 / 1e6;
        if f < self.buckets.min_flops {
            -1
        } else if f > self.buckets.max_flops {
            self.buckets.num_buckets as isize
        } else {
            self.buckets.bucket_of(f).map(|k| k as isize).unwrap_or(-1)
        }
    }

    // index range of right sums that put `a + r` in bucket k
    fn right_range(&self, a: u64, k: usize) -> (usize, usize) {
        let k = k as isize;
        let lo = self.right.sums.partition_point(|&r| self.bin(a + r) < k);
        let hi = self.right.sums.partition_point(|&r| self.bin(a + r) <= k);
        (lo, hi.max(lo))
    }

    pub fn buckets(&self) -> &BucketSpec {
        &self.buckets
    }

    /// Approximate number of paths per bucket (f64 arithmetic).
    pub fn bucket_weights(&self) -> Vec<f64> {
        self.cum.iter().map(|c| c.last().copied().unwrap_or(0.0)).collect()
    }

    pub fn reachable(&self) -> Vec<bool> {
        self.bucket_weights().iter().map(|&w| w > 0.0).collect()
    }

    /// A path of the view with FLOPs in bucket `k`, or `None` if the bucket is empty.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Option<Path> {
        let cum = self.cum.get(k)?;
        let total = *cum.last()?;
        if total <= 0.0 {
            return None;
        }
        loop {
            let r = rng.random::<f64>() * total;
            let i = cum.partition_point(|&c| c <= r).min(cum.len() - 1);
            let a = self.left.sums[i];
            let (lo, hi) = self.right_range(a, k);
            if lo == hi {
                continue;
            }
            let base = self.right_prefix[lo];
            let r2 = base + rng.random::<f64>() * (self.right_prefix[hi] - base);
            let j = (self.right_prefix[lo + 1..=hi].partition_point(|&c| c <= r2) + lo).min(hi - 1);
            let mut idx = Vec::with_capacity(self.groups.len());
            let picks = self.left.split(a, &self.groups, rng).into_iter().chain(self.right.split(self.right.sums[j], &self.groups, rng));
            for (b, g) in picks.enumerate() {
                let opts = &self.groups[b][g].1;
                idx.push(opts[rng.random_range(0..opts.len())].clone());
            }
            let path = self.space.path_from_indices(&idx);
            // float summation may land a hair across an edge; redraw then
            if self.buckets.bucket_of(total_flops(&self.space, &path)).ok() == Some(k) {
                return Some(path);
            }
        }
    }
}

/// Per bucket: does any path of the view fall into it?
pub fn reachable_buckets(view: &SpaceView, buckets: &BucketSpec) -> Result<Vec<bool>, CostError> {
    Ok(BucketSampler::new(view, buckets)?.reachable())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_space::{enumerate_paths, BlockSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn min_path_cheaper_than_max_path() {
        let s = SearchSpace::ofa_default();
        assert!(total_flops(&s, &s.min_path()) < total_flops(&s, &s.max_path()));
    }

    #[test]
    fn report_total_matches_blocks() {
        let s = SearchSpace::ofa_default();
        let r = path_flops(&s, &s.max_path()).unwrap();
        let sum: f64 = r.per_block.iter().sum();
        assert!((r.total - sum).abs() <= 1e-9 * r.total);
        assert_eq!(r.per_layer[0].len(), 4);
    }

    #[test]
    fn invalid_path_errors() {
        let s = SearchSpace::ofa_default();
        let mut p = s.max_path();
        p.blocks[0].width = 0.5;
        assert!(matches!(path_flops(&s, &p), Err(CostError::InvalidPath(_))));
    }

    #[test]
    fn doubling_channels_quadruples_layer_terms() {
        // closed form is homogeneous of degree 2 in (C, m) when m scales with C
        let b = BlockSpec::new(&[0, 1], &[0.5, 1.0], &[0.25, 0.5]);
        let s1 = SearchSpace::new(vec![b.clone(), b.clone()], 64, vec![16, 32], 3).unwrap();
        let s2 = SearchSpace::new(vec![b.clone(), b], 64, vec![32, 64], 3).unwrap();
        let p = s1.max_path();
        let r1 = path_flops(&s1, &p).unwrap();
        let r2 = path_flops(&s2, &p).unwrap();
        for (l1, l2) in r1.per_layer.iter().flatten().zip(r2.per_layer.iter().flatten()) {
            assert!((l2 / l1 - 4.0).abs() < 1e-12, "{l1} {l2}");
        }
    }

    #[test]
    fn skip_costs_nothing() {
        let s = SearchSpace::ofa_default();
        assert_eq!(operation_flops(&s, 2, 3, LayerOp::Skip).unwrap(), 0.0);
    }

    #[test]
    fn operation_flops_monotone_and_linear_terms() {
        let s = SearchSpace::ofa_default();
        let f = |e| operation_flops(&s, 1, 0, LayerOp::Bottleneck { width: 1.0, expand: e }).unwrap();
        assert!(f(0.2) < f(0.25) && f(0.25) < f(0.35));
        // recompute the closed form: 2 * side^2 * (2 C m + 9 m^2)
        let c = 128.0;
        let side = 28.0;
        let m = (c * 0.25f64).round();
        let expect = 2.0 * side * side * (2.0 * c * m + 9.0 * m * m) / 1e6;
        assert!((f(0.25) - expect).abs() < 1e-12);
        assert!(operation_flops(&s, 0, 4, LayerOp::Skip).is_err());
        assert!(operation_flops(&s, 0, 0, LayerOp::Bottleneck { width: 0.7, expand: 0.2 }).is_err());
    }

    #[test]
    fn linear_term_scales_with_expand() {
        // doubling m (exactly, no rounding) doubles C·m terms and quadruples m² terms
        let b = BlockSpec::new(&[0], &[1.0], &[0.25, 0.5]);
        let s = SearchSpace::new(vec![b], 4, vec![64], 1).unwrap();
        let f1 = operation_flops(&s, 0, 0, LayerOp::Bottleneck { width: 1.0, expand: 0.25 }).unwrap();
        let f2 = operation_flops(&s, 0, 0, LayerOp::Bottleneck { width: 1.0, expand: 0.5 }).unwrap();
        let lin = |m: f64| 2.0 * 2.0 * 64.0 * m / 1e6;
        let quad = |m: f64| 2.0 * m * m / 1e6;
        assert!((f1 - lin(16.0) - quad(16.0)).abs() < 1e-15);
        assert!((f2 - 2.0 * lin(16.0) - 4.0 * quad(16.0)).abs() < 1e-15);
    }

    #[test]
    fn bucket_edges_arithmetic() {
        let b = BucketSpec::from_range(100.0, 200.0, 5).unwrap();
        assert_eq!(b.edges, vec![100.0, 120.0, 140.0, 160.0, 180.0, 200.0]);
        assert_eq!(b.bucket_of(100.0).unwrap(), 0);
        assert_eq!(b.bucket_of(150.0).unwrap(), 2);
        assert_eq!(b.bucket_of(120.0).unwrap(), 1);
        assert_eq!(b.bucket_of(200.0).unwrap(), 4);
        assert!(b.bucket_of(99.9).is_err());
        assert!(b.bucket_of(200.1).is_err());
        assert!(b.bucket_of(f64::NAN).is_err());
    }

    #[test]
    fn single_bucket_takes_everything() {
        let s = SearchSpace::ofa_default();
        let b = make_buckets(&s, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let view = SpaceView::full(&s).unwrap();
        for _ in 0..100 {
            assert_eq!(b.bucket_of(total_flops(&s, &view.sample(&mut rng))).unwrap(), 0);
        }
        assert!(BucketSpec::from_range(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn enumerated_paths_stay_inside_range() {
        let blk = BlockSpec::new(&[0, 1], &[0.5, 1.0], &[0.25, 0.5]);
        let s = SearchSpace::new(vec![blk.clone(), blk], 64, vec![32, 48], 3).unwrap();
        let b = make_buckets(&s, 5).unwrap();
        for p in enumerate_paths(&s, None, 10_000).unwrap() {
            b.bucket_of(total_flops(&s, &p)).unwrap();
        }
    }

    #[test]
    fn coordinate_monotone_on_random_perturbations() {
        let s = SearchSpace::ofa_default();
        let view = SpaceView::full(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let p = view.sample(&mut rng);
            let b = rng.random_range(0..s.num_blocks());
            let spec = &s.blocks[b];
            let mut q = p.clone();
            match rng.random_range(0..3) {
                0 => {
                    let wi = spec.width_index(p.blocks[b].width).unwrap();
                    if wi + 1 == spec.width_choices.len() {
                        continue;
                    }
                    q.blocks[b].width = spec.width_choices[wi + 1];
                }
                1 => {
                    let l = rng.random_range(0..p.blocks[b].expands.len());
                    let ei = spec.expand_index(p.blocks[b].expands[l]).unwrap();
                    if ei + 1 == spec.expand_choices.len() {
                        continue;
                    }
                    q.blocks[b].expands[l] = spec.expand_choices[ei + 1];
                }
                _ => {
                    let di = spec.depth_index(p.blocks[b].depth).unwrap();
                    if di + 1 == spec.depth_choices.len() {
                        continue;
                    }
                    q.blocks[b].depth = spec.depth_choices[di + 1];
                    let extra = spec.layers(di + 1) - spec.layers(di);
                    for _ in 0..extra {
                        q.blocks[b].expands.push(spec.expand_choices[0]);
                    }
                }
            }
            assert!(total_flops(&s, &p) < total_flops(&s, &q));
        }
    }

    #[test]
    fn view_extremes_match_full_space() {
        let s = SearchSpace::ofa_default();
        let view = SpaceView::full(&s).unwrap();
        assert_eq!(make_buckets_for(&view, 5).unwrap(), make_buckets(&s, 5).unwrap());
    }

    #[test]
    fn reachability_matches_enumeration() {
        use crate::arch_space::{enumerate_paths, BlockSpec, OpKey};
        let b = BlockSpec::new(&[0, 1], &[0.5, 1.0], &[0.25, 0.5]);
        let s = SearchSpace::new(vec![b.clone(), b.clone(), b], 32, vec![16, 32, 64], 3).unwrap();
        let full = SpaceView::full(&s).unwrap();
        let views = [
            full.clone(),
            full.without_ops(&[OpKey { block: 0, layer: 0, width: 0, expand: 0 }]).unwrap(),
            full.without_ops(&[
                OpKey { block: 2, layer: 0, width: 1, expand: 1 },
                OpKey { block: 2, layer: 1, width: 1, expand: 1 },
                OpKey { block: 2, layer: 2, width: 1, expand: 1 },
            ])
            .unwrap(),
        ];
        for nb in [3, 7, 40] {
            let buckets = make_buckets(&s, nb).unwrap();
            for v in &views {
                let mut brute = vec![false; nb];
                for p in enumerate_paths(&s, None, 100_000).unwrap().into_iter().filter(|p| v.contains(p)) {
                    brute[buckets.bucket_of(total_flops(&s, &p)).unwrap()] = true;
                }
                assert_eq!(reachable_buckets(v, &buckets).unwrap(), brute);
            }
        }
    }

    #[test]
    fn bucket_sampler_is_uniform_within_bucket() {
        use crate::arch_space::{enumerate_paths, BlockSpec};
        use rand::SeedableRng;
        use std::collections::HashMap;
        let b = BlockSpec::new(&[0, 1], &[0.5, 1.0], &[0.25, 0.5]);
        let s = SearchSpace::new(vec![b.clone(), b.clone(), b], 32, vec![16, 32, 64], 3).unwrap();
        let view = SpaceView::full(&s).unwrap();
        let buckets = make_buckets(&s, 4).unwrap();
        let sampler = BucketSampler::new(&view, &buckets).unwrap();
        let all = enumerate_paths(&s, None, 100_000).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for k in 0..4 {
            let members: Vec<&Path> = all.iter().filter(|p| buckets.bucket_of(total_flops(&s, p)).unwrap() == k).collect();
            assert!((sampler.bucket_weights()[k] - members.len() as f64).abs() < 1e-6);
            let draws = 40 * members.len();
            let mut seen: HashMap<Path, usize> = HashMap::new();
            for _ in 0..draws {
                let p = sampler.sample(k, &mut rng).unwrap();
                assert!(view.contains(&p));
                *seen.entry(p).or_default() += 1;
            }
            assert_eq!(seen.len(), members.len());
            let e = draws as f64 / members.len() as f64;
            let chi2: f64 = seen.values().map(|&o| (o as f64 - e).powi(2) / e).sum();
            let dof = (members.len() - 1) as f64;
            // ~5 sigma above the chi-square mean
            assert!(chi2 < dof + 5.0 * (2.0 * dof).sqrt(), "bucket {k}: chi2 {chi2} dof {dof}");
        }
    }

    #[test]
    fn default_space_has_every_bucket() {
        let s = SearchSpace::ofa_default();
        let view = SpaceView::full(&s).unwrap();
        let sampler = BucketSampler::new(&view, &make_buckets(&s, 5).unwrap()).unwrap();
        let w = sampler.bucket_weights();
        assert!((w.iter().sum::<f64>() - 351f64.powi(4)).abs() < 1.0);
        assert!(sampler.reachable().iter().all(|&r| r));
    }
}
