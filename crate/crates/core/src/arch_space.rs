//! Parametric chain search space: blocks with elastic depth, width and
//! per-layer expand ratio.
//!
//! A [`SearchSpace`] is the full universe of paths. A [`SpaceView`] restricts
//! it, either by a [`CoupleRule`] on (depth, width) tuples or by removing
//! individual operations, and provides exact counting, lexicographic
//! enumeration and exactly-uniform sampling over whatever survives.

use std::fmt;
use std::hash::{Hash, Hasher};

use num_bigint::BigUint;
use num_traits::One;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Layers of a bottleneck block at depth choice 0.
pub const DEFAULT_MIN_LAYERS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("search space has no blocks")]
    NoBlocks,
    #[error("block {block}: {what} choice set is empty")]
    EmptyChoices { block: usize, what: &'static str },
    #[error("block {block}: {what} choices must be strictly ascending")]
    Unsorted { block: usize, what: &'static str },
    #[error("block {block}: ratio {value} outside (0, 1]")]
    RatioOutOfRange { block: usize, value: f64 },
    #[error("block {block}: layers_for_depth must have one entry per depth, be >= 1 and strictly increasing")]
    BadLayerMap { block: usize },
    #[error("expected {expected} base_channels entries, got {got}")]
    BaseChannels { expected: usize, got: usize },
    #[error("input_resolution and base_channels must be positive")]
    NonPositive,
    #[error("block {block}: width choices {a} and {b} round to the same channel count")]
    WidthCollision { block: usize, a: f64, b: f64 },
    #[error("block {block}: expand choices {a} and {b} round to the same inner channel count at width {width}")]
    ExpandCollision { block: usize, width: f64, a: f64, b: f64 },
    #[error("block {block}: per-block path count overflows 128 bits")]
    BlockTooLarge { block: usize },
    #[error("couple rule tuple (depth {depth}, width {width}) is not in block {block}'s choice sets")]
    BadCoupleTuple { block: usize, depth: u32, width: f64 },
    #[error("couple rule leaves block {block} without any (depth, width) tuple")]
    EmptyCoupling { block: usize },
    #[error("operation {0} is not part of the search space")]
    UnknownOperation(String),
    #[error("space too large: {count} paths exceed cap {cap}")]
    TooLarge { count: BigUint, cap: u64 },
    #[error("view has no paths left")]
    Empty,
}

/// Candidate choices of one bottleneck block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSpec {
    pub depth_choices: Vec<u32>,
    pub width_choices: Vec<f64>,
    pub expand_choices: Vec<f64>,
    /// Active layer count for each entry of `depth_choices`.
    pub layers_for_depth: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlockSpec {
    depth_choices: Vec<u32>,
    width_choices: Vec<f64>,
    expand_choices: Vec<f64>,
    #[serde(default)]
    layers_for_depth: Option<Vec<usize>>,
    #[serde(default)]
    min_layers: Option<usize>,
}

impl<'de> Deserialize<'de> for BlockSpec {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = RawBlockSpec::deserialize(de)?;
        let layers = match raw.layers_for_depth {
            Some(l) => l,
            None => {
                let min = raw.min_layers.unwrap_or(DEFAULT_MIN_LAYERS);
                raw.depth_choices.iter().map(|&d| min + d as usize).collect()
            }
        };
        Ok(BlockSpec {
            depth_choices: raw.depth_choices,
            width_choices: raw.width_choices,
            expand_choices: raw.expand_choices,
            layers_for_depth: layers,
        })
    }
}

impl BlockSpec {
    /// Block whose depth choice `d` activates `DEFAULT_MIN_LAYERS + d` layers.
    pub fn new(depths: &[u32], widths: &[f64], expands: &[f64]) -> Self {
        BlockSpec {
            depth_choices: depths.to_vec(),
            width_choices: widths.to_vec(),
            expand_choices: expands.to_vec(),
            layers_for_depth: depths.iter().map(|&d| DEFAULT_MIN_LAYERS + d as usize).collect(),
        }
    }

    pub fn max_layers(&self) -> usize {
        self.layers_for_depth.last().copied().unwrap_or(0)
    }

    pub fn layers(&self, depth_idx: usize) -> usize {
        self.layers_for_depth[depth_idx]
    }

    pub fn depth_index(&self, depth: u32) -> Option<usize> {
        self.depth_choices.iter().position(|&d| d == depth)
    }

    pub fn width_index(&self, width: f64) -> Option<usize> {
        self.width_choices.iter().position(|&w| w == width)
    }

    pub fn expand_index(&self, expand: f64) -> Option<usize> {
        self.expand_choices.iter().position(|&e| e == expand)
    }

    fn validate(&self, block: usize) -> Result<(), SpaceError> {
        let checks: [(&'static str, bool, bool); 3] = [
            (
                "depth",
                self.depth_choices.is_empty(),
                self.depth_choices.windows(2).all(|w| w[0] < w[1]),
            ),
            (
                "width",
                self.width_choices.is_empty(),
                self.width_choices.windows(2).all(|w| w[0] < w[1]),
            ),
            (
                "expand",
                self.expand_choices.is_empty(),
                self.expand_choices.windows(2).all(|w| w[0] < w[1]),
            ),
        ];
        for (what, empty, sorted) in checks {
            if empty {
                return Err(SpaceError::EmptyChoices { block, what });
            }
            if !sorted {
                return Err(SpaceError::Unsorted { block, what });
            }
        }
        for &r in self.width_choices.iter().chain(&self.expand_choices) {
            if !(r > 0.0 && r <= 1.0) {
                return Err(SpaceError::RatioOutOfRange { block, value: r });
            }
        }
        let l = &self.layers_for_depth;
        if l.len() != self.depth_choices.len() || l[0] < 1 || !l.windows(2).all(|w| w[0] < w[1]) {
            return Err(SpaceError::BadLayerMap { block });
        }
        Ok(())
    }
}

/// The architecture universe: an ordered chain of bottleneck blocks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchSpace {
    pub blocks: Vec<BlockSpec>,
    /// Input side length in pixels; block `b` runs at `input_resolution >> (b + 2)`.
    pub input_resolution: usize,
    /// Full-width output channels of each block.
    pub base_channels: Vec<usize>,
    /// Side of the middle convolution of each bottleneck.
    pub kernel_size: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSearchSpace {
    blocks: Vec<BlockSpec>,
    input_resolution: usize,
    base_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    kernel_size: usize,
}

fn default_kernel() -> usize {
    3
}

impl<'de> Deserialize<'de> for SearchSpace {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = RawSearchSpace::deserialize(de)?;
        SearchSpace::new(raw.blocks, raw.input_resolution, raw.base_channels, raw.kernel_size)
            .map_err(serde::de::Error::custom)
    }
}

impl SearchSpace {
    pub fn new(
        blocks: Vec<BlockSpec>,
        input_resolution: usize,
        base_channels: Vec<usize>,
        kernel_size: usize,
    ) -> Result<Self, SpaceError> {
        let space = SearchSpace { blocks, input_resolution, base_channels, kernel_size };
        space.validate()?;
        Ok(space)
    }

    /// Four-block OFA-ResNet-like space: D={0,1,2}, W={0.65,0.8,1.0},
    /// E={0.2,0.25,0.35}, 224px input.
    pub fn ofa_default() -> Self {
        let block = BlockSpec::new(&[0, 1, 2], &[0.65, 0.8, 1.0], &[0.2, 0.25, 0.35]);
        SearchSpace::new(vec![block; 4], 224, vec![64, 128, 256, 512], 3)
            .expect("default space is valid")
    }

    /// CompOFA-style coupling for [`SearchSpace::ofa_default`].
    pub fn ofa_compound_rule() -> CoupleRule {
        CoupleRule { pairs: vec![(0, 0.65), (1, 0.8), (2, 1.0)] }
    }

    fn validate(&self) -> Result<(), SpaceError> {
        if self.blocks.is_empty() {
            return Err(SpaceError::NoBlocks);
        }
        if self.base_channels.len() != self.blocks.len() {
            return Err(SpaceError::BaseChannels {
                expected: self.blocks.len(),
                got: self.base_channels.len(),
            });
        }
        if self.input_resolution == 0 || self.kernel_size == 0 || self.base_channels.contains(&0) {
            return Err(SpaceError::NonPositive);
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            blk.validate(b)?;
            let chans: Vec<usize> = blk.width_choices.iter().map(|&w| self.channels(b, w)).collect();
            for i in 1..chans.len() {
                if chans[i] == chans[i - 1] {
                    return Err(SpaceError::WidthCollision {
                        block: b,
                        a: blk.width_choices[i - 1],
                        b: blk.width_choices[i],
                    });
                }
            }
            for (wi, &c) in chans.iter().enumerate() {
                let inner: Vec<usize> = blk.expand_choices.iter().map(|&e| inner_channels(c, e)).collect();
                for i in 1..inner.len() {
                    if inner[i] == inner[i - 1] {
                        return Err(SpaceError::ExpandCollision {
                            block: b,
                            width: blk.width_choices[wi],
                            a: blk.expand_choices[i - 1],
                            b: blk.expand_choices[i],
                        });
                    }
                }
            }
        }
        // per-block counts must fit the sampler's integer type
        SpaceView::full(self).map(|_| ())
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Σ over blocks of `max_layers`: the fixed token sequence length.
    pub fn total_max_layers(&self) -> usize {
        self.blocks.iter().map(BlockSpec::max_layers).sum()
    }

    /// Output channels of block `b` at width ratio `w`.
    pub fn channels(&self, block: usize, width: f64) -> usize {
        ((self.base_channels[block] as f64 * width).round() as usize).max(1)
    }

    /// Feature-map side length of block `b`.
    pub fn spatial_side(&self, block: usize) -> usize {
        (self.input_resolution >> (block + 2).min(63)).max(1)
    }

    /// Path with every choice at its largest value.
    pub fn max_path(&self) -> Path {
        Path {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockChoice {
                    depth: *b.depth_choices.last().unwrap(),
                    width: *b.width_choices.last().unwrap(),
                    expands: vec![*b.expand_choices.last().unwrap(); b.max_layers()],
                })
                .collect(),
        }
    }

    /// Path with every choice at its smallest value.
    pub fn min_path(&self) -> Path {
        Path {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockChoice {
                    depth: b.depth_choices[0],
                    width: b.width_choices[0],
                    expands: vec![b.expand_choices[0]; b.layers(0)],
                })
                .collect(),
        }
    }

    /// Every violation of the path invariants, empty when the path is valid.
    pub fn check_path(&self, path: &Path) -> Vec<PathViolation> {
        let mut out = Vec::new();
        if path.blocks.len() != self.blocks.len() {
            out.push(PathViolation::BlockCount { expected: self.blocks.len(), got: path.blocks.len() });
            return out;
        }
        for (b, (spec, choice)) in self.blocks.iter().zip(&path.blocks).enumerate() {
            let depth_idx = spec.depth_index(choice.depth);
            if depth_idx.is_none() {
                out.push(PathViolation::Depth { block: b, depth: choice.depth });
            }
            if spec.width_index(choice.width).is_none() {
                out.push(PathViolation::Width { block: b, width: choice.width });
            }
            for (layer, &e) in choice.expands.iter().enumerate() {
                if spec.expand_index(e).is_none() {
                    out.push(PathViolation::Expand { block: b, layer, expand: e });
                }
            }
            if let Some(di) = depth_idx {
                if choice.expands.len() != spec.layers(di) {
                    out.push(PathViolation::LayerCount {
                        block: b,
                        expected: spec.layers(di),
                        got: choice.expands.len(),
                    });
                }
            }
        }
        out
    }

    pub fn validate_path(&self, path: &Path) -> bool {
        self.check_path(path).is_empty()
    }

    /// Index form of a valid path.
    pub fn path_indices(&self, path: &Path) -> Option<Vec<BlockIndices>> {
        if !self.validate_path(path) {
            return None;
        }
        Some(
            self.blocks
                .iter()
                .zip(&path.blocks)
                .map(|(spec, c)| BlockIndices {
                    depth: spec.depth_index(c.depth).unwrap(),
                    width: spec.width_index(c.width).unwrap(),
                    expands: c.expands.iter().map(|&e| spec.expand_index(e).unwrap()).collect(),
                })
                .collect(),
        )
    }

    pub fn path_from_indices(&self, idx: &[BlockIndices]) -> Path {
        Path {
            blocks: self
                .blocks
                .iter()
                .zip(idx)
                .map(|(spec, i)| BlockChoice {
                    depth: spec.depth_choices[i.depth],
                    width: spec.width_choices[i.width],
                    expands: i.expands.iter().map(|&e| spec.expand_choices[e]).collect(),
                })
                .collect(),
        }
    }
}

/// Inner (bottleneck) channels for `channels` at expand ratio `expand`.
pub fn inner_channels(channels: usize, expand: f64) -> usize {
    ((channels as f64 * expand).round() as usize).max(1)
}

/// Machine-readable reason a path is invalid against a space.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathViolation {
    BlockCount { expected: usize, got: usize },
    Depth { block: usize, depth: u32 },
    Width { block: usize, width: f64 },
    Expand { block: usize, layer: usize, expand: f64 },
    LayerCount { block: usize, expected: usize, got: usize },
}

/// Restricts blocks to a fixed list of (depth, width) tuples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupleRule {
    pub pairs: Vec<(u32, f64)>,
}

/// Choices made in one block of a path.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockChoice {
    pub depth: u32,
    pub width: f64,
    /// One expand ratio per active layer.
    pub expands: Vec<f64>,
}

/// One concrete architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub blocks: Vec<BlockChoice>,
}

impl Eq for Path {}

impl Hash for Path {
    fn hash<H: Hasher>(&self, state: &mut H) {
        for b in &self.blocks {
            b.depth.hash(state);
            b.width.to_bits().hash(state);
            b.expands.len().hash(state);
            for e in &b.expands {
                e.to_bits().hash(state);
            }
        }
    }
}

/// Shortest round-trip decimal with at least one fractional digit ("1.0", "0.25").
pub fn fmt_ratio(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireBlock {
    d: u32,
    e: Vec<String>,
    w: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WirePath {
    blocks: Vec<WireBlock>,
}

impl Serialize for Path {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WirePath {
            blocks: self
                .blocks
                .iter()
                .map(|b| WireBlock {
                    d: b.depth,
                    e: b.expands.iter().map(|&e| fmt_ratio(e)).collect(),
                    w: fmt_ratio(b.width),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Path {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let wire = WirePath::deserialize(de)?;
        let parse = |s: &str| s.parse::<f64>().map_err(serde::de::Error::custom);
        let mut blocks = Vec::with_capacity(wire.blocks.len());
        for b in wire.blocks {
            blocks.push(BlockChoice {
                depth: b.d,
                width: parse(&b.w)?,
                expands: b.e.iter().map(|e| parse(e)).collect::<Result<_, _>>()?,
            });
        }
        Ok(Path { blocks })
    }
}

impl Path {
    /// Canonical JSON: sorted keys, ratios as decimal strings.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("path serialization is infallible")
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical_json())
    }
}

/// Index form of one block choice.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockIndices {
    pub depth: usize,
    pub width: usize,
    pub expands: Vec<usize>,
}

/// Identifies one operation: an expand choice at a layer under a width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpKey {
    pub block: usize,
    pub layer: usize,
    pub width: usize,
    pub expand: usize,
}

/// A restriction of a [`SearchSpace`]: allowed (depth, width) tuples per block
/// and allowed expands per (block, layer, width).
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceView {
    space: SearchSpace,
    tuples: Vec<Vec<(usize, usize)>>,
    expands: Vec<Vec<Vec<Vec<usize>>>>,
    // per block: path count of each tuple, and their sum
    weights: Vec<Vec<u128>>,
    totals: Vec<u128>,
}

impl SpaceView {
    pub fn full(space: &SearchSpace) -> Result<Self, SpaceError> {
        let tuples = space
            .blocks
            .iter()
            .map(|b| {
                (0..b.depth_choices.len())
                    .flat_map(|d| (0..b.width_choices.len()).map(move |w| (d, w)))
                    .collect()
            })
            .collect();
        let expands = space
            .blocks
            .iter()
            .map(|b| {
                let all: Vec<usize> = (0..b.expand_choices.len()).collect();
                vec![vec![all; b.width_choices.len()]; b.max_layers()]
            })
            .collect();
        Self::build(space.clone(), tuples, expands)
    }

    fn build(
        space: SearchSpace,
        tuples: Vec<Vec<(usize, usize)>>,
        expands: Vec<Vec<Vec<Vec<usize>>>>,
    ) -> Result<Self, SpaceError> {
        let mut weights = Vec::with_capacity(tuples.len());
        let mut totals = Vec::with_capacity(tuples.len());
        for (b, ts) in tuples.iter().enumerate() {
            let spec = &space.blocks[b];
            let mut ws = Vec::with_capacity(ts.len());
            let mut total: u128 = 0;
            for &(d, w) in ts {
                let mut n: u128 = 1;
                for layer in 0..spec.layers(d) {
                    n = n
                        .checked_mul(expands[b][layer][w].len() as u128)
                        .ok_or(SpaceError::BlockTooLarge { block: b })?;
                }
                total = total.checked_add(n).ok_or(SpaceError::BlockTooLarge { block: b })?;
                ws.push(n);
            }
            weights.push(ws);
            totals.push(total);
        }
        Ok(SpaceView { space, tuples, expands, weights, totals })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    /// Restrict every block to the rule's (depth, width) tuples.
    pub fn with_coupling(&self, rule: &CoupleRule) -> Result<Self, SpaceError> {
        let mut tuples = Vec::with_capacity(self.tuples.len());
        for (b, spec) in self.space.blocks.iter().enumerate() {
            let mut allowed = Vec::new();
            for &(depth, width) in &rule.pairs {
                let d = spec.depth_index(depth);
                let w = spec.width_index(width);
                match (d, w) {
                    (Some(d), Some(w)) => {
                        if self.tuples[b].contains(&(d, w)) {
                            allowed.push((d, w));
                        }
                    }
                    _ => return Err(SpaceError::BadCoupleTuple { block: b, depth, width }),
                }
            }
            allowed.sort_unstable();
            allowed.dedup();
            if allowed.is_empty() {
                return Err(SpaceError::EmptyCoupling { block: b });
            }
            tuples.push(allowed);
        }
        Self::build(self.space.clone(), tuples, self.expands.clone())
    }

    /// Remove operations. Tuples left without any realization are dropped.
    pub fn without_ops(&self, removed: &[OpKey]) -> Result<Self, SpaceError> {
        let mut expands = self.expands.clone();
        for op in removed {
            let slot = expands
                .get_mut(op.block)
                .and_then(|b| b.get_mut(op.layer))
                .and_then(|l| l.get_mut(op.width))
                .ok_or_else(|| SpaceError::UnknownOperation(format!("{op:?}")))?;
            slot.retain(|&e| e != op.expand);
        }
        let tuples: Vec<Vec<(usize, usize)>> = self
            .tuples
            .iter()
            .enumerate()
            .map(|(b, ts)| {
                let spec = &self.space.blocks[b];
                ts.iter()
                    .copied()
                    .filter(|&(d, w)| (0..spec.layers(d)).all(|l| !expands[b][l][w].is_empty()))
                    .collect()
            })
            .collect();
        if tuples.iter().any(Vec::is_empty) {
            return Err(SpaceError::Empty);
        }
        Self::build(self.space.clone(), tuples, expands)
    }

    pub fn tuples(&self, block: usize) -> &[(usize, usize)] {
        &self.tuples[block]
    }

    pub fn allowed_expands(&self, block: usize, layer: usize, width: usize) -> &[usize] {
        &self.expands[block][layer][width]
    }

    pub fn op_allowed(&self, op: OpKey) -> bool {
        self.expands[op.block][op.layer][op.width].contains(&op.expand)
    }

    /// Paths in the view per block.
    pub fn block_count(&self, block: usize) -> u128 {
        self.totals[block]
    }

    pub fn count(&self) -> BigUint {
        self.totals.iter().fold(BigUint::one(), |acc, &t| acc * BigUint::from(t))
    }

    /// Valid in the underlying space and made only of allowed tuples/expands.
    pub fn contains(&self, path: &Path) -> bool {
        match self.space.path_indices(path) {
            Some(idx) => self.contains_indices(&idx),
            None => false,
        }
    }

    pub fn contains_indices(&self, idx: &[BlockIndices]) -> bool {
        idx.len() == self.tuples.len()
            && idx.iter().enumerate().all(|(b, bi)| {
                self.tuples[b].contains(&(bi.depth, bi.width))
                    && bi.expands.len() == self.space.blocks[b].layers(bi.depth)
                    && bi
                        .expands
                        .iter()
                        .enumerate()
                        .all(|(l, e)| self.expands[b][l][bi.width].contains(e))
            })
    }

    /// Every path exactly once, lexicographic in (block, tuple, expands).
    pub fn enumerate(&self, cap: u64) -> Result<PathIter<'_>, SpaceError> {
        let count = self.count();
        if count > BigUint::from(cap) {
            return Err(SpaceError::TooLarge { count, cap });
        }
        let options: Vec<Vec<BlockIndices>> = (0..self.tuples.len()).map(|b| self.block_options(b)).collect();
        Ok(PathIter { view: self, cursor: vec![0; options.len()], options, done: false })
    }

    /// Every realization of block `b` in the view, lexicographic.
    pub fn block_options(&self, b: usize) -> Vec<BlockIndices> {
        let spec = &self.space.blocks[b];
        let mut out = Vec::new();
        for &(d, w) in &self.tuples[b] {
            let layers = spec.layers(d);
            let lists: Vec<&[usize]> = (0..layers).map(|l| self.expands[b][l][w].as_slice()).collect();
            let mut pos = vec![0usize; layers];
            loop {
                out.push(BlockIndices {
                    depth: d,
                    width: w,
                    expands: pos.iter().zip(&lists).map(|(&p, l)| l[p]).collect(),
                });
                // odometer, last layer fastest
                let mut wrapped = true;
                for k in (0..layers).rev() {
                    pos[k] += 1;
                    if pos[k] < lists[k].len() {
                        wrapped = false;
                        break;
                    }
                    pos[k] = 0;
                }
                if wrapped {
                    break;
                }
            }
        }
        out
    }

    /// Exactly uniform draw over the view's paths, in index form.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<BlockIndices> {
        (0..self.tuples.len()).map(|b| self.sample_block(b, rng)).collect()
    }

    pub fn sample_block<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> BlockIndices {
        let mut r = rng.random_range(0..self.totals[b]);
        let mut pick = self.tuples[b].len() - 1;
        for (i, &w) in self.weights[b].iter().enumerate() {
            if r < w {
                pick = i;
                break;
            }
            r -= w;
        }
        let (d, w) = self.tuples[b][pick];
        let expands = (0..self.space.blocks[b].layers(d))
            .map(|l| {
                let opts = &self.expands[b][l][w];
                opts[rng.random_range(0..opts.len())]
            })
            .collect();
        BlockIndices { depth: d, width: w, expands }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Path {
        let idx = self.sample_indices(rng);
        self.space.path_from_indices(&idx)
    }
}

/// Lexicographic path stream produced by [`SpaceView::enumerate`].
pub struct PathIter<'a> {
    view: &'a SpaceView,
    options: Vec<Vec<BlockIndices>>,
    cursor: Vec<usize>,
    done: bool,
}

impl Iterator for PathIter<'_> {
    type Item = Path;

    fn next(&mut self) -> Option<Path> {
        if self.done {
            return None;
        }
        let idx: Vec<BlockIndices> =
            self.cursor.iter().enumerate().map(|(b, &c)| self.options[b][c].clone()).collect();
        let mut k = self.cursor.len();
        loop {
            if k == 0 {
                self.done = true;
                break;
            }
            k -= 1;
            self.cursor[k] += 1;
            if self.cursor[k] < self.options[k].len() {
                break;
            }
            self.cursor[k] = 0;
        }
        Some(self.view.space.path_from_indices(&idx))
    }
}

/// Exact number of paths, optionally under a coupling rule.
pub fn count_paths(space: &SearchSpace, coupling: Option<&CoupleRule>) -> Result<BigUint, SpaceError> {
    Ok(view_of(space, coupling)?.count())
}

/// All paths of the (optionally coupled) space, or an error above `cap`.
pub fn enumerate_paths(
    space: &SearchSpace,
    coupling: Option<&CoupleRule>,
    cap: u64,
) -> Result<Vec<Path>, SpaceError> {
    let view = view_of(space, coupling)?;
    let paths = view.enumerate(cap)?.collect();
    Ok(paths)
}

pub fn sample_uniform<R: Rng + ?Sized>(
    space: &SearchSpace,
    coupling: Option<&CoupleRule>,
    rng: &mut R,
) -> Result<Path, SpaceError> {
    Ok(view_of(space, coupling)?.sample(rng))
}

pub fn apply_couple_rule(space: &SearchSpace, rule: &CoupleRule) -> Result<SpaceView, SpaceError> {
    SpaceView::full(space)?.with_coupling(rule)
}

fn view_of(space: &SearchSpace, coupling: Option<&CoupleRule>) -> Result<SpaceView, SpaceError> {
    match coupling {
        Some(rule) => apply_couple_rule(space, rule),
        None => SpaceView::full(space),
    }
}
