use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch_space::Path;

/// A path with its cost, bucket and measured (or oracle) loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredPath {
    pub bucket: usize,
    pub flops: f64,
    pub path: Path,
    pub target_loss: f64,
}

/// Dataset indices `a`, `b` with label `s = +1` iff `loss(a) <= loss(b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub s: i8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Squared hinge: `max(0, 1 - s·(g_a - g_b))²`.
pub fn pair_loss(g_a: f64, g_b: f64, s: f64) -> f64 {
    let m = (1.0 - s * (g_a - g_b)).max(0.0);
    m * m
}

/// Same-bucket pairs only, at most `cap` per bucket (uniform subsample).
pub fn build_pairs<R: Rng + ?Sized>(data: &[ScoredPath], cap: Option<usize>, rng: &mut R) -> PairBatch {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in data.iter().enumerate() {
        groups.entry(d.bucket).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for (bucket, members) in &groups {
        if members.len() < 2 {
            log::warn!("bucket {bucket} has {} path(s); no pairs", members.len());
            continue;
        }
        pairs.extend(group_pairs(data, members, cap, rng));
    }
    PairBatch { pairs }
}

/// Ablation: pairs drawn from the whole dataset regardless of bucket.
/// The cap is scaled by the number of occupied buckets to keep batch counts comparable.
pub fn build_pairs_unbounded<R: Rng + ?Sized>(data: &[ScoredPath], cap: Option<usize>, rng: &mut R) -> PairBatch {
    let mut buckets: Vec<usize> = data.iter().map(|d| d.bucket).collect();
    buckets.sort_unstable();
    buckets.dedup();
    let all: Vec<usize> = (0..data.len()).collect();
    if all.len() < 2 {
        return PairBatch::default();
    }
    PairBatch { pairs: group_pairs(data, &all, cap.map(|c| c * buckets.len().max(1)), rng) }
}

fn group_pairs<R: Rng + ?Sized>(data: &[ScoredPath], members: &[usize], cap: Option<usize>, rng: &mut R) -> Vec<Pair> {
    let n = members.len();
    let total = n * (n - 1) / 2;
    let make = |i: usize, j: usize| -> Option<Pair> {
        let (a, b) = (members[i], members[j]);
        let (la, lb) = (data[a].target_loss, data[b].target_loss);
        if la == lb {
            return None;
        }
        Some(Pair { a, b, s: if la <= lb { 1 } else { -1 } })
    };
    match cap {
        Some(c) if total > c => {
            // row i holds pairs (i, i+1..n); offsets[i] = first linear index of row i
            let offsets: Vec<usize> = (0..n).scan(0, |acc, i| {
                let o = *acc;
                *acc += n - 1 - i;
                Some(o)
            }).collect();
            let mut picks = index::sample(rng, total, c).into_vec();
            picks.sort_unstable();
            picks
                .into_iter()
                .filter_map(|k| {
                    let i = offsets.partition_point(|&o| o <= k) - 1;
                    let j = i + 1 + (k - offsets[i]);
                    make(i, j)
                })
                .collect()
        }
        _ => (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter_map(|(i, j)| make(i, j)).collect(),
    }
}

/// One JSON record per line.
pub fn write_dataset<W: Write>(mut w: W, data: &[ScoredPath]) -> std::io::Result<()> {
    for d in data {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_dataset<R: BufRead>(r: R) -> std::io::Result<Vec<ScoredPath>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}
