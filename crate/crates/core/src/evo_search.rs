//! FLOPs-constrained regularized evolution with the path filter as proxy.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_space::{BlockIndices, Path, SpaceError, SpaceView};
use crate::cost_model::{flops_extremes, total_flops};
use crate::path_filter::{FilterError, PathScorer};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("budget {budget} MFLOPs is below the cheapest path ({min} MFLOPs)")]
    BudgetTooSmall { budget: f64, min: f64 },
    #[error("no feasible path in {tries} uniform draws under {budget} MFLOPs")]
    NoFeasible { budget: f64, tries: usize },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvoConfig {
    pub population_size: usize,
    pub sample_size: usize,
    pub generations: usize,
    /// Probability of re-drawing each decision (depth, width, each expand).
    pub mutation_prob: f64,
    /// Re-mutations of an infeasible child before the parent is copied instead.
    pub retry_cap: usize,
    /// Uniform draws allowed for filling the initial population.
    pub init_max_tries: usize,
    /// FLOPs budget τ in MFLOPs; omitted from JSON when unbounded.
    #[serde(skip_serializing_if = "is_unbounded")]
    pub budget: f64,
    pub seed: u64,
}

fn is_unbounded(b: &f64) -> bool {
    *b == f64::INFINITY
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            population_size: 64,
            sample_size: 16,
            generations: 500,
            mutation_prob: 0.1,
            retry_cap: 50,
            init_max_tries: 100_000,
            budget: f64::INFINITY,
            seed: 0,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.into()));
        if self.population_size == 0 || self.sample_size == 0 || self.sample_size > self.population_size {
            return bad("need 1 <= sample_size <= population_size");
        }
        if self.generations == 0 {
            return bad("generations must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return bad("mutation_prob must lie in [0, 1]");
        }
        if self.budget.is_nan() {
            return bad("budget is NaN");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Path,
    pub score: f64,
    /// MFLOPs of `best`.
    pub flops: f64,
    /// 0 when the best path came from the initial population.
    pub generation_found: usize,
    /// Best-ever score after initialization and after each generation.
    pub history: Vec<f64>,
}

struct Individual {
    idx: Vec<BlockIndices>,
    path: Path,
    score: f64,
    flops: f64,
}

fn redraw<R: Rng + ?Sized>(opts: &[usize], rng: &mut R) -> usize {
    opts[rng.random_range(0..opts.len())]
}

/// Re-draws each decision of `parent` with probability `p`, staying inside `view`.
pub fn mutate<R: Rng + ?Sized>(view: &SpaceView, parent: &[BlockIndices], p: f64, rng: &mut R) -> Vec<BlockIndices> {
    let space = view.space();
    parent
        .iter()
        .enumerate()
        .map(|(b, bi)| {
            let tuples = view.tuples(b);
            let mut depths: Vec<usize> = tuples.iter().map(|t| t.0).collect();
            depths.sort_unstable();
            depths.dedup();
            let mut widths: Vec<usize> = tuples.iter().map(|t| t.1).collect();
            widths.sort_unstable();
            widths.dedup();
            let mut d = bi.depth;
            let mut w = bi.width;
            if rng.random_bool(p) {
                d = redraw(&depths, rng);
            }
            if rng.random_bool(p) {
                w = redraw(&widths, rng);
            }
            if !tuples.contains(&(d, w)) {
                // coupled views: keep the drawn depth, pick a width that goes with it
                let same: Vec<usize> = tuples.iter().filter(|t| t.0 == d).map(|t| t.1).collect();
                w = redraw(&same, rng);
            }
            let expands = (0..space.blocks[b].layers(d))
                .map(|l| {
                    let opts = view.allowed_expands(b, l, w);
                    match bi.expands.get(l) {
                        Some(e) if opts.contains(e) && !rng.random_bool(p) => *e,
                        _ => redraw(opts, rng),
                    }
                })
                .collect();
            BlockIndices { depth: d, width: w, expands }
        })
        .collect()
}

fn score_one<S: PathScorer + ?Sized>(scorer: &S, path: &Path) -> Result<f64, SearchError> {
    Ok(scorer.score_paths(std::slice::from_ref(path))?[0])
}

/// Aging evolution maximizing `scorer` over paths of `view` with FLOPs ≤ budget.
pub fn evolve<S: PathScorer + ?Sized>(scorer: &S, view: &SpaceView, cfg: &EvoConfig) -> Result<SearchResult, SearchError> {
    evolve_seeded(scorer, view, cfg, &[])
}

/// As [`evolve`], with `seeds` placed in the initial population (infeasible
/// or foreign ones are skipped).
pub fn evolve_seeded<S: PathScorer + ?Sized>(
    scorer: &S,
    view: &SpaceView,
    cfg: &EvoConfig,
    seeds: &[Path],
) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let space = view.space();
    let min = total_flops(space, &flops_extremes(view).0);
    if cfg.budget < min {
        return Err(SearchError::BudgetTooSmall { budget: cfg.budget, min });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut init: Vec<(Vec<BlockIndices>, Path, f64)> = Vec::with_capacity(cfg.population_size);
    for p in seeds.iter().take(cfg.population_size) {
        let f = total_flops(space, p);
        if let Some(idx) = space.path_indices(p).filter(|i| view.contains_indices(i) && f <= cfg.budget) {
            init.push((idx, p.clone(), f));
        }
    }
    let mut tries = 0;
    while init.len() < cfg.population_size {
        if tries == cfg.init_max_tries {
            return Err(SearchError::NoFeasible { budget: cfg.budget, tries });
        }
        tries += 1;
        let idx = view.sample_indices(&mut rng);
        let path = space.path_from_indices(&idx);
        let f = total_flops(space, &path);
        if f <= cfg.budget {
            init.push((idx, path, f));
        }
    }
    let paths: Vec<Path> = init.iter().map(|x| x.1.clone()).collect();
    let scores = scorer.score_paths(&paths)?;
    let mut pop: VecDeque<Individual> = init
        .into_iter()
        .zip(scores)
        .map(|((idx, path, flops), score)| Individual { idx, path, score, flops })
        .collect();

    let mut best = 0;
    for (i, ind) in pop.iter().enumerate() {
        if ind.score > pop[best].score {
            best = i;
        }
    }
    let b0 = &pop[best];
    let mut result = SearchResult {
        best: b0.path.clone(),
        score: b0.score,
        flops: b0.flops,
        generation_found: 0,
        history: Vec::with_capacity(cfg.generations + 1),
    };
    result.history.push(result.score);

    for gen in 1..=cfg.generations {
        let picks = sample_indices(&mut rng, pop.len(), cfg.sample_size);
        let mut winner = picks.index(0);
        for i in picks.iter() {
            if pop[i].score > pop[winner].score {
                winner = i;
            }
        }
        let parent = &pop[winner];
        let mut child = None;
        for _ in 0..=cfg.retry_cap {
            let idx = mutate(view, &parent.idx, cfg.mutation_prob, &mut rng);
            let path = space.path_from_indices(&idx);
            let flops = total_flops(space, &path);
            if flops <= cfg.budget {
                child = Some((idx, path, flops));
                break;
            }
        }
        let ind = match child {
            Some((idx, path, flops)) => {
                let score = score_one(scorer, &path)?;
                Individual { idx, path, score, flops }
            }
            None => Individual { idx: parent.idx.clone(), path: parent.path.clone(), score: parent.score, flops: parent.flops },
        };
        if ind.score > result.score {
            result.best = ind.path.clone();
            result.score = ind.score;
            result.flops = ind.flops;
            result.generation_found = gen;
        }
        pop.push_back(ind);
        pop.pop_front();
        result.history.push(result.score);
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPath {
    pub path: Path,
    pub score: f64,
    pub flops: f64,
}

/// Exact argmax of `scorer` over the feasible paths of `view`; ties go to the
/// lexicographically first path. Fails when the view has more than `cap` paths.
pub fn brute_force_best<S: PathScorer + ?Sized>(
    scorer: &S,
    view: &SpaceView,
    budget: f64,
    cap: u64,
) -> Result<Option<BestPath>, SearchError> {
    let space = view.space();
    let mut best: Option<BestPath> = None;
    let mut batch: Vec<(Path, f64)> = Vec::with_capacity(512);
    let flush = |batch: &mut Vec<(Path, f64)>, best: &mut Option<BestPath>| -> Result<(), SearchError> {
        let paths: Vec<Path> = batch.iter().map(|x| x.0.clone()).collect();
        let scores = scorer.score_paths(&paths)?;
        for ((path, flops), score) in batch.drain(..).zip(scores) {
            if best.as_ref().is_none_or(|b| score > b.score) {
                *best = Some(BestPath { path, score, flops });
            }
        }
        Ok(())
    };
    for path in view.enumerate(cap)? {
        let f = total_flops(space, &path);
        if f <= budget {
            batch.push((path, f));
            if batch.len() == 512 {
                flush(&mut batch, &mut best)?;
            }
        }
    }
    flush(&mut batch, &mut best)?;
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: f64,
    pub result: SearchResult,
    /// Filled in by callers that can evaluate the path (oracle mode).
    pub oracle_loss: Option<f64>,
}

/// One evolution per budget, in ascending budget order. Each run is seeded
/// with the previous best, so the scores never decrease with the budget.
pub fn pareto_sweep<S: PathScorer + ?Sized>(
    scorer: &S,
    view: &SpaceView,
    budgets: &[f64],
    cfg: &EvoConfig,
) -> Result<Vec<SweepRow>, SearchError> {
    let mut sorted = budgets.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows: Vec<SweepRow> = Vec::with_capacity(sorted.len());
    for budget in sorted {
        let seeds: Vec<Path> = rows.last().map(|r| vec![r.result.best.clone()]).unwrap_or_default();
        let result = evolve_seeded(scorer, view, &EvoConfig { budget, ..cfg.clone() }, &seeds)?;
        rows.push(SweepRow { budget, result, oracle_loss: None });
    }
    Ok(rows)
}

/// `budget,flops,proxy_score,oracle_loss,generation_found` table.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("budget,flops,proxy_score,oracle_loss,generation_found\n");
    for r in rows {
        let loss = r.oracle_loss.map(|l| format!("{l:.6}")).unwrap_or_default();
        writeln!(s, "{:.6},{:.6},{:.6},{},{}", r.budget, r.result.flops, r.result.score, loss, r.result.generation_found)
            .expect("write to string");
    }
    s
}
