use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch_space::{Path, SearchSpace, SpaceView};
use crate::cost_model::{make_buckets, BucketSpec};
use crate::evo_search::EvoConfig;
use crate::path_filter::{train, FilterConfig, PathFilter, ScoredPath, TrainConfig, TrainReport};
use crate::pruning::{
    path_thresholds, prune_operations, rejection_sample, score_operations, OperationCandidate, PruneRatios, PruneState,
    Strategy, DEFAULT_MAX_TRIES, DEFAULT_OP_SAMPLES,
};

use super::{
    evaluate_buckets, sample_scored_dataset, toy_space, BucketEval, OracleConfig, PathEvaluator, SimError,
    SyntheticOracle, ToyConfig, ToySupernet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Losses come from the analytic oracle; no weights are trained.
    Oracle,
    /// Losses are validation MSEs of the toy supernet.
    Supernet,
}

/// One JSON file describing a whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub space: SearchSpace,
    pub num_buckets: usize,
    pub oracle: OracleConfig,
    pub toy: ToyConfig,
    pub filter: FilterConfig,
    pub filter_train: TrainConfig,
    /// Oracle-labelled paths for pretraining the filter (total over buckets); 0 skips it.
    pub pretrain_paths: usize,
    /// Paths validated on the warmed-up source for fine-tuning the filter (total over buckets).
    pub finetune_paths: usize,
    pub strategy: Strategy,
    pub ratios: PruneRatios,
    pub op_samples: usize,
    /// Paths per bucket for the δ quantiles.
    pub threshold_samples: usize,
    pub max_tries: usize,
    pub warmup_epochs: usize,
    pub finetune_epochs: usize,
    pub eval_per_bucket: usize,
    pub search: EvoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            mode: Mode::Supernet,
            space: toy_space(),
            num_buckets: 5,
            oracle: OracleConfig::default(),
            toy: ToyConfig::default(),
            filter: FilterConfig::default(),
            filter_train: TrainConfig { max_pairs_per_bucket: Some(1024), ..Default::default() },
            pretrain_paths: 2000,
            finetune_paths: 200,
            strategy: Strategy::FlopsScoreAll,
            ratios: PruneRatios::default(),
            op_samples: DEFAULT_OP_SAMPLES,
            threshold_samples: 100,
            max_tries: DEFAULT_MAX_TRIES,
            warmup_epochs: 5,
            finetune_epochs: 65,
            eval_per_bucket: 15,
            search: EvoConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.num_buckets == 0 {
            return bad("num_buckets must be >= 1");
        }
        if self.finetune_paths < 2 * self.num_buckets {
            return bad("finetune_paths must give at least 2 paths per bucket");
        }
        if self.max_tries == 0 || self.op_samples == 0 || self.threshold_samples == 0 {
            return bad("max_tries, op_samples and threshold_samples must be >= 1");
        }
        let o = &self.oracle;
        if !(o.width_gain > 0.0 && o.expand_gain > 0.0 && o.sigma >= 0.0 && o.interaction >= 0.0) {
            return bad("oracle gains must be > 0, sigma and interaction >= 0");
        }
        self.ratios.validate()?;
        self.search.validate().map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }
}

/// 64-bit sub-seed of `master` for a named stage.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean minibatch loss (supernet) or mean oracle loss of the drawn paths.
    pub mean_loss: f64,
    pub paths: Vec<Path>,
    pub tries: usize,
    pub fallbacks: usize,
    /// Not part of the reproducible record.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Append-only record of the supernet training loop.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRunLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainRunLog {
    pub fn fallbacks(&self) -> usize {
        self.epochs.iter().map(|e| e.fallbacks).sum()
    }

    pub fn wall_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_seconds).sum()
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("log serializes") + "\n").collect()
    }
}

/// Intermediate results handed out as each stage finishes.
pub enum StageArtifact<'a> {
    Supernet { stage: &'a str, net: &'a ToySupernet },
    Dataset { name: &'a str, records: &'a [ScoredPath], sparse: &'a [usize] },
    Filter { filter: &'a PathFilter, reports: &'a [TrainReport] },
    Candidates(&'a [OperationCandidate]),
    Prune(&'a PruneState),
    Log(&'a TrainRunLog),
    Eval { name: &'a str, results: &'a [BucketEval] },
}

/// Receives stage artifacts (e.g. to checkpoint them).
pub trait StageSink {
    fn record(&mut self, artifact: StageArtifact<'_>) -> Result<(), SimError>;
}

/// Discards everything.
pub struct NoSink;

impl StageSink for NoSink {
    fn record(&mut self, _: StageArtifact<'_>) -> Result<(), SimError> {
        Ok(())
    }
}

/// A configured experiment: shared buckets, full view and seeded stage streams.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: ExperimentConfig,
    buckets: BucketSpec,
    full: SpaceView,
}

enum Source<'a> {
    Oracle(SyntheticOracle),
    Net(&'a ToySupernet),
}

impl PathEvaluator for Source<'_> {
    fn evaluate(&self, path: &Path) -> Result<f64, SimError> {
        match self {
            Source::Oracle(o) => o.evaluate(path),
            Source::Net(n) => n.evaluate(path),
        }
    }
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let buckets = make_buckets(&cfg.space, cfg.num_buckets)?;
        let full = SpaceView::full(&cfg.space)?;
        Ok(Pipeline { cfg, buckets, full })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn buckets(&self) -> &BucketSpec {
        &self.buckets
    }

    pub fn full_view(&self) -> &SpaceView {
        &self.full
    }

    pub fn rng(&self, stage: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stage_seed(self.cfg.seed, stage))
    }

    pub fn oracle(&self) -> SyntheticOracle {
        SyntheticOracle::new(&self.cfg.space, self.cfg.oracle.clone())
    }

    /// Fresh supernet in supernet mode, `None` in oracle mode.
    pub fn init_supernet(&self) -> Result<Option<ToySupernet>, SimError> {
        match self.cfg.mode {
            Mode::Oracle => Ok(None),
            Mode::Supernet => {
                Ok(Some(ToySupernet::new(&self.cfg.space, self.cfg.toy.clone(), stage_seed(self.cfg.seed, "supernet_init"))?))
            }
        }
    }

    /// `epochs` epochs of one phase. Each step draws a path from `view`
    /// (through the gate when given) and takes one SGD step on it. In oracle
    /// mode only the draws are made and logged.
    pub fn train_phase(
        &self,
        mut net: Option<&mut ToySupernet>,
        view: &SpaceView,
        gate: Option<(&PathFilter, &[f64])>,
        phase: Phase,
        epochs: usize,
        log: &mut TrainRunLog,
    ) -> Result<(), SimError> {
        let mut rng = self.rng(phase.name());
        let toy = &self.cfg.toy;
        let oracle = if net.is_none() { Some(self.oracle()) } else { None };
        let mut order: Vec<usize> = (0..toy.train_samples).collect();
        for epoch in 0..epochs {
            let start = Instant::now();
            order.shuffle(&mut rng);
            let mut entry = EpochLog { phase, epoch, mean_loss: 0.0, paths: Vec::new(), tries: 0, fallbacks: 0, wall_seconds: 0.0 };
            let mut total = 0.0;
            for rows in order.chunks(toy.batch_size) {
                let path = match gate {
                    Some((filter, delta)) => {
                        let d = rejection_sample(view, filter, &self.buckets, delta, &mut rng, self.cfg.max_tries)?;
                        entry.tries += d.tries;
                        entry.fallbacks += d.fallback as usize;
                        d.path
                    }
                    None => {
                        entry.tries += 1;
                        view.sample(&mut rng)
                    }
                };
                total += match (net.as_deref_mut(), &oracle) {
                    (Some(n), _) => n.step(&path, rows)?,
                    (None, Some(o)) => o.eval(&path),
                    (None, None) => unreachable!(),
                };
                entry.paths.push(path);
            }
            entry.mean_loss = total / entry.paths.len().max(1) as f64;
            entry.wall_seconds = start.elapsed().as_secs_f64();
            log::info!("{} epoch {epoch}: loss {:.6}, fallbacks {}", phase.name(), entry.mean_loss, entry.fallbacks);
            log.epochs.push(entry);
        }
        Ok(())
    }

    fn per_bucket(&self, total: usize) -> usize {
        total / self.cfg.num_buckets
    }

    /// Oracle-labelled pretraining set (empty when disabled).
    pub fn pretrain_dataset(&self) -> Result<Vec<ScoredPath>, SimError> {
        if self.cfg.pretrain_paths == 0 {
            return Ok(Vec::new());
        }
        let o = self.oracle();
        let m = self.per_bucket(self.cfg.pretrain_paths);
        Ok(sample_scored_dataset(&o, &self.full, &self.buckets, m, &mut self.rng("pretrain_data"))?.0)
    }

    /// `finetune_paths / B` uniform paths per bucket, validated on the
    /// supernet (or the oracle when `net` is `None`).
    pub fn validation_dataset(&self, net: Option<&ToySupernet>) -> Result<(Vec<ScoredPath>, Vec<usize>), SimError> {
        let src = match net {
            Some(n) => Source::Net(n),
            None => Source::Oracle(self.oracle()),
        };
        let m = self.per_bucket(self.cfg.finetune_paths);
        sample_scored_dataset(&src, &self.full, &self.buckets, m, &mut self.rng("dataset"))
    }

    /// Fresh filter, optionally pretrained, then fine-tuned on `finetune`.
    pub fn train_filter(&self, pretrain: &[ScoredPath], finetune: &[ScoredPath]) -> Result<(PathFilter, Vec<TrainReport>), SimError> {
        let fcfg = FilterConfig { init_seed: stage_seed(self.cfg.seed, "filter_init"), ..self.cfg.filter.clone() };
        let mut filter = PathFilter::new(&self.cfg.space, &self.buckets, fcfg)?;
        let mut reports = Vec::new();
        if !pretrain.is_empty() {
            let tc = TrainConfig { seed: stage_seed(self.cfg.seed, "pretrain"), ..self.cfg.filter_train.clone() };
            reports.push(train(&mut filter, pretrain, &tc)?);
        }
        let tc = TrainConfig { seed: stage_seed(self.cfg.seed, "filter_train"), ..self.cfg.filter_train.clone() };
        reports.push(train(&mut filter, finetune, &tc)?);
        Ok((filter, reports))
    }

    /// Operation scores, operation pruning and per-bucket thresholds.
    /// With `r_path = 0` every δ is 0, so the gate admits the first draw.
    pub fn prune(&self, filter: &PathFilter) -> Result<(PruneState, SpaceView, Vec<OperationCandidate>), SimError> {
        filter.check_compatible(&self.cfg.space, &self.buckets)?;
        let cands = score_operations(filter, &self.full, self.cfg.op_samples, &mut self.rng("op_scores"))?;
        let (view, removed) =
            prune_operations(&self.full, &cands, self.cfg.strategy, &self.cfg.ratios, &self.buckets, &mut self.rng("prune"))?;
        let (thresholds, unreachable) = if self.cfg.ratios.r_path == 0.0 {
            (vec![0.0; self.cfg.num_buckets], Vec::new())
        } else {
            let t = path_thresholds(
                filter,
                &view,
                &self.buckets,
                self.cfg.ratios.r_path,
                self.cfg.threshold_samples,
                &mut self.rng("thresholds"),
            )?;
            (t.delta, t.unreachable)
        };
        let state = PruneState {
            strategy: self.cfg.strategy,
            ratios: self.cfg.ratios,
            removed,
            thresholds,
            unreachable_buckets: unreachable,
            seed: self.cfg.seed,
        };
        Ok((state, view, cands))
    }

    /// Mean loss of `eval_per_bucket` uniform test paths per bucket of `view`.
    pub fn evaluate(&self, net: Option<&ToySupernet>, view: &SpaceView) -> Result<Vec<BucketEval>, SimError> {
        let src = match net {
            Some(n) => Source::Net(n),
            None => Source::Oracle(self.oracle()),
        };
        evaluate_buckets(&src, view, &self.buckets, self.cfg.eval_per_bucket, &mut self.rng("eval"))
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub net: Option<ToySupernet>,
    pub filter: Option<PathFilter>,
    pub prune: PruneState,
    pub view: SpaceView,
    pub candidates: Vec<OperationCandidate>,
    pub dataset: Vec<ScoredPath>,
    pub log: TrainRunLog,
    pub eval: Vec<BucketEval>,
}

/// Warm-up → validate sampled paths → fine-tune the filter → prune
/// operations → thresholds → gated main training → evaluation.
pub fn run_algorithm1(cfg: &ExperimentConfig, sink: &mut dyn StageSink) -> Result<RunOutputs, SimError> {
    let p = Pipeline::new(cfg.clone())?;
    let mut net = p.init_supernet()?;
    let mut log = TrainRunLog::default();
    p.train_phase(net.as_mut(), p.full_view(), None, Phase::Warmup, cfg.warmup_epochs, &mut log)?;
    if let Some(n) = &net {
        sink.record(StageArtifact::Supernet { stage: "warmup", net: n })?;
    }

    let pretrain = p.pretrain_dataset()?;
    if !pretrain.is_empty() {
        sink.record(StageArtifact::Dataset { name: "pretrain", records: &pretrain, sparse: &[] })?;
    }
    let (dataset, sparse) = p.validation_dataset(net.as_ref())?;
    sink.record(StageArtifact::Dataset { name: "finetune", records: &dataset, sparse: &sparse })?;

    let (filter, reports) = p.train_filter(&pretrain, &dataset)?;
    sink.record(StageArtifact::Filter { filter: &filter, reports: &reports })?;

    let (state, view, candidates) = p.prune(&filter)?;
    sink.record(StageArtifact::Candidates(&candidates))?;
    sink.record(StageArtifact::Prune(&state))?;
    let mut out = gated_main(&p, net, log, filter, state, view, sink)?;
    out.candidates = candidates;
    out.dataset = dataset;
    Ok(out)
}

fn gated_main(
    p: &Pipeline,
    mut net: Option<ToySupernet>,
    mut log: TrainRunLog,
    filter: PathFilter,
    state: PruneState,
    view: SpaceView,
    sink: &mut dyn StageSink,
) -> Result<RunOutputs, SimError> {
    let epochs = p.cfg.finetune_epochs;
    p.train_phase(net.as_mut(), &view, Some((&filter, &state.thresholds)), Phase::Main, epochs, &mut log)?;
    sink.record(StageArtifact::Log(&log))?;
    if let Some(n) = &net {
        sink.record(StageArtifact::Supernet { stage: "final", net: n })?;
    }
    let eval = p.evaluate(net.as_ref(), &view)?;
    sink.record(StageArtifact::Eval { name: "eval", results: &eval })?;
    Ok(RunOutputs { net, filter: Some(filter), prune: state, view, candidates: Vec::new(), dataset: Vec::new(), log, eval })
}

/// Warm-up, then main training gated by an existing filter and prune state.
pub fn run_with_prune(
    cfg: &ExperimentConfig,
    filter: PathFilter,
    state: PruneState,
    sink: &mut dyn StageSink,
) -> Result<RunOutputs, SimError> {
    let p = Pipeline::new(cfg.clone())?;
    filter.check_compatible(&cfg.space, &p.buckets)?;
    if state.thresholds.len() != cfg.num_buckets {
        return Err(SimError::Config(format!("prune state has {} thresholds for {} buckets", state.thresholds.len(), cfg.num_buckets)));
    }
    let view = state.apply(&p.full)?;
    let mut net = p.init_supernet()?;
    let mut log = TrainRunLog::default();
    p.train_phase(net.as_mut(), p.full_view(), None, Phase::Warmup, cfg.warmup_epochs, &mut log)?;
    if let Some(n) = &net {
        sink.record(StageArtifact::Supernet { stage: "warmup", net: n })?;
    }
    gated_main(&p, net, log, filter, state, view, sink)
}

fn baseline_on(cfg: &ExperimentConfig, view_of: impl Fn(&Pipeline) -> Result<SpaceView, SimError>, sink: &mut dyn StageSink) -> Result<RunOutputs, SimError> {
    let p = Pipeline::new(cfg.clone())?;
    let view = view_of(&p)?;
    let mut net = p.init_supernet()?;
    let mut log = TrainRunLog::default();
    p.train_phase(net.as_mut(), &view, None, Phase::Warmup, cfg.warmup_epochs, &mut log)?;
    p.train_phase(net.as_mut(), &view, None, Phase::Main, cfg.finetune_epochs, &mut log)?;
    sink.record(StageArtifact::Log(&log))?;
    if let Some(n) = &net {
        sink.record(StageArtifact::Supernet { stage: "final", net: n })?;
    }
    let eval = p.evaluate(net.as_ref(), &view)?;
    sink.record(StageArtifact::Eval { name: "eval", results: &eval })?;
    Ok(RunOutputs {
        net,
        filter: None,
        prune: PruneState::identity(cfg.num_buckets, cfg.seed),
        view,
        candidates: Vec::new(),
        dataset: Vec::new(),
        log,
        eval,
    })
}

/// Uniform sampling over the whole space for the same epochs.
pub fn baseline_uniform(cfg: &ExperimentConfig, sink: &mut dyn StageSink) -> Result<RunOutputs, SimError> {
    baseline_on(cfg, |p| Ok(p.full_view().clone()), sink)
}

/// Uniform sampling over the depth/width-coupled sub-space.
pub fn baseline_coupled(cfg: &ExperimentConfig, sink: &mut dyn StageSink) -> Result<RunOutputs, SimError> {
    baseline_on(cfg, |p| Ok(p.full_view().with_coupling(&SearchSpace::ofa_compound_rule())?), sink)
}
