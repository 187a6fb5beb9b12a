//! Desk-scale stand-ins for a detection supernet: an analytic loss oracle and
//! a toy weight-sharing supernet, plus the end-to-end pruned training loop.

mod algorithm;
mod oracle;
mod toy;

pub use algorithm::{
    baseline_coupled, baseline_uniform, run_algorithm1, run_with_prune, stage_seed, EpochLog, ExperimentConfig, Mode, NoSink, Phase,
    Pipeline, RunOutputs, StageArtifact, StageSink, TrainRunLog,
};
pub use oracle::{OracleConfig, SyntheticOracle};
pub use toy::{toy_space, Split, ToyConfig, ToySupernet, ToyTask};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_space::{Path, SpaceError, SpaceView};
use crate::cost_model::{total_flops, BucketSampler, BucketSpec, CostError};
use crate::path_filter::{FilterError, ScoredPath};
use crate::pruning::PruneError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("invalid path {0}")]
    InvalidPath(String),
    #[error("training diverged (loss {0})")]
    Diverged(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Sink(String),
}

/// Something that assigns a validation loss to a path.
pub trait PathEvaluator {
    fn evaluate(&self, path: &Path) -> Result<f64, SimError>;
}

impl PathEvaluator for SyntheticOracle {
    fn evaluate(&self, path: &Path) -> Result<f64, SimError> {
        if !self.space().validate_path(path) {
            return Err(SimError::InvalidPath(path.to_string()));
        }
        Ok(self.eval(path))
    }
}

impl PathEvaluator for ToySupernet {
    fn evaluate(&self, path: &Path) -> Result<f64, SimError> {
        self.eval(path, Split::Val)
    }
}

/// `m` uniform paths per bucket of `view`, each evaluated on `source`.
/// Returns the records (bucket-major) and the buckets that had no paths.
pub fn sample_scored_dataset<E: PathEvaluator + ?Sized, R: Rng + ?Sized>(
    source: &E,
    view: &SpaceView,
    buckets: &BucketSpec,
    m_per_bucket: usize,
    rng: &mut R,
) -> Result<(Vec<ScoredPath>, Vec<usize>), SimError> {
    let sampler = BucketSampler::new(view, buckets)?;
    let mut out = Vec::with_capacity(m_per_bucket * buckets.num_buckets);
    let mut sparse = Vec::new();
    for k in 0..buckets.num_buckets {
        for _ in 0..m_per_bucket {
            let Some(path) = sampler.sample(k, rng) else {
                log::warn!("bucket {k} has no paths in this view");
                sparse.push(k);
                break;
            };
            let flops = total_flops(view.space(), &path);
            let target_loss = source.evaluate(&path)?;
            out.push(ScoredPath { bucket: k, flops, path, target_loss });
        }
    }
    Ok((out, sparse))
}

/// Mean loss of uniform test paths in one bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketEval {
    pub bucket: usize,
    pub paths: usize,
    pub mean_loss: f64,
}

/// `per_bucket` uniform test paths from every bucket of `view`.
pub fn evaluate_buckets<E: PathEvaluator + ?Sized, R: Rng + ?Sized>(
    source: &E,
    view: &SpaceView,
    buckets: &BucketSpec,
    per_bucket: usize,
    rng: &mut R,
) -> Result<Vec<BucketEval>, SimError> {
    let (records, _) = sample_scored_dataset(source, view, buckets, per_bucket, rng)?;
    Ok((0..buckets.num_buckets)
        .map(|k| {
            let losses: Vec<f64> = records.iter().filter(|r| r.bucket == k).map(|r| r.target_loss).collect();
            let mean_loss = if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 };
            BucketEval { bucket: k, paths: losses.len(), mean_loss }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_space::SearchSpace;
    use crate::cost_model::make_buckets;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ten_per_bucket() {
        let s = SearchSpace::ofa_default();
        let buckets = make_buckets(&s, 5).unwrap();
        let o = SyntheticOracle::new(&s, OracleConfig::default());
        let view = SpaceView::full(&s).unwrap();
        let (d, sparse) = sample_scored_dataset(&o, &view, &buckets, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(sparse.is_empty());
        assert_eq!(d.len(), 50);
        for k in 0..5 {
            assert_eq!(d.iter().filter(|r| r.bucket == k).count(), 10);
        }
        for r in &d {
            assert_eq!(buckets.bucket_of(total_flops(&s, &r.path)).unwrap(), r.bucket);
            assert_eq!(r.target_loss, o.eval(&r.path));
        }
        let (d2, _) = sample_scored_dataset(&o, &view, &buckets, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d, d2);
    }
}
