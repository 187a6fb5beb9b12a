//! Supernet search-space pruning with a FLOPs-conditioned path ranking model.

pub mod arch_space;
pub mod cost_model;
pub mod evo_search;
pub mod path_filter;
pub mod pruning;
pub mod supernet_sim;
pub mod tensor;
pub mod tokenizer;

pub use arch_space::{count_paths, BlockChoice, BlockSpec, CoupleRule, Path, SearchSpace, SpaceError, SpaceView};
pub use cost_model::{make_buckets, path_flops, total_flops, BucketSampler, BucketSpec, CostError};
pub use evo_search::{brute_force_best, evolve, pareto_sweep, EvoConfig, SearchError, SearchResult};
pub use path_filter::{FilterConfig, FilterError, PathFilter, PathScorer, ScoredPath, TrainConfig};
pub use pruning::{OperationId, PruneError, PruneRatios, PruneState, Strategy};
pub use supernet_sim::{ExperimentConfig, Mode, SimError, SyntheticOracle, ToySupernet};
