//! The progressive search pipeline and its experiments.

pub mod backbone;
pub mod cache;
pub mod experiments;
pub mod plan;
pub mod proxy;
pub mod report;
pub mod search;

pub use cache::{FeatureCache, ImageSet, Split};
pub use plan::{RewardMode, SearchPlan, SearchSpace};
pub use proxy::{
    stage_graph, EvalContext, EvalJob, EvalOutcome, EvalStatus, ImageSource, PyramidCache, StageKind, Trained,
};
pub use search::{
    job_seed, top_k, Evaluator, LocalEvaluator, LogLine, PyramidSpec, Search, SearchOutcome, SearchPaths,
    SearchRecord,
};
