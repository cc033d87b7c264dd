//! KV-cache eviction laboratory: deterministic toy attention traces,
//! importance scoring, risk aggregation, eviction policies, and a
//! fragility-evaluation harness with binary trace I/O.

pub mod aggregation;
pub mod attention;
pub mod eval;
pub mod math;
pub mod policy;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod traceio;

pub use aggregation::AggregationSpec;
pub use attention::{ModelConfig, Trace};
pub use eval::{fragility_analysis, Criterion, FragilityReport};
pub use policy::{build_plan, BudgetScope, EvictionPlan, PolicyKind};
pub use synth::{gen_synthetic, SyntheticRegime};
