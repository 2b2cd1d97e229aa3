//! Selection-based trajectory planning at desk scale.
//!
//! A procedural driving simulator and rule-based scorer provide labels for a
//! fixed trajectory vocabulary; a coarse-to-fine selector learns to rank the
//! vocabulary from entity tokens.

pub mod diffcore;
pub mod evaluator;
pub mod geom;
pub mod harness;
pub mod planner;
pub mod scenario;
pub mod vocab;

pub use evaluator::{EvaluatorConfig, LabelSet, MetricVersion, SubscoreVector};
pub use harness::{EvalReport, HarnessError, SuprimConfig};
pub use planner::{Checkpoint, PlannerConfig, Selector};
pub use scenario::{GenConfig, Scenario};
pub use vocab::{GridSpec, TrajectoryVocabulary};
