//! teamring-core: deterministic simulation and analytic planning for
//! team-replicated multi-ring sequence-parallel attention.
//!
//! - [`tensor`]: dense math, reference attention, blockwise forward and
//!   backward iterations, finite-difference oracle.
//! - [`topology`]: team/ring rank algebra, plans and their invariants.
//! - [`sharding`]: contiguous and zigzag sequence splits.
//! - [`cluster`]: node/link descriptions and rank-to-node placement.
//! - [`exec`]: the message-board executor with exact traces.
//! - [`trace`]: communication event logs and summaries.
//! - [`perf`]: closed-form cost/memory model and step-time estimates.
//! - [`scheduler`]: configuration enumeration and grid search.

pub mod cluster;
pub mod error;
pub mod exec;
pub mod perf;
pub mod scheduler;
pub mod sharding;
pub mod tensor;
pub mod topology;
pub mod trace;

pub use cluster::ClusterSpec;
pub use error::{Error, Result};
pub use exec::{run_backward, run_forward, ExecOptions, Precision, ShardScheme, SimInputs};
pub use perf::{CostReport, ModelSpec};
pub use scheduler::{grid_search, Profiler, SearchResult};
pub use sharding::ShardAssignment;
pub use tensor::{DenseMatrix, MaskKind};
pub use topology::{ParallelConfig, Placement, TopologyPlan};
pub use trace::{CommEvent, CommTrace};
