//! Tensor-granularity GPU memory scheduling for multiple concurrent training
//! jobs, with a discrete-event simulator to execute the resulting plans.

pub mod access;
pub mod graph;
pub mod ids;
pub mod latency;
pub mod metrics;
pub mod orchestrator;
pub mod peak;
pub mod plan;
pub mod recompute;
pub mod scenario;
pub mod simulator;
pub mod swap;
pub mod workload;

pub use access::{
    activity_analysis, generate_access_sequence, AccessError, AccessType, LatencyTable,
    TensorAccess, TensorAccessSequence,
};
pub use graph::{
    load_graph, topological_order, ComputeGraph, GraphDocument, GraphError, OperatorSpec, Phase,
    TensorKind, TensorSpec,
};
pub use ids::{AccessId, JobId, OpId, TensorId};
pub use peak::{analyze_peak, build_timeline, merge_global_peak, PeakError, PeakReport};
pub use plan::{Direction, RecomputeEvent, SchedulingPlan, SwapEvent, TransferModel};
