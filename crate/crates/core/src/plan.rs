//! Scheduling plans: swap, recompute and release events for one job.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::access::{AccessType, Execution, TensorAccess, TensorAccessSequence};
use crate::graph::{ComputeGraph, TensorKind};
use crate::ids::{AccessId, JobId, OpId, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Out,
    In,
}

/// Linear PCIe model: `ceil(size / bandwidth) + setup` ticks per transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferModel {
    pub bandwidth: u64,
    pub setup: u64,
}

impl TransferModel {
    pub fn new(bandwidth: u64, setup: u64) -> Self {
        assert!(bandwidth > 0, "bandwidth must be positive");
        TransferModel { bandwidth, setup }
    }

    pub fn duration(&self, size: u64) -> u64 {
        size.div_ceil(self.bandwidth) + self.setup
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapEvent {
    pub event_id: u32,
    /// Shared by a swap-out and the swap-in that brings the same storage back.
    pub pair_id: u32,
    pub job_id: JobId,
    #[serde(rename = "tensor")]
    pub tensor_id: TensorId,
    pub direction: Direction,
    /// `None` anchors the event to the iteration start.
    pub trigger_access: Option<AccessId>,
    pub delta_time: u64,
    pub start_time: u64,
    pub end_time: u64,
    pub earliest_time: u64,
    pub latest_time: u64,
    pub wraps_iteration: bool,
    /// Swap-out: the access it follows. Swap-in: the access it must precede.
    pub anchor_access: AccessId,
}

impl SwapEvent {
    pub fn duration(&self) -> u64 {
        self.end_time - self.start_time
    }

    pub fn interval(&self) -> (u64, u64) {
        (self.start_time, self.end_time)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecomputeEvent {
    pub event_id: u32,
    pub job_id: JobId,
    #[serde(rename = "tensor")]
    pub tensor_id: TensorId,
    /// The TUA served by the regenerated tensor.
    pub target_access: AccessId,
    /// The access after which the tensor is released.
    pub release_after: AccessId,
    pub regen_op: OpId,
    pub recompute_latency: u64,
    pub memory_saving: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulingPlan {
    pub job_id: JobId,
    pub version: u64,
    pub swap_events: Vec<SwapEvent>,
    pub recompute_events: Vec<RecomputeEvent>,
    pub release_flags: BTreeSet<AccessId>,
}

impl SchedulingPlan {
    /// An empty plan that only carries the release flags already set on `seq`.
    pub fn from_sequence(seq: &TensorAccessSequence) -> Self {
        SchedulingPlan {
            job_id: seq.job_id,
            version: 0,
            swap_events: Vec::new(),
            recompute_events: Vec::new(),
            release_flags: seq
                .accesses
                .iter()
                .filter(|a| a.release_flag)
                .map(|a| a.access_id)
                .collect(),
        }
    }

    pub fn next_event_id(&self) -> u32 {
        let swaps = self.swap_events.iter().map(|e| e.event_id);
        let recs = self.recompute_events.iter().map(|e| e.event_id);
        swaps.chain(recs).max().map_or(0, |m| m + 1)
    }

    pub fn next_pair_id(&self) -> u32 {
        self.swap_events
            .iter()
            .map(|e| e.pair_id)
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn swaps_of(&self, tensor: TensorId) -> impl Iterator<Item = &SwapEvent> {
        self.swap_events.iter().filter(move |e| e.tensor_id == tensor)
    }

    pub fn is_swapped(&self, tensor: TensorId) -> bool {
        self.swaps_of(tensor).next().is_some()
    }

    pub fn is_recomputed(&self, tensor: TensorId) -> bool {
        self.recompute_events.iter().any(|r| r.tensor_id == tensor)
    }

    pub fn swap_intervals(&self) -> Vec<(u64, u64)> {
        self.swap_events.iter().map(SwapEvent::interval).collect()
    }

    /// Parameters that begin each iteration on the host because a wrapped
    /// swap-in brings them back.
    pub fn wrapped_in(&self) -> BTreeSet<TensorId> {
        self.swap_events
            .iter()
            .filter(|e| e.wraps_iteration && e.direction == Direction::In)
            .map(|e| e.tensor_id)
            .collect()
    }

    pub fn remove_pair(&mut self, pair_id: u32) {
        self.swap_events.retain(|e| e.pair_id != pair_id);
    }

    /// Access sequence with recomputations inserted and release flags applied.
    pub fn effective_sequence(
        &self,
        base: &TensorAccessSequence,
        graph: &ComputeGraph,
    ) -> TensorAccessSequence {
        let mut recomputes: Vec<&RecomputeEvent> = self.recompute_events.iter().collect();
        recomputes.sort_by_key(|r| r.event_id);
        let base_next = base.max_access_id().map_or(0, |a| a.0 + 1);
        let mut first_id = BTreeMap::new();
        let mut next = base_next;
        for r in &recomputes {
            first_id.insert(r.event_id, next);
            next += graph.op(r.regen_op).inputs.len() as u32 + 1;
        }
        let mut by_exec: BTreeMap<usize, Vec<&RecomputeEvent>> = BTreeMap::new();
        for r in &recomputes {
            if let Some(e) = base.execution_of(r.target_access) {
                by_exec.entry(e).or_default().push(r);
            }
        }

        let mut accesses = Vec::with_capacity(base.accesses.len());
        let mut executions = Vec::with_capacity(base.executions.len());
        let mut shift = 0u64;
        for (idx, exec) in base.executions.iter().enumerate() {
            for r in by_exec.get(&idx).into_iter().flatten() {
                let start = exec.start_time + shift;
                let end = start + r.recompute_latency;
                let first = accesses.len();
                let mut id = first_id[&r.event_id];
                let inputs = graph.op(r.regen_op).inputs.iter().map(|&t| (t, AccessType::Tua));
                for (tensor_id, access_type) in inputs.chain([(r.tensor_id, AccessType::Tga)]) {
                    accesses.push(TensorAccess {
                        access_id: AccessId(id),
                        tensor_id,
                        op_id: r.regen_op,
                        job_id: base.job_id,
                        access_type,
                        start_time: start,
                        end_time: end,
                        release_flag: false,
                    });
                    id += 1;
                }
                executions.push(Execution {
                    op_id: r.regen_op,
                    start_time: start,
                    end_time: end,
                    accesses: first..accesses.len(),
                    recompute_of: Some(r.tensor_id),
                });
                shift += r.recompute_latency;
            }
            let first = accesses.len();
            for a in &base.accesses[exec.accesses.clone()] {
                let mut a = a.clone();
                a.start_time += shift;
                a.end_time += shift;
                accesses.push(a);
            }
            executions.push(Execution {
                op_id: exec.op_id,
                start_time: exec.start_time + shift,
                end_time: exec.end_time + shift,
                accesses: first..accesses.len(),
                recompute_of: None,
            });
        }
        let mut seq = TensorAccessSequence::from_parts(base.job_id, accesses, executions);
        seq.set_release_flags(|id| self.release_flags.contains(&id));
        seq
    }
}

/// Anchors an absolute start time as `(trigger, delta)` against `seq`.
pub fn anchor(seq: &TensorAccessSequence, start: u64) -> (Option<AccessId>, u64) {
    match seq.trigger_for(start) {
        Some(a) => (Some(a.access_id), start - a.end_time),
        None => (None, start),
    }
}

/// Absolute start of an anchored event under `seq`.
pub fn resolve(seq: &TensorAccessSequence, trigger: Option<AccessId>, delta: u64) -> u64 {
    trigger
        .and_then(|t| seq.get(t))
        .map_or(0, |a| a.end_time)
        + delta
}

/// Tensors resident when an iteration begins: parameters, model inputs and
/// outputs, except parameters that a wrapped swap-in brings back.
pub fn initial_resident(graph: &ComputeGraph, plan: &SchedulingPlan) -> BTreeMap<TensorId, u64> {
    let wrapped = plan.wrapped_in();
    graph
        .tensors()
        .iter()
        .filter(|t| {
            matches!(
                t.kind,
                TensorKind::Parameter | TensorKind::Input | TensorKind::Output
            )
        })
        .filter(|t| !wrapped.contains(&t.id))
        .map(|t| (t.id, t.size))
        .collect()
}
