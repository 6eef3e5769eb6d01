//! Timed tensor access sequences.
//!
//! Operators run back to back on one compute stream in topological order. Each
//! operator execution emits one TUA per input and one TGA per output, all
//! stamped with the execution's `[start, end)` interval.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ComputeGraph, TensorKind};
use crate::ids::{AccessId, JobId, OpId, TensorId};

/// Per-operator latency in ticks.
pub type LatencyTable = BTreeMap<OpId, u64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessType {
    Tga,
    Tua,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorAccess {
    pub access_id: AccessId,
    pub tensor_id: TensorId,
    pub op_id: OpId,
    pub job_id: JobId,
    pub access_type: AccessType,
    pub start_time: u64,
    pub end_time: u64,
    pub release_flag: bool,
}

/// One operator run inside an access sequence. Recomputations appear as extra
/// executions of the regenerating operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub op_id: OpId,
    pub start_time: u64,
    pub end_time: u64,
    /// Indices into [`TensorAccessSequence::accesses`].
    pub accesses: std::ops::Range<usize>,
    pub recompute_of: Option<TensorId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorAccessSequence {
    pub job_id: JobId,
    pub accesses: Vec<TensorAccess>,
    pub executions: Vec<Execution>,
    pub iteration_period: u64,
    index: BTreeMap<AccessId, usize>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccessError {
    #[error("no latency entry for op {0}")]
    MissingLatency(OpId),
}

impl TensorAccessSequence {
    pub(crate) fn from_parts(
        job_id: JobId,
        accesses: Vec<TensorAccess>,
        executions: Vec<Execution>,
    ) -> Self {
        let iteration_period = accesses.iter().map(|a| a.end_time).max().unwrap_or(0);
        let index = accesses
            .iter()
            .enumerate()
            .map(|(i, a)| (a.access_id, i))
            .collect();
        TensorAccessSequence {
            job_id,
            accesses,
            executions,
            iteration_period,
            index,
        }
    }

    pub fn get(&self, id: AccessId) -> Option<&TensorAccess> {
        self.index.get(&id).map(|&i| &self.accesses[i])
    }

    pub fn position(&self, id: AccessId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Index of the execution that contains access `id`.
    pub fn execution_of(&self, id: AccessId) -> Option<usize> {
        let pos = self.position(id)?;
        let idx = self
            .executions
            .partition_point(|e| e.accesses.end <= pos);
        (idx < self.executions.len()).then_some(idx)
    }

    /// Accesses grouped by tensor, each group in time order.
    pub fn by_tensor(&self) -> BTreeMap<TensorId, Vec<&TensorAccess>> {
        let mut map: BTreeMap<TensorId, Vec<&TensorAccess>> = BTreeMap::new();
        for a in &self.accesses {
            map.entry(a.tensor_id).or_default().push(a);
        }
        map
    }

    pub fn accesses_of(&self, tensor: TensorId) -> Vec<&TensorAccess> {
        self.accesses.iter().filter(|a| a.tensor_id == tensor).collect()
    }

    pub fn tga_of(&self, tensor: TensorId) -> Option<&TensorAccess> {
        self.accesses
            .iter()
            .find(|a| a.tensor_id == tensor && a.access_type == AccessType::Tga)
    }

    /// Latest access ending at or before `time`; ties go to the later access.
    pub fn trigger_for(&self, time: u64) -> Option<&TensorAccess> {
        self.accesses
            .iter()
            .filter(|a| a.end_time <= time)
            .max_by_key(|a| (a.end_time, self.index[&a.access_id]))
    }

    pub fn max_access_id(&self) -> Option<AccessId> {
        self.accesses.iter().map(|a| a.access_id).max()
    }

    pub(crate) fn set_release_flags(&mut self, flagged: impl Fn(AccessId) -> bool) {
        for a in &mut self.accesses {
            a.release_flag = flagged(a.access_id);
        }
    }
}

pub fn generate_access_sequence(
    graph: &ComputeGraph,
    latencies: &LatencyTable,
) -> Result<TensorAccessSequence, AccessError> {
    let mut accesses = Vec::new();
    let mut executions = Vec::new();
    let mut clock = 0u64;
    let mut next_id = 0u32;
    for &op_id in graph.topological_order() {
        let op = graph.op(op_id);
        let latency = *latencies
            .get(&op_id)
            .ok_or(AccessError::MissingLatency(op_id))?;
        let (start, end) = (clock, clock + latency);
        let first = accesses.len();
        let typed = op
            .inputs
            .iter()
            .map(|&t| (t, AccessType::Tua))
            .chain(op.outputs.iter().map(|&t| (t, AccessType::Tga)));
        for (tensor_id, access_type) in typed {
            accesses.push(TensorAccess {
                access_id: AccessId(next_id),
                tensor_id,
                op_id,
                job_id: graph.job_id(),
                access_type,
                start_time: start,
                end_time: end,
                release_flag: false,
            });
            next_id += 1;
        }
        executions.push(Execution {
            op_id,
            start_time: start,
            end_time: end,
            accesses: first..accesses.len(),
            recompute_of: None,
        });
        clock = end;
    }
    Ok(TensorAccessSequence::from_parts(
        graph.job_id(),
        accesses,
        executions,
    ))
}

/// Flags the last access of every tensor that does not outlive the iteration.
pub fn activity_analysis(seq: &TensorAccessSequence, graph: &ComputeGraph) -> TensorAccessSequence {
    let mut last: BTreeMap<TensorId, AccessId> = BTreeMap::new();
    for a in &seq.accesses {
        last.insert(a.tensor_id, a.access_id);
    }
    let flagged: std::collections::BTreeSet<AccessId> = last
        .into_iter()
        .filter(|(t, _)| !is_retained(graph.tensor(*t).kind))
        .map(|(_, a)| a)
        .collect();
    let mut out = seq.clone();
    out.set_release_flags(|id| flagged.contains(&id));
    out
}

fn is_retained(kind: TensorKind) -> bool {
    kind.is_persistent()
}
