//! Compute-graph model for one training job.
//!
//! A graph is a DAG of operators that consume and produce sized tensors. The
//! optimizer's update operators are part of the graph; an updated parameter is
//! a distinct tensor that reuses the storage of the parameter it replaces.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{JobId, OpId, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Input,
    Interim,
    Parameter,
    UpdatedParameter,
    Output,
}

impl TensorKind {
    /// Tensors that stay allocated across the iteration boundary.
    pub fn is_persistent(self) -> bool {
        matches!(
            self,
            TensorKind::Parameter | TensorKind::UpdatedParameter | TensorKind::Output
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ForwardBackward,
    Optimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub id: TensorId,
    pub size: u64,
    pub kind: TensorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub id: OpId,
    pub kind: String,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    #[serde(default)]
    pub attributes: Vec<f64>,
    pub phase: Phase,
}

impl OperatorSpec {
    pub fn is_update(&self) -> bool {
        self.phase == Phase::Optimize && self.kind == UPDATE_KIND
    }
}

pub const UPDATE_KIND: &str = "update";

/// On-disk layout of a graph file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub job_id: JobId,
    pub tensors: Vec<TensorSpec>,
    pub ops: Vec<OperatorSpec>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate tensor id {0}")]
    DuplicateTensor(TensorId),
    #[error("duplicate op id {0}")]
    DuplicateOp(OpId),
    #[error("tensor {0} has nonpositive size")]
    NonPositiveSize(TensorId),
    #[error("op {op} references unknown tensor {tensor}")]
    DanglingTensor { op: OpId, tensor: TensorId },
    #[error("op {op} lists tensor {tensor} more than once")]
    RepeatedTensor { op: OpId, tensor: TensorId },
    #[error("op {0} produces no tensors")]
    NoOutputs(OpId),
    #[error("tensor {0} has no producing op")]
    MissingProducer(TensorId),
    #[error("tensor {tensor} is produced by both op {first} and op {second}")]
    MultipleProducers {
        tensor: TensorId,
        first: OpId,
        second: OpId,
    },
    #[error("cycle detected through op {0}")]
    Cycle(OpId),
    #[error("update op {op} is malformed: {reason}")]
    BadUpdate { op: OpId, reason: String },
    #[error("parameter {tensor} is read by op {op} after it was updated")]
    ReadAfterUpdate { tensor: TensorId, op: OpId },
}

/// A validated compute graph for one job.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeGraph {
    job_id: JobId,
    tensors: Vec<TensorSpec>,
    ops: Vec<OperatorSpec>,
    tensor_index: BTreeMap<TensorId, usize>,
    op_index: BTreeMap<OpId, usize>,
    producer: BTreeMap<TensorId, OpId>,
    consumers: BTreeMap<TensorId, Vec<OpId>>,
    // updated parameter -> parameter whose storage it reuses
    alias_of: BTreeMap<TensorId, TensorId>,
    updated_by: BTreeMap<TensorId, TensorId>,
    order: Vec<OpId>,
}

impl ComputeGraph {
    pub fn new(
        job_id: JobId,
        mut tensors: Vec<TensorSpec>,
        mut ops: Vec<OperatorSpec>,
    ) -> Result<Self, GraphError> {
        tensors.sort_by_key(|t| t.id);
        ops.sort_by_key(|o| o.id);

        let mut tensor_index = BTreeMap::new();
        for (i, t) in tensors.iter().enumerate() {
            if t.size == 0 {
                return Err(GraphError::NonPositiveSize(t.id));
            }
            if tensor_index.insert(t.id, i).is_some() {
                return Err(GraphError::DuplicateTensor(t.id));
            }
        }

        let mut op_index = BTreeMap::new();
        let mut producer = BTreeMap::new();
        let mut consumers: BTreeMap<TensorId, Vec<OpId>> = BTreeMap::new();
        for (i, op) in ops.iter().enumerate() {
            if op_index.insert(op.id, i).is_some() {
                return Err(GraphError::DuplicateOp(op.id));
            }
            if op.outputs.is_empty() {
                return Err(GraphError::NoOutputs(op.id));
            }
            let mut seen = BTreeSet::new();
            for &t in op.inputs.iter().chain(op.outputs.iter()) {
                if !tensor_index.contains_key(&t) {
                    return Err(GraphError::DanglingTensor { op: op.id, tensor: t });
                }
                if !seen.insert(t) {
                    return Err(GraphError::RepeatedTensor { op: op.id, tensor: t });
                }
            }
            for &t in &op.outputs {
                if let Some(first) = producer.insert(t, op.id) {
                    return Err(GraphError::MultipleProducers {
                        tensor: t,
                        first,
                        second: op.id,
                    });
                }
            }
            for &t in &op.inputs {
                consumers.entry(t).or_default().push(op.id);
            }
        }
        for t in &tensors {
            if !producer.contains_key(&t.id) {
                return Err(GraphError::MissingProducer(t.id));
            }
        }

        let mut graph = ComputeGraph {
            job_id,
            tensors,
            ops,
            tensor_index,
            op_index,
            producer,
            consumers,
            alias_of: BTreeMap::new(),
            updated_by: BTreeMap::new(),
            order: Vec::new(),
        };
        graph.order = graph.kahn_order()?;
        graph.link_updates()?;
        Ok(graph)
    }

    fn kahn_order(&self) -> Result<Vec<OpId>, GraphError> {
        let mut indegree: BTreeMap<OpId, usize> = self.ops.iter().map(|o| (o.id, 0)).collect();
        for op in &self.ops {
            let preds: BTreeSet<OpId> = op.inputs.iter().map(|t| self.producer[t]).collect();
            *indegree.get_mut(&op.id).unwrap() = preds.len();
        }
        let mut ready: BinaryHeap<Reverse<OpId>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut order = Vec::with_capacity(self.ops.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            let op = self.op(id);
            let succs: BTreeSet<OpId> = op
                .outputs
                .iter()
                .flat_map(|t| self.consumers.get(t).into_iter().flatten().copied())
                .collect();
            for s in succs {
                let d = indegree.get_mut(&s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(s));
                }
            }
        }
        if order.len() != self.ops.len() {
            let placed: BTreeSet<OpId> = order.iter().copied().collect();
            let stuck = self
                .ops
                .iter()
                .map(|o| o.id)
                .find(|id| !placed.contains(id))
                .unwrap();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    fn link_updates(&mut self) -> Result<(), GraphError> {
        let position: BTreeMap<OpId, usize> =
            self.order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        for op in &self.ops {
            let updated: Vec<TensorId> = op
                .outputs
                .iter()
                .copied()
                .filter(|t| self.tensor(*t).kind == TensorKind::UpdatedParameter)
                .collect();
            if !op.is_update() {
                if let Some(&t) = updated.first() {
                    return Err(GraphError::BadUpdate {
                        op: op.id,
                        reason: format!("non-update op produces updated parameter {t}"),
                    });
                }
                continue;
            }
            let bad = |reason: String| GraphError::BadUpdate { op: op.id, reason };
            if op.outputs.len() != 1 || updated.len() != 1 {
                return Err(bad("must output exactly one updated parameter".into()));
            }
            let u = updated[0];
            let p = *op
                .inputs
                .first()
                .ok_or_else(|| bad("first input must be the parameter".into()))?;
            let param = self.tensor(p);
            if param.kind != TensorKind::Parameter {
                return Err(bad(format!("first input {p} is not a parameter")));
            }
            if param.size != self.tensor(u).size {
                return Err(bad(format!("size of {u} differs from parameter {p}")));
            }
            if self.updated_by.insert(p, u).is_some() {
                return Err(bad(format!("parameter {p} is updated twice")));
            }
            self.alias_of.insert(u, p);
            let at = position[&op.id];
            for &reader in self.consumers.get(&p).into_iter().flatten() {
                if position[&reader] > at {
                    return Err(GraphError::ReadAfterUpdate { tensor: p, op: reader });
                }
            }
        }
        Ok(())
    }

    pub fn from_document(doc: GraphDocument) -> Result<Self, GraphError> {
        ComputeGraph::new(doc.job_id, doc.tensors, doc.ops)
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            job_id: self.job_id,
            tensors: self.tensors.clone(),
            ops: self.ops.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph serializes")
    }

    pub fn job_id(&self) -> JobId {
        self.job_id
    }

    /// Returns a copy of this graph under another job id.
    pub fn with_job_id(&self, job_id: JobId) -> ComputeGraph {
        ComputeGraph {
            job_id,
            ..self.clone()
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn ops(&self) -> &[OperatorSpec] {
        &self.ops
    }

    pub fn tensor(&self, id: TensorId) -> &TensorSpec {
        &self.tensors[self.tensor_index[&id]]
    }

    pub fn try_tensor(&self, id: TensorId) -> Option<&TensorSpec> {
        self.tensor_index.get(&id).map(|&i| &self.tensors[i])
    }

    pub fn op(&self, id: OpId) -> &OperatorSpec {
        &self.ops[self.op_index[&id]]
    }

    pub fn size(&self, id: TensorId) -> u64 {
        self.tensor(id).size
    }

    pub fn producer(&self, id: TensorId) -> OpId {
        self.producer[&id]
    }

    pub fn consumers(&self, id: TensorId) -> &[OpId] {
        self.consumers.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The parameter whose storage `updated` reuses.
    pub fn alias_of(&self, updated: TensorId) -> Option<TensorId> {
        self.alias_of.get(&updated).copied()
    }

    /// The updated parameter that replaces `param` at the end of an iteration.
    pub fn updated_by(&self, param: TensorId) -> Option<TensorId> {
        self.updated_by.get(&param).copied()
    }

    pub fn update_pairs(&self) -> impl Iterator<Item = (TensorId, TensorId)> + '_ {
        self.updated_by.iter().map(|(&p, &u)| (p, u))
    }

    /// Operators in execution order: producers first, ties by ascending id.
    pub fn topological_order(&self) -> &[OpId] {
        &self.order
    }
}

pub fn load_graph(document: &str) -> Result<ComputeGraph, GraphError> {
    let doc: GraphDocument = serde_json::from_str(document)?;
    ComputeGraph::from_document(doc)
}

pub fn topological_order(graph: &ComputeGraph) -> Vec<OpId> {
    graph.topological_order().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn t(id: u32, size: u64, kind: TensorKind) -> TensorSpec {
        TensorSpec {
            id: TensorId(id),
            size,
            kind,
        }
    }

    pub(crate) fn op(id: u32, kind: &str, inputs: &[u32], outputs: &[u32]) -> OperatorSpec {
        OperatorSpec {
            id: OpId(id),
            kind: kind.into(),
            inputs: inputs.iter().map(|&i| TensorId(i)).collect(),
            outputs: outputs.iter().map(|&i| TensorId(i)).collect(),
            attributes: vec![],
            phase: Phase::ForwardBackward,
        }
    }

    const CHAIN: &str = r#"{
        "job_id": 0,
        "tensors": [
            {"id": 0, "size": 4, "kind": "input"},
            {"id": 1, "size": 16, "kind": "parameter"},
            {"id": 2, "size": 8, "kind": "interim"},
            {"id": 3, "size": 2, "kind": "output"}
        ],
        "ops": [
            {"id": 0, "kind": "placeholder", "inputs": [], "outputs": [0, 1], "attributes": [], "phase": "forward_backward"},
            {"id": 1, "kind": "conv2d", "inputs": [0, 1], "outputs": [2], "attributes": [3, 1], "phase": "forward_backward"},
            {"id": 2, "kind": "relu", "inputs": [2], "outputs": [3], "attributes": [], "phase": "forward_backward"}
        ]
    }"#;

    #[test]
    fn parses_three_op_chain() {
        let g = load_graph(CHAIN).unwrap();
        assert_eq!(g.ops().len(), 3);
        assert_eq!(g.tensors().len(), 4);
        assert_eq!(topological_order(&g), vec![OpId(0), OpId(1), OpId(2)]);
    }

    #[test]
    fn rejects_unknown_fields() {
        let doc = CHAIN.replace("\"size\": 4,", "\"size\": 4, \"shape\": [2, 2],");
        assert!(matches!(load_graph(&doc), Err(GraphError::Parse(_))));
    }

    #[test]
    fn rejects_cycle() {
        // relu -> conv -> relu
        let tensors = vec![
            t(0, 1, TensorKind::Interim),
            t(1, 1, TensorKind::Interim),
        ];
        let ops = vec![op(1, "conv", &[1], &[0]), op(2, "relu", &[0], &[1])];
        assert!(matches!(
            ComputeGraph::new(JobId(0), tensors, ops),
            Err(GraphError::Cycle(_))
        ));
    }

    #[test]
    fn reports_offending_ids() {
        let err = ComputeGraph::new(
            JobId(0),
            vec![t(0, 0, TensorKind::Input)],
            vec![op(0, "placeholder", &[], &[0])],
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::NonPositiveSize(TensorId(0))));

        let err = ComputeGraph::new(
            JobId(0),
            vec![t(0, 1, TensorKind::Input)],
            vec![op(0, "placeholder", &[], &[0]), op(1, "relu", &[7], &[0])],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            GraphError::DanglingTensor {
                op: OpId(1),
                tensor: TensorId(7)
            }
        ));

        let err = ComputeGraph::new(
            JobId(0),
            vec![t(0, 1, TensorKind::Input), t(0, 2, TensorKind::Input)],
            vec![op(0, "placeholder", &[], &[0])],
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::DuplicateTensor(TensorId(0))));

        let err = ComputeGraph::new(
            JobId(0),
            vec![t(0, 1, TensorKind::Input)],
            vec![op(3, "placeholder", &[], &[0]), op(3, "placeholder", &[], &[0])],
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::DuplicateOp(OpId(3))));
    }

    #[test]
    fn diamond_breaks_ties_by_id() {
        let tensors = (0..4).map(|i| t(i, 1, TensorKind::Interim)).collect();
        let ops = vec![
            op(0, "a", &[], &[0]),
            op(2, "c", &[0], &[2]),
            op(1, "b", &[0], &[1]),
            op(3, "d", &[1, 2], &[3]),
        ];
        let g = ComputeGraph::new(JobId(0), tensors, ops).unwrap();
        assert_eq!(
            topological_order(&g),
            vec![OpId(0), OpId(1), OpId(2), OpId(3)]
        );
    }

    #[test]
    fn single_op_order() {
        let g = ComputeGraph::new(
            JobId(0),
            vec![t(0, 1, TensorKind::Input)],
            vec![op(5, "placeholder", &[], &[0])],
        )
        .unwrap();
        assert_eq!(topological_order(&g), vec![OpId(5)]);
    }

    #[test]
    fn update_links_alias() {
        let tensors = vec![
            t(0, 8, TensorKind::Parameter),
            t(1, 8, TensorKind::Interim),
            t(2, 8, TensorKind::UpdatedParameter),
        ];
        let mut upd = op(2, UPDATE_KIND, &[0, 1], &[2]);
        upd.phase = Phase::Optimize;
        let ops = vec![
            op(0, "variable", &[], &[0]),
            op(1, "grad", &[0], &[1]),
            upd,
        ];
        let g = ComputeGraph::new(JobId(0), tensors, ops).unwrap();
        assert_eq!(g.alias_of(TensorId(2)), Some(TensorId(0)));
        assert_eq!(g.updated_by(TensorId(0)), Some(TensorId(2)));
    }

    #[test]
    fn rejects_read_after_update() {
        let tensors = vec![
            t(0, 8, TensorKind::Parameter),
            t(1, 8, TensorKind::UpdatedParameter),
            t(2, 8, TensorKind::Interim),
        ];
        let mut upd = op(1, UPDATE_KIND, &[0], &[1]);
        upd.phase = Phase::Optimize;
        let ops = vec![op(0, "variable", &[], &[0]), upd, op(2, "late", &[0, 1], &[2])];
        assert!(matches!(
            ComputeGraph::new(JobId(0), tensors, ops),
            Err(GraphError::ReadAfterUpdate { .. })
        ));
    }
}
