//! Operator latency prediction, online EWMA correction and the replan trigger.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::LatencyTable;
use crate::graph::{ComputeGraph, OperatorSpec};
use crate::ids::{JobId, OpId, TensorId};

#[derive(Debug, Error, PartialEq)]
pub enum LatencyError {
    #[error("gpu usage {0} outside [0, 1]")]
    UsageOutOfRange(f64),
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("op {op} needs {needed} {what} slots but the layout has {available}")]
    LayoutOverflow {
        op: OpId,
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("op kind {0} has fewer than 2 samples")]
    InsufficientSamples(String),
    #[error("op kind {0} has identical features in every sample")]
    DegenerateFeatures(String),
    #[error("op kind {kind} mixes feature lengths {expected} and {found}")]
    InconsistentLength {
        kind: String,
        expected: usize,
        found: usize,
    },
    #[error("no model for op kind {0}")]
    UnknownKind(String),
    #[error("least-squares solve failed for op kind {0}")]
    SolveFailed(String),
    #[error("malformed predictor document: {0}")]
    Parse(String),
}

/// Fixed slot counts for one op kind; shorter inputs are zero padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub dims_len: usize,
    pub attrs_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub input_dims: Vec<f64>,
    pub attributes: Vec<f64>,
    pub gpu_usage: f64,
}

impl FeatureVector {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.input_dims.clone();
        v.extend_from_slice(&self.attributes);
        v.push(self.gpu_usage);
        v
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            dims_len: self.input_dims.len(),
            attrs_len: self.attributes.len(),
        }
    }
}

/// Builds the feature vector of `op`. `dims` gives each tensor's dimension
/// sizes; inputs missing from it contribute nothing.
pub fn extract_features(
    op: &OperatorSpec,
    dims: &BTreeMap<TensorId, Vec<u64>>,
    gpu_usage: f64,
    layout: FeatureLayout,
) -> Result<FeatureVector, LatencyError> {
    if !(0.0..=1.0).contains(&gpu_usage) {
        return Err(LatencyError::UsageOutOfRange(gpu_usage));
    }
    let mut input_dims: Vec<f64> = op
        .inputs
        .iter()
        .flat_map(|t| dims.get(t).into_iter().flatten())
        .map(|&d| d as f64)
        .collect();
    let overflow = |what, needed, available| LatencyError::LayoutOverflow {
        op: op.id,
        what,
        needed,
        available,
    };
    if input_dims.len() > layout.dims_len {
        return Err(overflow("dimension", input_dims.len(), layout.dims_len));
    }
    if op.attributes.len() > layout.attrs_len {
        return Err(overflow("attribute", op.attributes.len(), layout.attrs_len));
    }
    input_dims.resize(layout.dims_len, 0.0);
    let mut attributes = op.attributes.clone();
    attributes.resize(layout.attrs_len, 0.0);
    Ok(FeatureVector {
        input_dims,
        attributes,
        gpu_usage,
    })
}

/// Graph tensors carry no shape, so each input contributes its size as a
/// single dimension.
pub fn size_dims(graph: &ComputeGraph) -> BTreeMap<TensorId, Vec<u64>> {
    graph.tensors().iter().map(|t| (t.id, vec![t.size])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub op_kind: String,
    pub features: FeatureVector,
    pub observed: f64,
}

/// Linear model over the feature vector plus a squared usage term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
    pub layout: FeatureLayout,
}

impl KindModel {
    fn row(f: &FeatureVector) -> Vec<f64> {
        let mut v = f.to_vec();
        v.push(f.gpu_usage * f.gpu_usage);
        v
    }

    pub fn predict(&self, f: &FeatureVector) -> f64 {
        let raw: f64 = Self::row(f)
            .iter()
            .zip(&self.coefficients)
            .map(|(x, c)| x * c)
            .sum::<f64>()
            + self.intercept;
        raw.max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Predictor {
    pub models: BTreeMap<String, KindModel>,
}

impl Predictor {
    pub fn predict(&self, op_kind: &str, f: &FeatureVector) -> Result<f64, LatencyError> {
        self.models
            .get(op_kind)
            .map(|m| m.predict(f))
            .ok_or_else(|| LatencyError::UnknownKind(op_kind.to_string()))
    }

    pub fn r2(&self, op_kind: &str) -> Option<f64> {
        self.models.get(op_kind).map(|m| m.r2)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictor serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, LatencyError> {
        serde_json::from_str(s).map_err(|e| LatencyError::Parse(e.to_string()))
    }

    /// Latency table for every op of `graph` at the given usage level. Ops
    /// without inputs (placeholders, variables) cost nothing.
    pub fn latencies(&self, graph: &ComputeGraph, gpu_usage: f64) -> Result<LatencyTable, LatencyError> {
        let dims = size_dims(graph);
        let mut table = LatencyTable::new();
        for op in graph.ops() {
            if op.inputs.is_empty() {
                table.insert(op.id, 0);
                continue;
            }
            let model = self
                .models
                .get(&op.kind)
                .ok_or_else(|| LatencyError::UnknownKind(op.kind.clone()))?;
            let f = extract_features(op, &dims, gpu_usage, model.layout)?;
            table.insert(op.id, model.predict(&f).round() as u64);
        }
        Ok(table)
    }
}

pub fn fit_predictor(samples: &[Sample]) -> Result<Predictor, LatencyError> {
    let mut by_kind: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_kind.entry(&s.op_kind).or_default().push(s);
    }
    let mut models = BTreeMap::new();
    for (kind, group) in by_kind {
        models.insert(kind.to_string(), fit_kind(kind, &group)?);
    }
    Ok(Predictor { models })
}

fn fit_kind(kind: &str, group: &[&Sample]) -> Result<KindModel, LatencyError> {
    if group.len() < 2 {
        return Err(LatencyError::InsufficientSamples(kind.into()));
    }
    let layout = group[0].features.layout();
    let rows: Vec<Vec<f64>> = group.iter().map(|s| KindModel::row(&s.features)).collect();
    for (s, r) in group.iter().zip(&rows) {
        if s.features.layout() != layout {
            return Err(LatencyError::InconsistentLength {
                kind: kind.into(),
                expected: rows[0].len(),
                found: r.len(),
            });
        }
    }
    if rows.iter().all(|r| r == &rows[0]) {
        return Err(LatencyError::DegenerateFeatures(kind.into()));
    }
    let n = rows.len();
    let p = rows[0].len();
    // scale columns so wildly different magnitudes do not hurt the solve
    let scale: Vec<f64> = (0..p)
        .map(|j| rows.iter().map(|r| r[j].abs()).fold(0.0, f64::max).max(1e-12))
        .collect();
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j < p { rows[i][j] / scale[j] } else { 1.0 });
    let y = DVector::from_iterator(n, group.iter().map(|s| s.observed));
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-10)
        .map_err(|_| LatencyError::SolveFailed(kind.into()))?;
    let coefficients: Vec<f64> = (0..p).map(|j| beta[j] / scale[j]).collect();
    let intercept = beta[p];

    let fitted = &x * &beta;
    let mean = y.mean();
    let ss_res: f64 = (&y - &fitted).iter().map(|e| e * e).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-9 {
        1.0
    } else {
        0.0
    };
    Ok(KindModel {
        coefficients,
        intercept,
        r2,
        layout,
    })
}

pub fn ewma_update(estimate: f64, observation: f64, alpha: f64) -> Result<f64, LatencyError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LatencyError::AlphaOutOfRange(alpha));
    }
    Ok(alpha * observation + (1.0 - alpha) * estimate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplanState {
    pub last_sum: f64,
    pub current_sum: f64,
    pub threshold: f64,
}

impl ReplanState {
    pub fn drift(&self) -> f64 {
        if self.last_sum == 0.0 {
            if self.current_sum > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            (self.current_sum - self.last_sum).abs() / self.last_sum
        }
    }
}

pub fn should_replan(state: &ReplanState) -> bool {
    state.drift() > state.threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencySource {
    Predicted,
    Observed,
    Ewma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyEstimate {
    pub op_id: OpId,
    pub value: f64,
    pub source: LatencySource,
}

/// EWMA-corrected latency estimates for every op of every job.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyTracker {
    alpha: f64,
    estimates: BTreeMap<(JobId, OpId), LatencyEstimate>,
}

impl LatencyTracker {
    pub fn new(alpha: f64, initial: &BTreeMap<JobId, LatencyTable>) -> Result<Self, LatencyError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(LatencyError::AlphaOutOfRange(alpha));
        }
        let estimates = initial
            .iter()
            .flat_map(|(&job, table)| {
                table.iter().map(move |(&op, &v)| {
                    let est = LatencyEstimate {
                        op_id: op,
                        value: v as f64,
                        source: LatencySource::Predicted,
                    };
                    ((job, op), est)
                })
            })
            .collect();
        Ok(LatencyTracker { alpha, estimates })
    }

    pub fn observe(&mut self, job: JobId, op: OpId, ticks: u64) {
        let alpha = self.alpha;
        self.estimates
            .entry((job, op))
            .and_modify(|e| {
                e.value = ewma_update(e.value, ticks as f64, alpha).expect("alpha validated");
                e.source = LatencySource::Ewma;
            })
            .or_insert(LatencyEstimate {
                op_id: op,
                value: ticks as f64,
                source: LatencySource::Observed,
            });
    }

    pub fn estimate(&self, job: JobId, op: OpId) -> Option<LatencyEstimate> {
        self.estimates.get(&(job, op)).copied()
    }

    pub fn sum(&self) -> f64 {
        self.estimates.values().map(|e| e.value).sum()
    }

    pub fn table(&self, job: JobId) -> LatencyTable {
        self.estimates
            .range((job, OpId(0))..=(job, OpId(u32::MAX)))
            .map(|(&(_, op), e)| (op, e.value.round() as u64))
            .collect()
    }
}
