//! Synthetic training graphs shaped after common CNN families, and a simple
//! device cost model that assigns them ground-truth latencies.
//!
//! Every generated graph has a forward pass ending in a loss, a backward
//! pass with one fused gradient op per forward op, and momentum-SGD updates
//! for each weight.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::LatencyTable;
use crate::graph::{ComputeGraph, OperatorSpec, Phase, TensorKind, TensorSpec, UPDATE_KIND};
use crate::ids::{JobId, OpId, TensorId};
use crate::latency::{extract_features, size_dims, FeatureLayout, Sample};

const F32: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum Family {
    Vgg16,
    Resnet50,
    InceptionV3,
    InceptionV4,
    Densenet,
    Chain { depth: u32 },
    Random { seed: u64 },
}

impl Family {
    /// The five CNN families.
    pub const NETWORKS: [Family; 5] = [
        Family::Vgg16,
        Family::Resnet50,
        Family::InceptionV3,
        Family::InceptionV4,
        Family::Densenet,
    ];
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("unknown workload family {0:?}")]
    UnknownFamily(String),
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

impl FromStr for Family {
    type Err = WorkloadError;

    /// Accepts `vgg16`, `resnet50`, `inception_v3`, `inception_v4`,
    /// `densenet`, `chain` / `chain:<depth>` and `random`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |default: u64| -> Result<u64, WorkloadError> {
            if arg.is_empty() {
                Ok(default)
            } else {
                arg.parse().map_err(|_| WorkloadError::UnknownFamily(s.into()))
            }
        };
        Ok(match name {
            "vgg16" => Family::Vgg16,
            "resnet50" => Family::Resnet50,
            "inception_v3" => Family::InceptionV3,
            "inception_v4" => Family::InceptionV4,
            "densenet" => Family::Densenet,
            "chain" => Family::Chain { depth: num(3)? as u32 },
            "random" => Family::Random { seed: num(0)? },
            _ => return Err(WorkloadError::UnknownFamily(s.into())),
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Vgg16 => write!(f, "vgg16"),
            Family::Resnet50 => write!(f, "resnet50"),
            Family::InceptionV3 => write!(f, "inception_v3"),
            Family::InceptionV4 => write!(f, "inception_v4"),
            Family::Densenet => write!(f, "densenet"),
            Family::Chain { depth } => write!(f, "chain:{depth}"),
            Family::Random { seed } => write!(f, "random:{seed}"),
        }
    }
}

/// Activation shape per sample: channels x height x width.
#[derive(Debug, Clone, Copy)]
struct Act {
    id: TensorId,
    c: u64,
    h: u64,
    w: u64,
}

struct Builder {
    batch: u64,
    tensors: Vec<TensorSpec>,
    ops: Vec<OperatorSpec>,
    forward: Vec<OpId>,
    params: Vec<TensorId>,
    input: Option<TensorId>,
}

impl Builder {
    fn new(batch: u64) -> Self {
        Builder {
            batch,
            tensors: Vec::new(),
            ops: Vec::new(),
            forward: Vec::new(),
            params: Vec::new(),
            input: None,
        }
    }

    fn tensor(&mut self, size: u64, kind: TensorKind) -> TensorId {
        let id = TensorId(self.tensors.len() as u32);
        self.tensors.push(TensorSpec { id, size: size.max(1), kind });
        id
    }

    fn op(&mut self, kind: &str, inputs: Vec<TensorId>, outputs: Vec<TensorId>, attributes: Vec<f64>, phase: Phase) -> OpId {
        let id = OpId(self.ops.len() as u32);
        self.ops.push(OperatorSpec {
            id,
            kind: kind.into(),
            inputs,
            outputs,
            attributes,
            phase,
        });
        id
    }

    fn input(&mut self, c: u64, h: u64, w: u64) -> Act {
        let id = self.tensor(self.batch * c * h * w * F32, TensorKind::Input);
        self.op("placeholder", vec![], vec![id], vec![], Phase::ForwardBackward);
        self.input = Some(id);
        Act { id, c, h, w }
    }

    fn param(&mut self, size: u64) -> TensorId {
        let id = self.tensor(size, TensorKind::Parameter);
        self.op("variable", vec![], vec![id], vec![], Phase::ForwardBackward);
        self.params.push(id);
        id
    }

    /// Forward op producing one activation of `per_sample` bytes.
    fn fwd(&mut self, kind: &str, inputs: Vec<TensorId>, attrs: Vec<f64>, per_sample: u64) -> TensorId {
        let out = self.tensor(self.batch * per_sample, TensorKind::Interim);
        let id = self.op(kind, inputs, vec![out], attrs, Phase::ForwardBackward);
        self.forward.push(id);
        out
    }

    fn conv(&mut self, x: Act, cout: u64, k: u64, stride: u64) -> Act {
        let w = self.param(k * k * x.c * cout * F32);
        let (h, wd) = (x.h.div_ceil(stride), x.w.div_ceil(stride));
        let id = self.fwd("conv2d", vec![x.id, w], vec![k as f64, stride as f64], cout * h * wd * F32);
        Act { id, c: cout, h, w: wd }
    }

    fn unary(&mut self, kind: &str, x: Act) -> Act {
        let id = self.fwd(kind, vec![x.id], vec![], x.c * x.h * x.w * F32);
        Act { id, ..x }
    }

    fn conv_relu(&mut self, x: Act, cout: u64, k: u64, stride: u64) -> Act {
        let y = self.conv(x, cout, k, stride);
        self.unary("relu", y)
    }

    fn pool(&mut self, x: Act) -> Act {
        let (h, w) = (x.h.div_ceil(2).max(1), x.w.div_ceil(2).max(1));
        let id = self.fwd("pool", vec![x.id], vec![2.0], x.c * h * w * F32);
        Act { id, c: x.c, h, w }
    }

    fn add(&mut self, a: Act, b: Act) -> Act {
        let id = self.fwd("add", vec![a.id, b.id], vec![], a.c * a.h * a.w * F32);
        Act { id, ..a }
    }

    fn concat(&mut self, parts: &[Act]) -> Act {
        let c: u64 = parts.iter().map(|p| p.c).sum();
        let (h, w) = (parts[0].h, parts[0].w);
        let id = self.fwd("concat", parts.iter().map(|p| p.id).collect(), vec![], c * h * w * F32);
        Act { id, c, h, w }
    }

    fn fc(&mut self, x: Act, out: u64) -> Act {
        let fan_in = x.c * x.h * x.w;
        let w = self.param(fan_in * out * F32);
        let id = self.fwd("matmul", vec![x.id, w], vec![], out * F32);
        Act { id, c: out, h: 1, w: 1 }
    }

    /// Adds the loss, backward pass and optimizer updates.
    fn finish(mut self, job: JobId, heads: &[TensorId]) -> ComputeGraph {
        let loss = self.tensor(self.batch * F32, TensorKind::Output);
        let loss_op = self.op("loss", heads.to_vec(), vec![loss], vec![], Phase::ForwardBackward);
        self.forward.push(loss_op);

        let kinds: BTreeMap<TensorId, TensorKind> = self.tensors.iter().map(|t| (t.id, t.kind)).collect();
        let sizes: BTreeMap<TensorId, u64> = self.tensors.iter().map(|t| (t.id, t.size)).collect();
        let mut contributions: BTreeMap<TensorId, Vec<TensorId>> = BTreeMap::new();
        let mut weight_grad: BTreeMap<TensorId, TensorId> = BTreeMap::new();
        for &fid in self.forward.clone().iter().rev() {
            let fop = self.ops[fid.0 as usize].clone();
            let y = fop.outputs[0];
            let dy = if fid == loss_op {
                loss
            } else {
                match contributions.remove(&y) {
                    None => continue,
                    Some(parts) if parts.len() == 1 => parts[0],
                    Some(parts) => {
                        let sum = self.tensor(sizes[&y], TensorKind::Interim);
                        self.op("grad_add", parts, vec![sum], vec![], Phase::ForwardBackward);
                        sum
                    }
                }
            };
            let mut outs = Vec::new();
            for &x in &fop.inputs {
                match kinds[&x] {
                    TensorKind::Interim => {
                        let dx = self.tensor(sizes[&x], TensorKind::Interim);
                        contributions.entry(x).or_default().push(dx);
                        outs.push(dx);
                    }
                    TensorKind::Parameter => {
                        let dw = self.tensor(sizes[&x], TensorKind::Interim);
                        weight_grad.insert(x, dw);
                        outs.push(dw);
                    }
                    _ => {}
                }
            }
            if outs.is_empty() {
                continue;
            }
            let mut inputs = fop.inputs.clone();
            inputs.push(dy);
            self.op(&format!("{}_grad", fop.kind), inputs, outs, fop.attributes.clone(), Phase::ForwardBackward);
        }

        for w in self.params.clone() {
            let Some(&dw) = weight_grad.get(&w) else { continue };
            let size = sizes[&w];
            let m = self.tensor(size, TensorKind::Parameter);
            self.op("variable", vec![], vec![m], vec![], Phase::ForwardBackward);
            let w2 = self.tensor(size, TensorKind::UpdatedParameter);
            let m2 = self.tensor(size, TensorKind::UpdatedParameter);
            self.op(UPDATE_KIND, vec![w, dw, m], vec![w2], vec![], Phase::Optimize);
            self.op(UPDATE_KIND, vec![m, dw], vec![m2], vec![], Phase::Optimize);
        }
        ComputeGraph::new(job, self.tensors, self.ops).expect("generated graphs are valid")
    }
}

fn vgg16(b: &mut Builder) -> Vec<TensorId> {
    let mut x = b.input(3, 32, 32);
    for (channels, convs) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
        for _ in 0..convs {
            x = b.conv_relu(x, channels, 3, 1);
        }
        x = b.pool(x);
    }
    x = b.fc(x, 512);
    x = b.unary("relu", x);
    x = b.fc(x, 512);
    x = b.unary("relu", x);
    vec![b.fc(x, 10).id]
}

fn resnet50(b: &mut Builder) -> Vec<TensorId> {
    let mut x = b.input(3, 32, 32);
    x = b.conv_relu(x, 64, 3, 1);
    for (stage, (blocks, mid, out)) in [(3, 64, 256), (4, 128, 512), (6, 256, 1024), (3, 512, 2048)]
        .into_iter()
        .enumerate()
    {
        for i in 0..blocks {
            let stride = if i == 0 && stage > 0 { 2 } else { 1 };
            let shortcut = if i == 0 { b.conv(x, out, 1, stride) } else { x };
            let mut y = b.conv_relu(x, mid, 1, 1);
            y = b.conv_relu(y, mid, 3, stride);
            y = b.conv(y, out, 1, 1);
            y = b.add(y, shortcut);
            x = b.unary("relu", y);
        }
    }
    x = b.pool(x);
    vec![b.fc(x, 10).id]
}

fn inception_module(b: &mut Builder, x: Act, width: u64) -> Act {
    let b1 = b.conv_relu(x, width, 1, 1);
    let b2 = b.conv_relu(x, width * 3 / 4, 1, 1);
    let b2 = b.conv_relu(b2, width, 3, 1);
    let b3 = b.conv_relu(x, width / 2, 1, 1);
    let b3 = b.conv_relu(b3, width * 3 / 4, 3, 1);
    let b3 = b.conv_relu(b3, width * 3 / 4, 3, 1);
    let b4 = b.pool_same(x);
    let b4 = b.conv_relu(b4, width / 2, 1, 1);
    b.concat(&[b1, b2, b3, b4])
}

fn reduction_module(b: &mut Builder, x: Act, width: u64) -> Act {
    let b1 = b.conv_relu(x, width, 3, 2);
    let b2 = b.conv_relu(x, width / 2, 1, 1);
    let b2 = b.conv_relu(b2, width, 3, 2);
    let b3 = b.pool(x);
    b.concat(&[b1, b2, b3])
}

impl Builder {
    /// Pooling that keeps the spatial size (stride 1, padded).
    fn pool_same(&mut self, x: Act) -> Act {
        let id = self.fwd("pool", vec![x.id], vec![1.0], x.c * x.h * x.w * F32);
        Act { id, ..x }
    }
}

fn inception(b: &mut Builder, counts: [usize; 3]) -> Vec<TensorId> {
    let mut x = b.input(3, 32, 32);
    x = b.conv_relu(x, 32, 3, 1);
    x = b.conv_relu(x, 64, 3, 1);
    for (stage, &n) in counts.iter().enumerate() {
        let width = 64 << stage;
        for _ in 0..n {
            x = inception_module(b, x, width);
        }
        if stage + 1 < counts.len() {
            x = reduction_module(b, x, width);
        }
    }
    x = b.pool(x);
    vec![b.fc(x, 10).id]
}

fn densenet(b: &mut Builder) -> Vec<TensorId> {
    const GROWTH: u64 = 32;
    let mut x = b.input(3, 32, 32);
    x = b.conv_relu(x, 2 * GROWTH, 3, 1);
    let blocks = [6, 12, 24, 16];
    for (i, &layers) in blocks.iter().enumerate() {
        let mut features = vec![x];
        for _ in 0..layers {
            let joined = if features.len() == 1 { features[0] } else { b.concat(&features) };
            let y = b.unary("bn", joined);
            let y = b.unary("relu", y);
            let y = b.conv_relu(y, 4 * GROWTH, 1, 1);
            let y = b.conv(y, GROWTH, 3, 1);
            features.push(y);
        }
        x = b.concat(&features);
        if i + 1 < blocks.len() {
            x = b.conv(x, x.c / 2, 1, 1);
            x = b.pool(x);
        }
    }
    x = b.pool(x);
    vec![b.fc(x, 10).id]
}

fn chain(b: &mut Builder, depth: u32) -> Vec<TensorId> {
    let mut x = b.input(256, 1, 1);
    for _ in 0..depth {
        x = b.fc(x, 256);
    }
    vec![x.id]
}

fn random(b: &mut Builder, seed: u64) -> Vec<TensorId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = b.input(rng.gen_range(1..=64), 1, 1);
    let mut acts = vec![x];
    let mut used = vec![false];
    let n = rng.gen_range(6..=12);
    for _ in 0..n {
        let arity = rng.gen_range(1..=2.min(acts.len()));
        let mut inputs = Vec::new();
        for _ in 0..arity {
            let i = rng.gen_range(0..acts.len());
            if !inputs.contains(&acts[i].id) {
                inputs.push(acts[i].id);
                used[i] = true;
            }
        }
        if rng.gen_bool(0.5) {
            let w = b.param(rng.gen_range(1..=64));
            inputs.push(w);
        }
        let c = rng.gen_range(1..=64);
        let kind = ["matmul", "relu", "add", "conv2d"][rng.gen_range(0..4)];
        let id = b.fwd(kind, inputs, vec![], c);
        acts.push(Act { id, c, h: 1, w: 1 });
        used.push(false);
    }
    acts.iter()
        .zip(&used)
        .skip(1)
        .filter(|(_, &u)| !u)
        .map(|(a, _)| a.id)
        .collect()
}

/// Generates a training graph. Interim tensor sizes scale linearly with
/// `batch`; parameter sizes do not.
pub fn generate_workload(family: Family, batch: u64, job: JobId) -> Result<ComputeGraph, WorkloadError> {
    if batch == 0 {
        return Err(WorkloadError::ZeroBatch);
    }
    let mut b = Builder::new(batch);
    let heads = match family {
        Family::Vgg16 => vgg16(&mut b),
        Family::Resnet50 => resnet50(&mut b),
        Family::InceptionV3 => inception(&mut b, [3, 4, 2]),
        Family::InceptionV4 => inception(&mut b, [4, 7, 3]),
        Family::Densenet => densenet(&mut b),
        Family::Chain { depth } => chain(&mut b, depth),
        Family::Random { seed } => random(&mut b, seed),
    };
    debug_assert!(b.input.is_some());
    Ok(b.finish(job, &heads))
}

/// Ground-truth operator cost: a fixed launch overhead plus time linear in
/// the bytes an op reads, weighted by op kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub launch: f64,
    pub bytes_per_tick: f64,
    pub weights: BTreeMap<String, f64>,
}

impl Default for DeviceModel {
    fn default() -> Self {
        let weights = [
            ("conv2d", 6.0),
            ("matmul", 4.0),
            ("bn", 1.5),
            ("relu", 0.5),
            ("pool", 0.5),
            ("add", 0.5),
            ("concat", 0.5),
            ("loss", 1.0),
            ("grad_add", 0.5),
            (UPDATE_KIND, 1.0),
        ];
        DeviceModel {
            launch: 5.0,
            bytes_per_tick: 12_000.0,
            weights: weights.iter().map(|&(k, w)| (k.to_string(), w)).collect(),
        }
    }
}

impl DeviceModel {
    pub fn weight(&self, kind: &str) -> f64 {
        if let Some(w) = self.weights.get(kind) {
            return *w;
        }
        match kind.strip_suffix("_grad") {
            Some(base) => 2.0 * self.weights.get(base).copied().unwrap_or(1.0),
            None => 1.0,
        }
    }

    /// Latency at full device availability; ops without inputs are free.
    pub fn base_latency(&self, graph: &ComputeGraph, op: &OperatorSpec) -> f64 {
        if op.inputs.is_empty() {
            return 0.0;
        }
        let read: u64 = op.inputs.iter().map(|&t| graph.size(t)).sum();
        self.launch + self.weight(&op.kind) * read as f64 / self.bytes_per_tick
    }

    pub fn latencies(&self, graph: &ComputeGraph) -> LatencyTable {
        graph
            .ops()
            .iter()
            .map(|op| (op.id, self.base_latency(graph, op).round() as u64))
            .collect()
    }

    /// Training samples over a usage grid. Usage stretches latency by
    /// `1 + slope * usage`; `noise` adds multiplicative uniform jitter.
    pub fn samples(
        &self,
        graphs: &[ComputeGraph],
        usages: &[f64],
        slope: f64,
        noise: f64,
        seed: u64,
    ) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layouts: BTreeMap<&str, FeatureLayout> = BTreeMap::new();
        for g in graphs {
            for op in g.ops().iter().filter(|o| !o.inputs.is_empty()) {
                let l = layouts.entry(&op.kind).or_insert(FeatureLayout { dims_len: 0, attrs_len: 0 });
                l.dims_len = l.dims_len.max(op.inputs.len());
                l.attrs_len = l.attrs_len.max(op.attributes.len());
            }
        }
        let mut out = Vec::new();
        for g in graphs {
            let dims = size_dims(g);
            for op in g.ops().iter().filter(|o| !o.inputs.is_empty()) {
                for &u in usages {
                    let f = extract_features(op, &dims, u, layouts[op.kind.as_str()])
                        .expect("layout covers every op");
                    let jitter = if noise > 0.0 { 1.0 + rng.gen_range(-noise..=noise) } else { 1.0 };
                    out.push(Sample {
                        op_kind: op.kind.clone(),
                        features: f,
                        observed: self.base_latency(g, op) * (1.0 + slope * u) * jitter,
                    });
                }
            }
        }
        out
    }
}
