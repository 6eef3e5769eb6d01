#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use memsched::access::{AccessType, LatencyTable, TensorAccessSequence};
use memsched::graph::{ComputeGraph, OperatorSpec, Phase, TensorKind, TensorSpec, UPDATE_KIND};
use memsched::orchestrator::{base_sequence, build_plan, PlannerConfig, PlanningJob};
use memsched::plan::{Direction, SchedulingPlan};
use memsched::simulator::{SimulationTrace, TraceKind};
use memsched::workload::{generate_workload, DeviceModel, Family};
use memsched::{JobId, OpId, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Small {
    tensors: Vec<TensorSpec>,
    ops: Vec<OperatorSpec>,
}

impl Small {
    fn tensor(&mut self, size: u64, kind: TensorKind) -> TensorId {
        let id = TensorId(self.tensors.len() as u32);
        self.tensors.push(TensorSpec { id, size, kind });
        id
    }

    fn op(&mut self, kind: &str, inputs: Vec<TensorId>, outputs: Vec<TensorId>, phase: Phase) {
        let id = OpId(self.ops.len() as u32);
        self.ops.push(OperatorSpec {
            id,
            kind: kind.into(),
            inputs,
            outputs,
            attributes: vec![],
            phase,
        });
    }
}

/// Training-style graph with at most 12 ops and tensor sizes in 1..=64:
/// forward ops over a random DAG, a loss, one backward op per forward op
/// and an update per parameter.
pub fn small_graph(r: &mut ChaCha8Rng, job: JobId) -> ComputeGraph {
    let mut g = Small {
        tensors: vec![],
        ops: vec![],
    };
    let fb = Phase::ForwardBackward;
    let x = g.tensor(r.gen_range(1..=64), TensorKind::Input);
    g.op("placeholder", vec![], vec![x], fb);
    let n_params = r.gen_range(0..=2usize);
    let params: Vec<TensorId> = (0..n_params)
        .map(|_| {
            let p = g.tensor(r.gen_range(1..=64), TensorKind::Parameter);
            g.op("variable", vec![], vec![p], fb);
            p
        })
        .collect();
    let depth = r.gen_range(1..=5 - n_params);
    let mut acts = vec![x];
    // (inputs, param used) per forward op
    let mut fwd: Vec<(Vec<TensorId>, Option<TensorId>)> = Vec::new();
    for i in 0..depth {
        let mut inputs = vec![*acts.last().unwrap()];
        if acts.len() > 1 && r.gen_bool(0.4) {
            let other = acts[r.gen_range(0..acts.len() - 1)];
            inputs.push(other);
        }
        let param = params.get(i).copied();
        let mut all = inputs.clone();
        all.extend(param);
        let out = g.tensor(r.gen_range(1..=64), TensorKind::Interim);
        g.op("fwd", all, vec![out], fb);
        fwd.push((inputs, param));
        acts.push(out);
    }
    let loss = g.tensor(r.gen_range(1..=64), TensorKind::Output);
    g.op("loss", vec![*acts.last().unwrap()], vec![loss], fb);
    let mut grad = loss;
    let mut dws = Vec::new();
    for (inputs, param) in fwd.iter().rev() {
        let mut outs = vec![g.tensor(r.gen_range(1..=64), TensorKind::Interim)];
        if let Some(p) = param {
            let dw = g.tensor(g.tensors[p.0 as usize].size, TensorKind::Interim);
            outs.push(dw);
            dws.push((*p, dw));
        }
        let mut ins = vec![grad];
        ins.extend(inputs.iter().copied().filter(|&t| t != grad));
        g.op("bwd", ins, outs.clone(), fb);
        grad = outs[0];
    }
    // the last gradient feeds nothing else; give it a consumer so it is not
    // a dead end
    let sink = g.tensor(r.gen_range(1..=64), TensorKind::Interim);
    g.op("sink", vec![grad], vec![sink], fb);
    for (p, dw) in dws {
        let size = g.tensors[p.0 as usize].size;
        let u = g.tensor(size, TensorKind::UpdatedParameter);
        g.op(UPDATE_KIND, vec![p, dw], vec![u], Phase::Optimize);
    }
    ComputeGraph::new(job, g.tensors, g.ops).expect("small graph is valid")
}

/// Latencies 0..=10 for ops with inputs, 0 for placeholders and variables.
pub fn small_latencies(r: &mut ChaCha8Rng, graph: &ComputeGraph) -> LatencyTable {
    graph
        .ops()
        .iter()
        .map(|o| (o.id, if o.inputs.is_empty() { 0 } else { r.gen_range(0..=10) }))
        .collect()
}

/// Peak by replaying every residency change up to each instant from
/// scratch. Returns (bytes, time, resident set at the peak).
pub fn oracle_peak(
    graph: &ComputeGraph,
    seq: &TensorAccessSequence,
    plan: &SchedulingPlan,
    initial: &BTreeMap<TensorId, u64>,
) -> (u64, u64, BTreeSet<TensorId>) {
    // (time, order, tensor, +1 enter / -1 leave); leaves sort first, renames
    // last; a zero-length access releases only after its tick is measured
    let mut changes: Vec<(u64, u8, TensorId, i8)> = Vec::new();
    for a in &seq.accesses {
        if a.access_type == AccessType::Tga {
            let spec = graph.tensor(a.tensor_id);
            if let Some(p) = graph.alias_of(a.tensor_id) {
                // a rename, after any same-tick arrival of the parameter
                changes.push((a.start_time, 3, p, -1));
                changes.push((a.start_time, 4, a.tensor_id, 1));
            } else if spec.kind != TensorKind::Parameter && !initial.contains_key(&a.tensor_id) {
                changes.push((a.start_time, 2, a.tensor_id, 1));
            }
        }
        if a.release_flag {
            let order = if a.start_time == a.end_time { 5 } else { 0 };
            changes.push((a.end_time, order, a.tensor_id, -1));
        }
    }
    let end_of = |id| seq.accesses.iter().find(|a| a.access_id == id).map(|a| a.end_time);
    for ev in &plan.swap_events {
        let start = ev.trigger_access.map_or(0, |t| end_of(t).unwrap()) + ev.delta_time;
        let end = start + ev.duration();
        match ev.direction {
            Direction::Out => {
                let anchor_end = end_of(ev.anchor_access).unwrap();
                changes.push((end.max(anchor_end), 0, ev.tensor_id, -1));
            }
            Direction::In => changes.push((end, 2, ev.tensor_id, 1)),
        }
    }
    changes.sort();
    let times: BTreeSet<u64> = changes.iter().map(|c| c.0).collect();
    let mut best = (initial.values().sum::<u64>(), 0, initial.keys().copied().collect::<BTreeSet<_>>());
    for &t in &times {
        let mut set: BTreeSet<TensorId> = initial.keys().copied().collect();
        for &(_, _, tensor, dir) in changes.iter().filter(|c| c.0 < t || (c.0 == t && c.1 < 5)) {
            if dir > 0 {
                set.insert(tensor);
            } else {
                set.remove(&tensor);
            }
        }
        let bytes: u64 = set.iter().map(|&x| graph.size(x)).sum();
        if bytes > best.0 {
            best = (bytes, t, set);
        }
    }
    best
}

#[derive(Debug, Default)]
pub struct TraceCheck {
    pub reads: u64,
    pub passive_requests: u64,
    pub max_footprint: u64,
}

/// Replays a trace and checks residency at every read, allocation and
/// free, the running footprint, and channel exclusivity.
pub fn check_trace(trace: &SimulationTrace) -> Result<TraceCheck, String> {
    let mut resident: BTreeMap<(JobId, TensorId), u64> = BTreeMap::new();
    let mut fp = 0u64;
    let mut out = TraceCheck::default();
    let mut last_tick = 0;
    for (i, e) in trace.events.iter().enumerate() {
        let key = (e.job_id, e.tensor_id);
        let at = format!("event {i} at tick {} ({:?} job {} tensor {})", e.tick, e.kind, e.job_id, e.tensor_id);
        if e.tick < last_tick {
            return Err(format!("{at}: time went backwards"));
        }
        last_tick = e.tick;
        match e.kind {
            TraceKind::Alloc | TraceKind::SwapInDone | TraceKind::PassiveSwapInDone => {
                if resident.insert(key, e.size).is_some() {
                    return Err(format!("{at}: already resident"));
                }
                fp += e.size;
            }
            TraceKind::Alias | TraceKind::Rebind => {
                let from = (e.job_id, e.other.ok_or(format!("{at}: no source"))?);
                let size = resident.remove(&from).ok_or(format!("{at}: source not resident"))?;
                if resident.insert(key, size).is_some() {
                    return Err(format!("{at}: target already resident"));
                }
            }
            TraceKind::Release | TraceKind::SwapOutDone | TraceKind::EvictDone | TraceKind::Drop => {
                let size = resident.remove(&key).ok_or(format!("{at}: freeing absent tensor"))?;
                fp -= size;
            }
            TraceKind::Read => {
                out.reads += 1;
                if !resident.contains_key(&key) {
                    return Err(format!("{at}: read of absent tensor"));
                }
            }
            TraceKind::PassiveRequest => out.passive_requests += 1,
            TraceKind::DoubleRelease => return Err(format!("{at}: double release")),
        }
        if fp != e.footprint {
            return Err(format!("{at}: footprint {} but trace says {}", fp, e.footprint));
        }
        out.max_footprint = out.max_footprint.max(fp);
    }
    if out.max_footprint != trace.peak {
        return Err(format!("replayed peak {} but trace peak {}", out.max_footprint, trace.peak));
    }
    let mut spans: Vec<(u64, u64)> = trace.transfers.iter().map(|t| (t.start_tick, t.end_tick)).collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(format!("transfers {:?} and {:?} overlap", w[0], w[1]));
        }
    }
    Ok(out)
}

pub struct MultiJob {
    pub graphs: Vec<ComputeGraph>,
    pub latencies: Vec<LatencyTable>,
    pub launches: Vec<u64>,
    pub config: PlannerConfig,
}

impl MultiJob {
    pub fn planning(&self) -> Vec<PlanningJob> {
        self.graphs
            .iter()
            .zip(&self.latencies)
            .map(|(g, l)| PlanningJob {
                graph: g.clone(),
                latencies: l.clone(),
            })
            .collect()
    }

    pub fn plans(&self) -> BTreeMap<JobId, SchedulingPlan> {
        build_plan(&self.planning(), &self.config).unwrap().plans
    }
}

/// One to three generated random-family jobs with staggered launches and a
/// budget somewhere between half and all of their summed size.
pub fn multi_job(seed: u64) -> MultiJob {
    let mut r = rng(seed);
    let n = r.gen_range(1..=3);
    let device = DeviceModel::default();
    let mut graphs = Vec::new();
    let mut latencies = Vec::new();
    let mut launches = Vec::new();
    for j in 0..n {
        let fam = Family::Random { seed: r.gen() };
        let g = generate_workload(fam, r.gen_range(1..=4), JobId(j)).unwrap();
        latencies.push(device.latencies(&g));
        graphs.push(g);
        launches.push(if j == 0 { 0 } else { r.gen_range(0..200) });
    }
    let total: u64 = graphs.iter().flat_map(|g| g.tensors().iter().map(|t| t.size)).sum();
    let config = PlannerConfig {
        pcie_bandwidth: r.gen_range(20..2_000),
        transfer_setup: r.gen_range(0..5),
        memory_budget: total * r.gen_range(2..10) / 20,
        max_swap_ratios: (0..n).filter(|_| r.gen_bool(0.3)).map(|j| (JobId(j), 0.5)).collect(),
        ..PlannerConfig::default()
    };
    MultiJob {
        graphs,
        latencies,
        launches,
        config,
    }
}

/// Graph from `(size, kind)` tensors and `(kind, inputs, outputs, phase)`
/// ops, numbered in listing order.
pub fn graph_of(
    job: u32,
    tensors: &[(u64, TensorKind)],
    ops: &[(&str, &[u32], &[u32], Phase)],
) -> ComputeGraph {
    let tensors = tensors
        .iter()
        .enumerate()
        .map(|(i, &(size, kind))| TensorSpec {
            id: TensorId(i as u32),
            size,
            kind,
        })
        .collect();
    let ops = ops
        .iter()
        .enumerate()
        .map(|(i, (kind, ins, outs, phase))| OperatorSpec {
            id: OpId(i as u32),
            kind: kind.to_string(),
            inputs: ins.iter().map(|&t| TensorId(t)).collect(),
            outputs: outs.iter().map(|&t| TensorId(t)).collect(),
            attributes: vec![],
            phase: *phase,
        })
        .collect();
    ComputeGraph::new(JobId(job), tensors, ops).unwrap()
}

pub fn table(lat: &[u64]) -> LatencyTable {
    lat.iter().enumerate().map(|(i, &l)| (OpId(i as u32), l)).collect()
}

/// A small random job with up to three planned swap events.
pub fn planned_job(seed: u64) -> (ComputeGraph, TensorAccessSequence, SchedulingPlan) {
    let mut r = rng(seed);
    let g = small_graph(&mut r, JobId(0));
    let lat = small_latencies(&mut r, &g);
    let base = base_sequence(&g, &lat).unwrap();
    let config = PlannerConfig {
        pcie_bandwidth: r.gen_range(4..64),
        transfer_setup: r.gen_range(0..3),
        memory_budget: if r.gen_bool(0.3) { 0 } else { u64::MAX },
        ..PlannerConfig::default()
    };
    let job = PlanningJob { graph: g.clone(), latencies: lat };
    let mut plan = build_plan(&[job], &config).unwrap().plans.remove(&JobId(0)).unwrap();
    while plan.swap_events.len() > 3 {
        let last = plan.swap_events.last().unwrap().pair_id;
        plan.remove_pair(last);
    }
    (g, base, plan)
}
