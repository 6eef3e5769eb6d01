//! Deterministic discrete-event execution of jobs under their plans.
//!
//! Each job runs its operators back to back on its own stream. All jobs share
//! one transfer channel that serves copies first-in first-out. Memory is an
//! ideal pool; the simulator records every residency change so traces can be
//! replayed and checked independently.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::{generate_access_sequence, AccessError, AccessType, LatencyTable, TensorAccessSequence};
use crate::graph::{ComputeGraph, TensorKind};
use crate::ids::{AccessId, JobId, OpId, TensorId};
use crate::orchestrator::{base_sequence, Observation, PlanUpdate};
use crate::plan::{initial_resident, resolve, Direction, SchedulingPlan, TransferModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vanilla,
    Scheduled,
    Passive,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Vanilla, Mode::Scheduled, Mode::Passive];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Scheduled => "scheduled",
            Mode::Passive => "passive",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub ticks_per_iteration_limit: u64,
    pub iterations: u32,
    pub seed: u64,
    /// Latency multiplier keyed by the number of concurrently running jobs;
    /// counts between keys use the nearest smaller key.
    pub gpu_slowdown_curve: BTreeMap<u32, f64>,
    pub mode: Mode,
    pub transfer: TransferModel,
    /// Pool size enforced in passive mode.
    pub memory_budget: u64,
    /// Relative uniform jitter applied to every op latency.
    pub latency_jitter: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            ticks_per_iteration_limit: u64::MAX,
            iterations: 3,
            seed: 0,
            gpu_slowdown_curve: BTreeMap::new(),
            mode: Mode::Scheduled,
            transfer: TransferModel::new(12_000, 10),
            memory_budget: u64::MAX,
            latency_jitter: 0.0,
        }
    }
}

impl SimConfig {
    pub fn slowdown(&self, running: u32) -> f64 {
        self.gpu_slowdown_curve
            .range(..=running)
            .next_back()
            .map_or(1.0, |(_, &m)| m.max(1.0))
    }
}

#[derive(Debug, Clone)]
pub struct SimJob {
    pub graph: ComputeGraph,
    pub plan: SchedulingPlan,
    /// Latencies the device actually delivers, before slowdown and jitter.
    pub latencies: LatencyTable,
    /// Latencies the plan was timed with, when they differ from `latencies`.
    pub planned_latencies: Option<LatencyTable>,
    pub launch_tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    Planned,
    Passive,
    Evict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub job_id: JobId,
    pub tensor_id: TensorId,
    pub direction: Direction,
    pub kind: TransferKind,
    pub enqueue_tick: u64,
    pub start_tick: u64,
    pub end_tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    /// A tensor gains device storage at its generating access.
    Alloc,
    /// An updated parameter takes over the storage of `other`.
    Alias,
    /// A parameter takes back the storage of its updated value (`other`).
    Rebind,
    Release,
    SwapOutDone,
    SwapInDone,
    PassiveSwapInDone,
    EvictDone,
    /// End-of-iteration cleanup of a leftover tensor.
    Drop,
    Read,
    PassiveRequest,
    DoubleRelease,
}

impl TraceKind {
    pub fn name(self) -> &'static str {
        match self {
            TraceKind::Alloc => "alloc",
            TraceKind::Alias => "alias",
            TraceKind::Rebind => "rebind",
            TraceKind::Release => "release",
            TraceKind::SwapOutDone => "swap_out_done",
            TraceKind::SwapInDone => "swap_in_done",
            TraceKind::PassiveSwapInDone => "passive_swap_in_done",
            TraceKind::EvictDone => "evict_done",
            TraceKind::Drop => "drop",
            TraceKind::Read => "read",
            TraceKind::PassiveRequest => "passive_request",
            TraceKind::DoubleRelease => "double_release",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: u64,
    pub job_id: JobId,
    pub kind: TraceKind,
    pub tensor_id: TensorId,
    pub size: u64,
    pub other: Option<TensorId>,
    /// Global footprint after the event.
    pub footprint: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub mode: Mode,
    pub footprint_curve: Vec<(u64, u64)>,
    pub job_curves: BTreeMap<JobId, Vec<(u64, u64)>>,
    pub iteration_times: BTreeMap<JobId, Vec<u64>>,
    pub passive_swap_count: u64,
    pub blocked_ticks: u64,
    pub peak: u64,
    pub job_peaks: BTreeMap<JobId, u64>,
    /// Residency at launch, per job.
    pub initial: BTreeMap<JobId, BTreeMap<TensorId, u64>>,
    pub events: Vec<TraceEvent>,
    pub transfers: Vec<TransferRecord>,
    pub double_releases: u64,
    /// (job, iteration about to start, plan version) whenever a plan is installed.
    pub plan_changes: Vec<(JobId, u32, u64)>,
    pub end_tick: u64,
}

impl SimulationTrace {
    pub fn mean_iteration_time(&self, job: JobId) -> f64 {
        let times = &self.iteration_times[&job];
        times.iter().sum::<u64>() as f64 / times.len() as f64
    }

    /// Sum over jobs of the mean iteration time.
    pub fn time_cost(&self) -> f64 {
        self.iteration_times.keys().map(|&j| self.mean_iteration_time(j)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tick,job_id,event_kind,tensor_id,footprint_bytes\n");
        for e in &self.events {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.tick,
                e.job_id,
                e.kind.name(),
                e.tensor_id,
                e.footprint
            ));
        }
        s
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("deadlock at tick {tick}: {chain}")]
    Deadlock { tick: u64, chain: String },
    #[error("job {job} exceeded the iteration tick limit in iteration {iteration}")]
    IterationLimit { job: JobId, iteration: u32 },
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error("job {0} listed twice")]
    DuplicateJob(JobId),
}

/// Receives per-iteration latency reports and may hand back new plans.
pub trait Controller {
    fn on_iteration(&mut self, job: JobId, iteration: u32, observed: &[Observation]) -> Vec<PlanUpdate>;
}

/// A controller that never replans.
pub struct NoReplan;

impl Controller for NoReplan {
    fn on_iteration(&mut self, _: JobId, _: u32, _: &[Observation]) -> Vec<PlanUpdate> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Launch(usize),
    OpEnd(usize),
    Fire(usize, usize),
    TransferEnd(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Status {
    Pending,
    Ready,
    Running,
    WaitInputs(usize),
    WaitEvict(usize),
    WaitOuts(usize),
    WaitRelease,
    IterEnd,
    Done,
}

struct Program {
    seq: TensorAccessSequence,
    plan: SchedulingPlan,
    fires_at_start: Vec<usize>,
    fires_after: BTreeMap<AccessId, Vec<usize>>,
    exec_of: BTreeMap<AccessId, usize>,
    /// Swap-outs the plan finishes before each execution starts.
    outs_before: Vec<Vec<usize>>,
}

impl Program {
    fn new(graph: &ComputeGraph, structure: &TensorAccessSequence, plan: SchedulingPlan) -> Self {
        let seq = plan.effective_sequence(structure, graph);
        let mut fires_at_start = Vec::new();
        let mut fires_after: BTreeMap<AccessId, Vec<usize>> = BTreeMap::new();
        for (i, ev) in plan.swap_events.iter().enumerate() {
            match ev.trigger_access {
                None => fires_at_start.push(i),
                Some(a) => fires_after.entry(a).or_default().push(i),
            }
        }
        let mut exec_of = BTreeMap::new();
        for (i, e) in seq.executions.iter().enumerate() {
            for a in &seq.accesses[e.accesses.clone()] {
                exec_of.insert(a.access_id, i);
            }
        }
        let mut outs_before = vec![Vec::new(); seq.executions.len()];
        for (i, ev) in plan.swap_events.iter().enumerate() {
            if ev.direction != Direction::Out || ev.wraps_iteration {
                continue;
            }
            let anchor_end = seq.get(ev.anchor_access).map_or(0, |a| a.end_time);
            let done = (resolve(&seq, ev.trigger_access, ev.delta_time) + ev.duration()).max(anchor_end);
            if let Some(k) = seq.executions.iter().position(|e| e.start_time >= done) {
                outs_before[k].push(i);
            }
        }
        Program {
            seq,
            plan,
            fires_at_start,
            fires_after,
            exec_of,
            outs_before,
        }
    }
}

struct JobState {
    id: JobId,
    graph: ComputeGraph,
    latencies: LatencyTable,
    program: Program,
    pending_plan: Option<PlanUpdate>,
    status: Status,
    iteration: u32,
    iter_start: u64,
    pc: usize,
    resident: BTreeMap<TensorId, u64>,
    pinned: BTreeSet<TensorId>,
    pending_free: BTreeSet<TensorId>,
    out_pending: BTreeMap<TensorId, usize>,
    in_pending: BTreeMap<TensorId, usize>,
    release_waits: BTreeSet<TensorId>,
    evicted_for: Option<usize>,
    /// Per swap event of the current iteration: whether a swap-out is
    /// still to fire or to finish.
    out_open: Vec<bool>,
    fires_pending: u32,
    /// Tick the running op started and its actual latency.
    op_started: u64,
    op_latency: u64,
    /// Swap-ins whose planned start lies beyond the job's progress; they
    /// are fired again when the next op starts.
    held_ins: Vec<usize>,
    last_use: BTreeMap<TensorId, u64>,
    wait_since: Option<u64>,
    observed: Vec<Observation>,
    footprint: u64,
}

struct Transfer {
    job: usize,
    tensor: TensorId,
    size: u64,
    direction: Direction,
    kind: TransferKind,
    event: Option<usize>,
    enqueue: u64,
    started: Option<u64>,
    cancelled: bool,
}

struct Sim<'c> {
    config: SimConfig,
    controller: &'c mut dyn Controller,
    jobs: Vec<JobState>,
    now: u64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, u8, u64, Ev)>>,
    dirty: BTreeSet<usize>,
    transfers: Vec<Transfer>,
    queue: BTreeSet<(u64, JobId, usize)>,
    channel_busy: bool,
    rng: ChaCha8Rng,
    footprint: u64,
    trace: SimulationTrace,
}

/// Runs all jobs for `config.iterations` iterations each.
pub fn simulate(jobs: &[SimJob], config: &SimConfig) -> Result<SimulationTrace, SimError> {
    simulate_with(jobs, config, &mut NoReplan)
}

pub fn simulate_with(
    jobs: &[SimJob],
    config: &SimConfig,
    controller: &mut dyn Controller,
) -> Result<SimulationTrace, SimError> {
    let mut seen = BTreeSet::new();
    let mut states = Vec::with_capacity(jobs.len());
    for j in jobs {
        let id = j.graph.job_id();
        if !seen.insert(id) {
            return Err(SimError::DuplicateJob(id));
        }
        // the program runs on the plan's clock
        let (plan, timing) = match config.mode {
            Mode::Scheduled => (j.plan.clone(), j.planned_latencies.as_ref().unwrap_or(&j.latencies)),
            Mode::Vanilla | Mode::Passive => {
                (SchedulingPlan::from_sequence(&base_sequence(&j.graph, &j.latencies)?), &j.latencies)
            }
        };
        let structure = generate_access_sequence(&j.graph, timing)?;
        let program = Program::new(&j.graph, &structure, plan);
        states.push(JobState {
            id,
            graph: j.graph.clone(),
            latencies: j.latencies.clone(),
            program,
            pending_plan: None,
            status: Status::Pending,
            iteration: 0,
            iter_start: 0,
            pc: 0,
            resident: BTreeMap::new(),
            pinned: BTreeSet::new(),
            pending_free: BTreeSet::new(),
            out_pending: BTreeMap::new(),
            in_pending: BTreeMap::new(),
            release_waits: BTreeSet::new(),
            evicted_for: None,
            out_open: Vec::new(),
            fires_pending: 0,
            op_started: 0,
            op_latency: 0,
            held_ins: Vec::new(),
            last_use: BTreeMap::new(),
            wait_since: None,
            observed: Vec::new(),
            footprint: 0,
        });
    }
    let mut sim = Sim {
        config: config.clone(),
        controller,
        jobs: states,
        now: 0,
        seq: 0,
        heap: BinaryHeap::new(),
        dirty: BTreeSet::new(),
        transfers: Vec::new(),
        queue: BTreeSet::new(),
        channel_busy: false,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        footprint: 0,
        trace: SimulationTrace {
            mode: config.mode,
            footprint_curve: vec![(0, 0)],
            job_curves: BTreeMap::new(),
            iteration_times: BTreeMap::new(),
            passive_swap_count: 0,
            blocked_ticks: 0,
            peak: 0,
            job_peaks: BTreeMap::new(),
            initial: BTreeMap::new(),
            events: Vec::new(),
            transfers: Vec::new(),
            double_releases: 0,
            plan_changes: Vec::new(),
            end_tick: 0,
        },
    };
    for (i, j) in jobs.iter().enumerate() {
        sim.trace.job_curves.insert(sim.jobs[i].id, vec![(0, 0)]);
        sim.trace.iteration_times.insert(sim.jobs[i].id, Vec::new());
        sim.trace.job_peaks.insert(sim.jobs[i].id, 0);
        sim.push(j.launch_tick, Ev::Launch(i));
    }
    sim.run()?;
    Ok(sim.trace)
}

impl Sim<'_> {
    /// Same-tick order: frees (op ends, finished swap-outs) before fires,
    /// before allocations (finished swap-ins, launches).
    fn push(&mut self, tick: u64, ev: Ev) {
        let class = match ev {
            Ev::OpEnd(_) => 0,
            Ev::TransferEnd(t) if self.transfers[t].direction == Direction::Out => 0,
            Ev::Fire(..) => 1,
            Ev::TransferEnd(_) | Ev::Launch(_) => 2,
        };
        self.seq += 1;
        self.heap.push(Reverse((tick, class, self.seq, ev)));
    }

    fn run(&mut self) -> Result<(), SimError> {
        loop {
            if let Some(&Reverse((tick, ..))) = self.heap.peek() {
                if tick == self.now {
                    let Reverse((.., ev)) = self.heap.pop().unwrap();
                    self.handle(ev);
                    continue;
                }
            }
            // jobs move only once every event of this tick is in
            if !self.dirty.is_empty() {
                for j in std::mem::take(&mut self.dirty) {
                    self.advance(j)?;
                }
                continue;
            }
            if !self.channel_busy && !self.queue.is_empty() {
                self.dispatch();
                continue;
            }
            match self.heap.peek() {
                Some(&Reverse((tick, ..))) => self.now = tick,
                None => break,
            }
        }
        self.trace.end_tick = self.now;
        let stuck: Vec<String> = self
            .jobs
            .iter()
            .filter(|j| j.status != Status::Done)
            .map(|j| self.describe(j))
            .collect();
        if !stuck.is_empty() {
            return Err(SimError::Deadlock {
                tick: self.now,
                chain: stuck.join("; "),
            });
        }
        Ok(())
    }

    fn describe(&self, j: &JobState) -> String {
        let what = match j.status {
            Status::WaitOuts(e) => format!(
                "op {} waits on swap-outs {:?}",
                j.program.seq.executions[e].op_id,
                j.program.outs_before[e].iter().filter(|&&x| j.out_open[x]).collect::<Vec<_>>()
            ),
            Status::WaitInputs(e) | Status::WaitEvict(e) => {
                let op = j.program.seq.executions[e].op_id;
                let missing: Vec<String> = j
                    .program
                    .seq
                    .accesses[j.program.seq.executions[e].accesses.clone()]
                    .iter()
                    .filter(|a| a.access_type == AccessType::Tua && !j.resident.contains_key(&a.tensor_id))
                    .map(|a| format!("tensor {}", a.tensor_id))
                    .collect();
                format!("op {op} waits on {}", missing.join(", "))
            }
            Status::WaitRelease => format!("release waits on swap-out of {:?}", j.release_waits),
            Status::IterEnd => format!(
                "iteration end waits on {} fires and transfers of {:?}",
                j.fires_pending,
                j.out_pending.keys().chain(j.in_pending.keys()).collect::<Vec<_>>()
            ),
            ref s => format!("{s:?}"),
        };
        format!("job {} iteration {}: {what}", j.id, j.iteration)
    }

    fn handle(&mut self, ev: Ev) {
        let j = match ev {
            Ev::Launch(j) => {
                self.launch(j);
                j
            }
            Ev::OpEnd(j) => {
                self.op_end(j);
                j
            }
            Ev::Fire(j, e) => {
                self.fire(j, e);
                j
            }
            Ev::TransferEnd(t) => self.transfer_end(t),
        };
        self.dirty.insert(j);
    }

    fn log(&mut self, j: usize, kind: TraceKind, tensor: TensorId, size: u64, other: Option<TensorId>) {
        let job = &self.jobs[j];
        self.trace.events.push(TraceEvent {
            tick: self.now,
            job_id: job.id,
            kind,
            tensor_id: tensor,
            size,
            other,
            footprint: self.footprint,
        });
    }

    fn record_footprint(&mut self, j: usize) {
        let id = self.jobs[j].id;
        let fp = self.jobs[j].footprint;
        self.trace.footprint_curve.push((self.now, self.footprint));
        self.trace.job_curves.get_mut(&id).unwrap().push((self.now, fp));
        self.trace.peak = self.trace.peak.max(self.footprint);
        let p = self.trace.job_peaks.get_mut(&id).unwrap();
        *p = (*p).max(fp);
    }

    fn add(&mut self, j: usize, tensor: TensorId, size: u64, kind: TraceKind) {
        let prev = self.jobs[j].resident.insert(tensor, size);
        debug_assert!(prev.is_none(), "tensor {tensor} already resident");
        self.jobs[j].footprint += size;
        self.footprint += size;
        self.log(j, kind, tensor, size, None);
        self.record_footprint(j);
    }

    fn remove(&mut self, j: usize, tensor: TensorId, kind: TraceKind) {
        let size = self.jobs[j].resident.remove(&tensor).expect("tensor resident");
        self.jobs[j].pending_free.remove(&tensor);
        self.jobs[j].footprint -= size;
        self.footprint -= size;
        self.log(j, kind, tensor, size, None);
        self.record_footprint(j);
    }

    fn launch(&mut self, j: usize) {
        let init = initial_resident(&self.jobs[j].graph, &self.jobs[j].program.plan);
        self.trace.initial.insert(self.jobs[j].id, init.clone());
        for (t, size) in init {
            self.add(j, t, size, TraceKind::Alloc);
        }
        self.begin_iteration(j);
    }

    fn begin_iteration(&mut self, j: usize) {
        let job = &mut self.jobs[j];
        job.iter_start = self.now;
        job.pc = 0;
        job.status = Status::Ready;
        job.evicted_for = None;
        job.out_open = job
            .program
            .plan
            .swap_events
            .iter()
            .map(|e| e.direction == Direction::Out && !e.wraps_iteration)
            .collect();
        job.observed.clear();
        let fires: Vec<usize> = job.program.fires_at_start.clone();
        for e in fires {
            let delta = self.jobs[j].program.plan.swap_events[e].delta_time;
            self.jobs[j].fires_pending += 1;
            self.push(self.now + delta, Ev::Fire(j, e));
        }
    }

    fn start_wait(&mut self, j: usize, status: Status) {
        let job = &mut self.jobs[j];
        if job.wait_since.is_none() {
            job.wait_since = Some(self.now);
        }
        job.status = status;
    }

    fn end_wait(&mut self, j: usize) {
        if let Some(since) = self.jobs[j].wait_since.take() {
            self.trace.blocked_ticks += self.now - since;
        }
    }

    fn enqueue(&mut self, j: usize, tensor: TensorId, direction: Direction, kind: TransferKind) -> usize {
        let size = self.jobs[j].graph.size(tensor);
        let id = self.transfers.len();
        self.transfers.push(Transfer {
            job: j,
            tensor,
            size,
            direction,
            kind,
            event: None,
            enqueue: self.now,
            started: None,
            cancelled: false,
        });
        self.queue.insert((self.now, self.jobs[j].id, id));
        match direction {
            Direction::Out => self.jobs[j].out_pending.insert(tensor, id),
            Direction::In => self.jobs[j].in_pending.insert(tensor, id),
        };
        id
    }

    fn close(&mut self, t: usize) {
        if let Some(e) = self.transfers[t].event {
            let j = self.transfers[t].job;
            if let Some(open) = self.jobs[j].out_open.get_mut(e) {
                *open = false;
            }
        }
    }

    fn cancel(&mut self, t: usize) {
        self.close(t);
        let tr = &mut self.transfers[t];
        tr.cancelled = true;
        let (j, tensor, dir, enq) = (tr.job, tr.tensor, tr.direction, tr.enqueue);
        self.queue.remove(&(enq, self.jobs[j].id, t));
        match dir {
            Direction::Out => self.jobs[j].out_pending.remove(&tensor),
            Direction::In => self.jobs[j].in_pending.remove(&tensor),
        };
    }

    fn dispatch(&mut self) {
        let &(enq, job_id, t) = self.queue.iter().next().unwrap();
        self.queue.remove(&(enq, job_id, t));
        let (j, tensor, dir) = {
            let tr = &self.transfers[t];
            (tr.job, tr.tensor, tr.direction)
        };
        let resident = self.jobs[j].resident.contains_key(&tensor);
        let useless = match dir {
            Direction::Out => !resident,
            Direction::In => resident,
        };
        if useless {
            if dir == Direction::In {
                // the device copy is still there; keep it
                self.jobs[j].pending_free.remove(&tensor);
            }
            self.close(t);
            self.transfers[t].cancelled = true;
            match dir {
                Direction::Out => self.jobs[j].out_pending.remove(&tensor),
                Direction::In => self.jobs[j].in_pending.remove(&tensor),
            };
            self.dirty.insert(j);
            return;
        }
        let size = self.transfers[t].size;
        self.transfers[t].started = Some(self.now);
        self.channel_busy = true;
        let end = self.now + self.config.transfer.duration(size);
        self.push(end, Ev::TransferEnd(t));
    }

    fn transfer_end(&mut self, t: usize) -> usize {
        self.channel_busy = false;
        self.close(t);
        let (j, tensor, dir, kind) = {
            let tr = &self.transfers[t];
            (tr.job, tr.tensor, tr.direction, tr.kind)
        };
        let tr = &self.transfers[t];
        self.trace.transfers.push(TransferRecord {
            job_id: self.jobs[j].id,
            tensor_id: tensor,
            direction: dir,
            kind,
            enqueue_tick: tr.enqueue,
            start_tick: tr.started.unwrap(),
            end_tick: self.now,
        });
        if kind != TransferKind::Planned {
            self.trace.passive_swap_count += 1;
        }
        match dir {
            Direction::Out => {
                self.jobs[j].out_pending.remove(&tensor);
                let done = if kind == TransferKind::Evict { TraceKind::EvictDone } else { TraceKind::SwapOutDone };
                if self.jobs[j].pinned.contains(&tensor) {
                    self.jobs[j].pending_free.insert(tensor);
                } else if self.jobs[j].resident.contains_key(&tensor) {
                    self.remove(j, tensor, done);
                }
                self.jobs[j].release_waits.remove(&tensor);
            }
            Direction::In => {
                self.jobs[j].in_pending.remove(&tensor);
                if self.jobs[j].release_waits.remove(&tensor) {
                    return j;
                }
                let size = self.jobs[j].graph.size(tensor);
                let done = if kind == TransferKind::Planned { TraceKind::SwapInDone } else { TraceKind::PassiveSwapInDone };
                if !self.jobs[j].resident.contains_key(&tensor) {
                    self.add(j, tensor, size, done);
                }
            }
        }
        j
    }

    fn fire(&mut self, j: usize, e: usize) {
        self.jobs[j].fires_pending -= 1;
        let ev = self.jobs[j].program.plan.swap_events[e].clone();
        let t = ev.tensor_id;
        let job = &self.jobs[j];
        let resident = job.resident.contains_key(&t) && !job.pending_free.contains(&t);
        match ev.direction {
            Direction::Out => {
                if resident && !job.out_pending.contains_key(&t) && !job.in_pending.contains_key(&t) {
                    let id = self.enqueue(j, t, Direction::Out, TransferKind::Planned);
                    self.transfers[id].event = Some(e);
                } else if let Some(open) = self.jobs[j].out_open.get_mut(e) {
                    *open = false;
                }
            }
            Direction::In => {
                let queued_out = job.out_pending.contains_key(&t);
                if job.in_pending.contains_key(&t) || (resident && !queued_out) {
                    return;
                }
                if self.hold(j, e) {
                    return;
                }
                let job = &self.jobs[j];
                if queued_out {
                    // the channel is FIFO, so this lands after the copy out
                    self.enqueue(j, t, Direction::In, TransferKind::Planned);
                    return;
                }
                let target_started = job
                    .program
                    .exec_of
                    .get(&ev.anchor_access)
                    .is_none_or(|&x| x < job.pc || (x == job.pc && job.status == Status::Running));
                if !target_started {
                    self.enqueue(j, t, Direction::In, TransferKind::Planned);
                }
            }
        }
    }

    /// Keeps a swap-in from running ahead of the job's progress, so a
    /// stalled or slowed job does not receive it before the frees the plan
    /// put first. Returns whether the fire was postponed.
    fn hold(&mut self, j: usize, e: usize) -> bool {
        let ev = &self.jobs[j].program.plan.swap_events[e];
        let (start, end) = (ev.start_time, ev.end_time);
        let transfer = self.config.transfer.duration(self.jobs[j].graph.size(ev.tensor_id));
        let job = &self.jobs[j];
        let at = match job.program.seq.executions.get(job.pc) {
            Some(x) if job.status == Status::Running => {
                if start > x.end_time {
                    None
                } else {
                    let span = (x.end_time - x.start_time).max(1) as u128;
                    let tick = |p: u64| {
                        job.op_started
                            + ((p.max(x.start_time) - x.start_time) as u128 * job.op_latency as u128).div_ceil(span) as u64
                    };
                    let mut at = tick(start);
                    if end <= x.end_time {
                        at = at.max(tick(end).saturating_sub(transfer));
                    }
                    Some(at)
                }
            }
            // between ops the next latency is unknown, so only transfers
            // already due in full may go
            Some(x) => (end <= x.start_time).then_some(self.now),
            None => Some(self.now),
        };
        match at {
            Some(at) if at <= self.now => false,
            Some(at) => {
                self.jobs[j].fires_pending += 1;
                self.push(at, Ev::Fire(j, e));
                true
            }
            None => {
                self.jobs[j].fires_pending += 1;
                self.jobs[j].held_ins.push(e);
                true
            }
        }
    }

    fn op_latency(&mut self, j: usize, op: OpId) -> u64 {
        let base = self.jobs[j].latencies.get(&op).copied().unwrap_or(0);
        let running = self
            .jobs
            .iter()
            .filter(|s| !matches!(s.status, Status::Pending | Status::Done))
            .count() as u32;
        let mut lat = base as f64 * self.config.slowdown(running);
        if self.config.latency_jitter > 0.0 && base > 0 {
            let jit = self.config.latency_jitter;
            lat *= 1.0 + self.rng.gen_range(-jit..=jit);
        }
        lat.max(0.0).ceil() as u64
    }

    /// Progresses job `j` as far as possible at the current tick.
    fn advance(&mut self, j: usize) -> Result<(), SimError> {
        loop {
            match self.jobs[j].status.clone() {
                Status::Pending | Status::Running | Status::Done => return Ok(()),
                Status::WaitRelease => {
                    if !self.jobs[j].release_waits.is_empty() {
                        return Ok(());
                    }
                    self.end_wait(j);
                    self.jobs[j].status = Status::Ready;
                }
                Status::IterEnd => {
                    // nothing left to start, so held swap-ins go now
                    for e in std::mem::take(&mut self.jobs[j].held_ins) {
                        self.fire(j, e);
                    }
                    let job = &self.jobs[j];
                    if job.fires_pending > 0 || !job.out_pending.is_empty() || !job.in_pending.is_empty() {
                        return Ok(());
                    }
                    self.end_wait(j);
                    self.finish_iteration(j)?;
                }
                Status::Ready | Status::WaitInputs(_) | Status::WaitEvict(_) | Status::WaitOuts(_) => {
                    if self.jobs[j].pc == self.jobs[j].program.seq.executions.len() {
                        self.start_wait(j, Status::IterEnd);
                        continue;
                    }
                    if !self.try_start(j)? {
                        return Ok(());
                    }
                }
            }
        }
    }

    /// Starts the next execution if its inputs are resident. Returns false
    /// when the job has to wait.
    fn try_start(&mut self, j: usize) -> Result<bool, SimError> {
        let pc = self.jobs[j].pc;
        // swap-outs the plan finished before this op must have finished
        let job = &self.jobs[j];
        if job.program.outs_before[pc].iter().any(|&e| job.out_open[e]) {
            self.start_wait(j, Status::WaitOuts(pc));
            return Ok(false);
        }
        let exec = self.jobs[j].program.seq.executions[pc].clone();
        let accesses: Vec<_> = self.jobs[j].program.seq.accesses[exec.accesses.clone()].to_vec();
        let inputs: Vec<TensorId> = accesses
            .iter()
            .filter(|a| a.access_type == AccessType::Tua)
            .map(|a| a.tensor_id)
            .collect();
        let missing: Vec<TensorId> = inputs
            .iter()
            .copied()
            .filter(|t| !self.jobs[j].resident.contains_key(t))
            .collect();

        if self.config.mode == Mode::Passive && self.jobs[j].evicted_for != Some(pc) {
            self.jobs[j].evicted_for = Some(pc);
            if self.evict_for(j, &accesses, &missing) {
                self.start_wait(j, Status::WaitEvict(pc));
                return Ok(false);
            }
        }
        if matches!(self.jobs[j].status, Status::WaitEvict(_)) && self.jobs[j].out_pending.values().any(|&t| self.transfers[t].kind == TransferKind::Evict) {
            return Ok(false);
        }
        if !missing.is_empty() {
            for &t in &missing {
                let job = &self.jobs[j];
                if !job.in_pending.contains_key(&t) {
                    self.log(j, TraceKind::PassiveRequest, t, self.jobs[j].graph.size(t), None);
                    self.enqueue(j, t, Direction::In, TransferKind::Passive);
                }
            }
            self.start_wait(j, Status::WaitInputs(pc));
            return Ok(false);
        }
        self.end_wait(j);
        if self.now - self.jobs[j].iter_start > self.config.ticks_per_iteration_limit {
            return Err(SimError::IterationLimit {
                job: self.jobs[j].id,
                iteration: self.jobs[j].iteration,
            });
        }

        for a in &accesses {
            self.jobs[j].pinned.insert(a.tensor_id);
            self.jobs[j].last_use.insert(a.tensor_id, self.now);
            match a.access_type {
                AccessType::Tua => {
                    let size = self.jobs[j].graph.size(a.tensor_id);
                    self.log(j, TraceKind::Read, a.tensor_id, size, None);
                }
                AccessType::Tga => self.generate(j, a.tensor_id),
            }
        }
        let lat = self.op_latency(j, exec.op_id);
        if exec.recompute_of.is_none() {
            let id = self.jobs[j].id;
            self.jobs[j].observed.push(Observation { job: id, op: exec.op_id, ticks: lat });
        }
        self.jobs[j].status = Status::Running;
        self.jobs[j].op_started = self.now;
        self.jobs[j].op_latency = lat;
        for e in std::mem::take(&mut self.jobs[j].held_ins) {
            self.fire(j, e);
        }
        self.push(self.now + lat, Ev::OpEnd(j));
        Ok(true)
    }

    fn generate(&mut self, j: usize, t: TensorId) {
        let g = &self.jobs[j].graph;
        let size = g.size(t);
        let kind = g.tensor(t).kind;
        if let Some(param) = g.alias_of(t) {
            if let Some(psize) = self.jobs[j].resident.remove(&param) {
                self.jobs[j].resident.insert(t, psize);
                self.log(j, TraceKind::Alias, t, size, Some(param));
                return;
            }
        }
        if kind == TensorKind::Parameter || self.jobs[j].resident.contains_key(&t) {
            return;
        }
        self.add(j, t, size, TraceKind::Alloc);
    }

    /// Passive mode: evicts least recently used tensors of job `j` so the
    /// next op fits the pool. Returns whether any eviction was issued.
    fn evict_for(&mut self, j: usize, accesses: &[crate::access::TensorAccess], missing: &[TensorId]) -> bool {
        let job = &self.jobs[j];
        let g = &job.graph;
        let mut need: u64 = missing.iter().map(|&t| g.size(t)).sum();
        for a in accesses.iter().filter(|a| a.access_type == AccessType::Tga) {
            let kind = g.tensor(a.tensor_id).kind;
            if g.alias_of(a.tensor_id).is_none() && kind != TensorKind::Parameter && !job.resident.contains_key(&a.tensor_id) {
                need += g.size(a.tensor_id);
            }
        }
        let budget = self.config.memory_budget;
        if self.footprint.saturating_add(need) <= budget {
            return false;
        }
        let touched: BTreeSet<TensorId> = accesses.iter().map(|a| a.tensor_id).collect();
        let mut victims: Vec<(u64, TensorId)> = job
            .resident
            .keys()
            .filter(|t| !touched.contains(t) && !job.pinned.contains(t) && !job.out_pending.contains_key(t))
            .map(|&t| (job.last_use.get(&t).copied().unwrap_or(0), t))
            .collect();
        victims.sort_unstable();
        let mut freed = 0u64;
        let mut chosen = Vec::new();
        for (_, t) in victims {
            if self.footprint.saturating_add(need) <= budget.saturating_add(freed) {
                break;
            }
            freed += g.size(t);
            chosen.push(t);
        }
        for &t in &chosen {
            self.enqueue(j, t, Direction::Out, TransferKind::Evict);
        }
        !chosen.is_empty()
    }

    fn release(&mut self, j: usize, t: TensorId) {
        if let Some(&out) = self.jobs[j].out_pending.get(&t) {
            if self.transfers[out].started.is_some() {
                self.jobs[j].release_waits.insert(t);
                return;
            }
            self.cancel(out);
        }
        if let Some(&inn) = self.jobs[j].in_pending.get(&t) {
            if self.transfers[inn].started.is_some() {
                // dropped on arrival
                self.jobs[j].release_waits.insert(t);
                return;
            }
            self.cancel(inn);
        }
        if self.jobs[j].resident.contains_key(&t) {
            self.remove(j, t, TraceKind::Release);
        } else {
            self.trace.double_releases += 1;
            let size = self.jobs[j].graph.size(t);
            self.log(j, TraceKind::DoubleRelease, t, size, None);
        }
    }

    fn op_end(&mut self, j: usize) {
        let pc = self.jobs[j].pc;
        let exec = self.jobs[j].program.seq.executions[pc].clone();
        let accesses: Vec<_> = self.jobs[j].program.seq.accesses[exec.accesses.clone()].to_vec();
        self.jobs[j].pinned.clear();
        for a in &accesses {
            self.jobs[j].last_use.insert(a.tensor_id, self.now);
        }
        for a in accesses.iter().filter(|a| a.release_flag) {
            self.release(j, a.tensor_id);
        }
        let deferred: Vec<TensorId> = std::mem::take(&mut self.jobs[j].pending_free).into_iter().collect();
        for t in deferred {
            if self.jobs[j].resident.contains_key(&t) {
                self.remove(j, t, TraceKind::SwapOutDone);
            }
        }
        for a in &accesses {
            let fires = self.jobs[j].program.fires_after.get(&a.access_id).cloned().unwrap_or_default();
            for e in fires {
                let delta = self.jobs[j].program.plan.swap_events[e].delta_time;
                self.jobs[j].fires_pending += 1;
                self.push(self.now + delta, Ev::Fire(j, e));
            }
        }
        self.jobs[j].pc += 1;
        if self.jobs[j].release_waits.is_empty() {
            self.jobs[j].status = Status::Ready;
        } else {
            self.start_wait(j, Status::WaitRelease);
        }
    }

    fn finish_iteration(&mut self, j: usize) -> Result<(), SimError> {
        // parameters take back the storage of their updated values
        let pairs: Vec<(TensorId, TensorId)> = self.jobs[j].graph.update_pairs().collect();
        for (p, u) in pairs {
            if let Some(size) = self.jobs[j].resident.remove(&u) {
                self.jobs[j].resident.insert(p, size);
                self.log(j, TraceKind::Rebind, p, size, Some(u));
            }
        }
        let leftovers: Vec<TensorId> = self.jobs[j]
            .resident
            .keys()
            .copied()
            .filter(|&t| !self.jobs[j].graph.tensor(t).kind.is_persistent())
            .collect();
        for t in leftovers {
            self.remove(j, t, TraceKind::Drop);
        }
        let inputs: Vec<(TensorId, u64)> = self.jobs[j]
            .graph
            .tensors()
            .iter()
            .filter(|t| t.kind == TensorKind::Input)
            .map(|t| (t.id, t.size))
            .collect();
        for (t, size) in inputs {
            self.add(j, t, size, TraceKind::Alloc);
        }

        let id = self.jobs[j].id;
        let elapsed = self.now - self.jobs[j].iter_start;
        self.trace.iteration_times.get_mut(&id).unwrap().push(elapsed);
        let iteration = self.jobs[j].iteration;
        let observed = std::mem::take(&mut self.jobs[j].observed);
        for update in self.controller.on_iteration(id, iteration, &observed) {
            if let Some(k) = self.jobs.iter().position(|s| s.id == update.plan.job_id) {
                self.jobs[k].pending_plan = Some(update);
            }
        }
        if let Some(update) = self.jobs[j].pending_plan.take() {
            if self.config.mode == Mode::Scheduled {
                self.install(j, update)?;
            }
        }
        self.jobs[j].iteration += 1;
        if self.jobs[j].iteration >= self.config.iterations {
            self.jobs[j].status = Status::Done;
        } else {
            self.begin_iteration(j);
        }
        Ok(())
    }

    /// Switches job `j` to `plan` at an iteration boundary. Parameters are
    /// moved to or from the host to match the new plan's starting residency.
    fn install(&mut self, j: usize, update: PlanUpdate) -> Result<(), SimError> {
        let PlanUpdate { plan, latencies } = update;
        let structure = generate_access_sequence(&self.jobs[j].graph, &latencies)?;
        let version = plan.version;
        let wanted = initial_resident(&self.jobs[j].graph, &plan);
        let params: Vec<(TensorId, u64)> = self.jobs[j]
            .graph
            .tensors()
            .iter()
            .filter(|t| t.kind == TensorKind::Parameter)
            .map(|t| (t.id, t.size))
            .collect();
        for (p, size) in params {
            let here = self.jobs[j].resident.contains_key(&p);
            if wanted.contains_key(&p) && !here {
                self.add(j, p, size, TraceKind::PassiveSwapInDone);
            } else if !wanted.contains_key(&p) && here {
                self.remove(j, p, TraceKind::SwapOutDone);
            }
        }
        let job = &mut self.jobs[j];
        job.program = Program::new(&job.graph, &structure, plan);
        self.trace.plan_changes.push((job.id, job.iteration + 1, version));
        Ok(())
    }
}
