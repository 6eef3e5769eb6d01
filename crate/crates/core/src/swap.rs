//! Greedy swap planning: move peak tensors to host memory inside feasible
//! time regions and bring them back before they are needed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::{AccessType, TensorAccess, TensorAccessSequence};
use crate::graph::ComputeGraph;
use crate::ids::{AccessId, JobId, TensorId};
use crate::peak::PeakReport;
use crate::plan::{anchor, Direction, SchedulingPlan, SwapEvent, TransferModel};

/// Upper bound on window tightenings per tensor.
pub const MAX_RETRIES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibleRegion {
    pub begin: u64,
    pub end: u64,
}

impl FeasibleRegion {
    pub fn len(&self) -> u64 {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.begin
    }
}

/// Per-job swap quotas. A job may add a swap only while its share of all
/// swapped tensors stays within `max_ratio`; the first swap overall is free.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SwapBudget {
    pub max_ratio: BTreeMap<JobId, f64>,
    pub swapped_out_count: BTreeMap<JobId, u32>,
    pub total_swapped: u32,
}

impl SwapBudget {
    pub fn new(max_ratio: BTreeMap<JobId, f64>) -> Self {
        SwapBudget {
            max_ratio,
            ..Default::default()
        }
    }

    /// Counts the tensors already swapped in `plans`.
    pub fn from_plans(max_ratio: BTreeMap<JobId, f64>, plans: &[SchedulingPlan]) -> Self {
        let mut budget = SwapBudget::new(max_ratio);
        for p in plans {
            let tensors: BTreeSet<TensorId> = p
                .swap_events
                .iter()
                .filter(|e| e.direction == Direction::Out)
                .map(|e| e.tensor_id)
                .collect();
            budget.swapped_out_count.insert(p.job_id, tensors.len() as u32);
            budget.total_swapped += tensors.len() as u32;
        }
        budget
    }

    pub fn count(&self, job: JobId) -> u32 {
        self.swapped_out_count.get(&job).copied().unwrap_or(0)
    }

    pub fn admits(&self, job: JobId) -> bool {
        if self.total_swapped == 0 {
            return true;
        }
        let ratio = self.max_ratio.get(&job).copied().unwrap_or(1.0);
        self.count(job) as f64 / self.total_swapped as f64 <= ratio
    }

    pub fn record(&mut self, job: JobId) {
        *self.swapped_out_count.entry(job).or_insert(0) += 1;
        self.total_swapped += 1;
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SwapError {
    #[error("tensor {0} has no generating access")]
    NoTga(TensorId),
}

/// Result triple of one scheduling attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SwapOutcome {
    pub succeed: bool,
    pub succeed_swap_out: bool,
    pub have_first_access: bool,
}

/// Everything the planner reads about one job.
#[derive(Debug, Clone, Copy)]
pub struct JobView<'a> {
    pub graph: &'a ComputeGraph,
    /// Effective access sequence of the job's current plan.
    pub seq: &'a TensorAccessSequence,
    pub report: &'a PeakReport,
}

/// Swap-out window for a peak tensor: after its last access that starts by
/// the peak, and no later than the peak itself.
pub fn swap_window(
    tensor: TensorId,
    report: &PeakReport,
    seq: &TensorAccessSequence,
) -> Result<(u64, u64), SwapError> {
    let tga = seq.tga_of(tensor).ok_or(SwapError::NoTga(tensor))?;
    let earliest = seq
        .accesses
        .iter()
        .filter(|a| a.tensor_id == tensor && a.start_time <= report.peak_time)
        .map(|a| a.end_time)
        .fold(tga.end_time, u64::max);
    Ok((earliest, report.peak_time))
}

/// Maximal sub-intervals of `window` free of `existing` transfers and of the
/// tensor's own accesses, keeping those at least `duration` long.
pub fn feasible_regions(
    window: (u64, u64),
    existing: &[(u64, u64)],
    tensor_accesses: &[(u64, u64)],
    duration: u64,
) -> Vec<FeasibleRegion> {
    let (lo, hi) = window;
    let mut blocked: Vec<(u64, u64)> = existing
        .iter()
        .chain(tensor_accesses)
        .copied()
        .filter(|&(s, e)| s < e && e > lo && s < hi)
        .collect();
    blocked.sort_unstable();
    let mut regions = Vec::new();
    let mut cursor = lo;
    for (s, e) in blocked {
        if s > cursor {
            regions.push(FeasibleRegion { begin: cursor, end: s });
        }
        cursor = cursor.max(e);
    }
    if hi > cursor {
        regions.push(FeasibleRegion { begin: cursor, end: hi });
    }
    regions.retain(|r| r.len() >= duration);
    regions
}

fn access_intervals(seq: &TensorAccessSequence, tensor: TensorId) -> Vec<(u64, u64)> {
    seq.accesses
        .iter()
        .filter(|a| a.tensor_id == tensor)
        .map(|a| (a.start_time, a.end_time))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn make_event(
    plan: &SchedulingPlan,
    seq: &TensorAccessSequence,
    pair_id: u32,
    tensor: TensorId,
    direction: Direction,
    start: u64,
    duration: u64,
    window: (u64, u64),
    wraps: bool,
    anchor_access: AccessId,
) -> SwapEvent {
    let (trigger, delta) = anchor(seq, start);
    SwapEvent {
        event_id: plan.next_event_id(),
        pair_id,
        job_id: plan.job_id,
        tensor_id: tensor,
        direction,
        trigger_access: trigger,
        delta_time: delta,
        start_time: start,
        end_time: start + duration,
        earliest_time: window.0,
        latest_time: window.1,
        wraps_iteration: wraps,
        anchor_access,
    }
}

/// The tensor's access that ends last at or before `time`.
fn preceding_access<'s>(
    seq: &'s TensorAccessSequence,
    tensor: TensorId,
    time: u64,
) -> Option<&'s TensorAccess> {
    seq.accesses
        .iter()
        .filter(|a| a.tensor_id == tensor && a.end_time <= time)
        .max_by_key(|a| (a.end_time, seq.position(a.access_id)))
}

fn first_tua_from<'s>(
    seq: &'s TensorAccessSequence,
    tensor: TensorId,
    time: u64,
) -> Option<&'s TensorAccess> {
    seq.accesses
        .iter()
        .find(|a| a.tensor_id == tensor && a.access_type == AccessType::Tua && a.start_time >= time)
}

/// One attempt at an out/in pair for a forward/backward tensor within
/// `window`. Returns the outcome and, after a failed swap-in, the tightened
/// window for the next attempt.
pub fn schedule_swap(
    job: &JobView,
    plan: &mut SchedulingPlan,
    tensor: TensorId,
    window: (u64, u64),
    transfer: &TransferModel,
) -> (SwapOutcome, Option<(u64, u64)>) {
    let mut outcome = SwapOutcome::default();
    let seq = job.seq;
    let duration = transfer.duration(job.graph.size(tensor));
    let own = access_intervals(seq, tensor);
    let regions = feasible_regions(window, &plan.swap_intervals(), &own, duration);
    let Some(region) = regions.first() else {
        return (outcome, None);
    };
    let out_start = region.begin;
    let out_end = out_start + duration;
    let Some(after) = preceding_access(seq, tensor, out_start) else {
        return (outcome, None);
    };
    let pair_id = plan.next_pair_id();
    let out = make_event(
        plan,
        seq,
        pair_id,
        tensor,
        Direction::Out,
        out_start,
        duration,
        window,
        false,
        after.access_id,
    );
    plan.swap_events.push(out);
    outcome.succeed_swap_out = true;

    let Some(first) = first_tua_from(seq, tensor, out_end) else {
        plan.remove_pair(pair_id);
        return (outcome, None);
    };
    outcome.have_first_access = true;
    let in_window = (out_end, first.start_time);
    let in_regions = feasible_regions(in_window, &plan.swap_intervals(), &own, duration);
    match in_regions.last() {
        Some(r) => {
            let ev = make_event(
                plan,
                seq,
                pair_id,
                tensor,
                Direction::In,
                r.end - duration,
                duration,
                in_window,
                false,
                first.access_id,
            );
            plan.swap_events.push(ev);
            outcome.succeed = true;
            (outcome, None)
        }
        None => {
            plan.remove_pair(pair_id);
            let next = (out_end, window.1.min(first.end_time));
            (outcome, Some(next))
        }
    }
}

/// Out/in pairs between consecutive later uses of a tensor that already has
/// one successful pair ending at `served`.
fn swap_rest(
    job: &JobView,
    plan: &mut SchedulingPlan,
    tensor: TensorId,
    served: &TensorAccess,
    transfer: &TransferModel,
) {
    let seq = job.seq;
    let duration = transfer.duration(job.graph.size(tensor));
    let own = access_intervals(seq, tensor);
    let mut uses: Vec<&TensorAccess> = seq
        .accesses
        .iter()
        .filter(|a| {
            a.tensor_id == tensor
                && a.access_type == AccessType::Tua
                && a.start_time >= served.start_time
        })
        .collect();
    uses.sort_by_key(|a| (a.end_time, seq.position(a.access_id)));
    for w in uses.windows(2) {
        let (prev, next) = (w[0], w[1]);
        let gap = (prev.end_time, next.start_time);
        let regions = feasible_regions(gap, &plan.swap_intervals(), &own, duration);
        let Some(r) = regions.first() else { continue };
        let out_end = r.begin + duration;
        let mut taken = plan.swap_intervals();
        taken.push((r.begin, out_end));
        let in_regions = feasible_regions((out_end, next.start_time), &taken, &own, duration);
        let Some(ir) = in_regions.last() else { continue };
        let pair_id = plan.next_pair_id();
        let out = make_event(
            plan,
            seq,
            pair_id,
            tensor,
            Direction::Out,
            r.begin,
            duration,
            gap,
            false,
            prev.access_id,
        );
        plan.swap_events.push(out);
        let inn = make_event(
            plan,
            seq,
            pair_id,
            tensor,
            Direction::In,
            ir.end - duration,
            duration,
            (out_end, next.start_time),
            false,
            next.access_id,
        );
        plan.swap_events.push(inn);
    }
}

/// Pair that carries a parameter across the iteration boundary: its updated
/// value leaves the device after the optimizer writes it and the parameter
/// returns just before its first use in the next iteration.
pub fn schedule_wrapped(
    job: &JobView,
    plan: &mut SchedulingPlan,
    param: TensorId,
    updated: TensorId,
    out_latest: u64,
    transfer: &TransferModel,
) -> bool {
    let seq = job.seq;
    let (Some(write), Some(first)) = (seq.tga_of(updated), first_tua_from(seq, param, 0)) else {
        return false;
    };
    let duration = transfer.duration(job.graph.size(updated));
    let out_window = (write.end_time, out_latest);
    let out_regions = feasible_regions(
        out_window,
        &plan.swap_intervals(),
        &access_intervals(seq, updated),
        duration,
    );
    let Some(r) = out_regions.first() else {
        return false;
    };
    let mut taken = plan.swap_intervals();
    taken.push((r.begin, r.begin + duration));
    let in_window = (0, first.start_time);
    let in_regions = feasible_regions(in_window, &taken, &access_intervals(seq, param), duration);
    let Some(ir) = in_regions.last() else {
        return false;
    };
    let pair_id = plan.next_pair_id();
    let out = make_event(
        plan,
        seq,
        pair_id,
        updated,
        Direction::Out,
        r.begin,
        duration,
        out_window,
        true,
        write.access_id,
    );
    plan.swap_events.push(out);
    let inn = make_event(
        plan,
        seq,
        pair_id,
        param,
        Direction::In,
        ir.end - duration,
        duration,
        in_window,
        true,
        first.access_id,
    );
    plan.swap_events.push(inn);
    true
}

/// Parameter and updated parameter for a peak tensor that should be carried
/// across iterations, with the latest start of the swap-out.
fn wrapped_route(job: &JobView, tensor: TensorId) -> Option<(TensorId, TensorId, u64)> {
    let g = job.graph;
    if let Some(param) = g.alias_of(tensor) {
        return Some((param, tensor, job.report.peak_time));
    }
    let updated = g.updated_by(tensor)?;
    let first = first_tua_from(job.seq, tensor, 0)?;
    (job.report.peak_time < first.start_time).then_some((tensor, updated, job.seq.iteration_period))
}

fn regen_inputs(plan: &SchedulingPlan, graph: &ComputeGraph) -> BTreeSet<TensorId> {
    plan.recompute_events
        .iter()
        .flat_map(|r| graph.op(r.regen_op).inputs.iter().copied())
        .collect()
}

/// One greedy pass over all peak tensors of all jobs, largest first.
/// Returns whether any swap event was added.
pub fn swap_pass(
    jobs: &[JobView],
    plans: &mut [SchedulingPlan],
    budget: &mut SwapBudget,
    transfer: &TransferModel,
) -> bool {
    assert_eq!(jobs.len(), plans.len(), "one plan per job");
    let mut candidates: Vec<(u64, JobId, TensorId, usize)> = Vec::new();
    for (i, job) in jobs.iter().enumerate() {
        for &t in &job.report.peak_tensors {
            candidates.push((job.graph.size(t), job.graph.job_id(), t, i));
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut changed = false;
    for (_, job_id, tensor, i) in candidates {
        let job = &jobs[i];
        let plan = &mut plans[i];
        if plan.is_swapped(tensor) || plan.is_recomputed(tensor) {
            continue;
        }
        if regen_inputs(plan, job.graph).contains(&tensor) {
            continue;
        }
        if let Some((param, updated, latest)) = wrapped_route(job, tensor) {
            if plan.is_swapped(param) || plan.is_swapped(updated) {
                continue;
            }
            if schedule_wrapped(job, plan, param, updated, latest, transfer) {
                budget.record(job_id);
                changed = true;
            }
            continue;
        }
        if !budget.admits(job_id) || job.seq.accesses_of(tensor).len() <= 1 {
            continue;
        }
        let Ok(mut window) = swap_window(tensor, job.report, job.seq) else {
            continue;
        };
        for _ in 0..MAX_RETRIES {
            if window.1 <= window.0 {
                break;
            }
            let (outcome, next) = schedule_swap(job, plan, tensor, window, transfer);
            if outcome.succeed {
                let served = plan
                    .swaps_of(tensor)
                    .find(|e| e.direction == Direction::In)
                    .map(|e| e.anchor_access)
                    .and_then(|a| job.seq.get(a))
                    .expect("successful swap has a swap-in")
                    .clone();
                swap_rest(job, plan, tensor, &served, transfer);
                budget.record(job_id);
                changed = true;
                break;
            }
            match next {
                Some(w) if outcome.succeed_swap_out && outcome.have_first_access => window = w,
                _ => break,
            }
        }
    }
    changed
}
