//! Recomputation planning: release a peak tensor early and regenerate it by
//! re-running its producer right before its next use.

use thiserror::Error;

use crate::access::{AccessType, TensorAccess, TensorAccessSequence};
use crate::graph::{ComputeGraph, TensorKind};
use crate::ids::{AccessId, JobId, OpId, TensorId};
use crate::peak::{analyze_plan, PeakReport};
use crate::plan::{anchor, resolve, Direction, RecomputeEvent, SchedulingPlan};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecomputeError {
    #[error("recompute time must be positive")]
    ZeroTime,
}

/// Memory saved per tick of recomputation.
pub fn msps(memory_saving: u64, recompute_time: u64) -> Result<f64, RecomputeError> {
    if recompute_time == 0 {
        return Err(RecomputeError::ZeroTime);
    }
    Ok(memory_saving as f64 / recompute_time as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecomputeCandidate {
    pub job_id: JobId,
    pub tensor_id: TensorId,
    pub release_after: AccessId,
    pub target_access: AccessId,
    pub regen_op: OpId,
    pub recompute_latency: u64,
    pub memory_saving: u64,
    pub msps: f64,
}

fn regen_inputs(plan: &SchedulingPlan, graph: &ComputeGraph) -> Vec<TensorId> {
    plan.recompute_events
        .iter()
        .flat_map(|r| graph.op(r.regen_op).inputs.iter().copied())
        .collect()
}

fn last_access<'s>(seq: &'s TensorAccessSequence, tensor: TensorId) -> Option<&'s TensorAccess> {
    seq.accesses.iter().rev().find(|a| a.tensor_id == tensor)
}

/// Peak tensors of one job that can be regenerated from inputs that stay
/// resident until the regeneration runs.
pub fn recompute_candidates(
    graph: &ComputeGraph,
    base: &TensorAccessSequence,
    eff: &TensorAccessSequence,
    plan: &SchedulingPlan,
    report: &PeakReport,
) -> Vec<RecomputeCandidate> {
    let used_as_input = regen_inputs(plan, graph);
    let mut out = Vec::new();
    for &t in &report.peak_tensors {
        if graph.tensor(t).kind != TensorKind::Interim
            || plan.is_swapped(t)
            || plan.is_recomputed(t)
            || used_as_input.contains(&t)
        {
            continue;
        }
        let own: Vec<&TensorAccess> = eff.accesses.iter().filter(|a| a.tensor_id == t).collect();
        let Some(pi) = own.iter().rposition(|a| a.end_time <= report.peak_time) else {
            continue;
        };
        let Some(next) = own.get(pi + 1) else { continue };
        let prev = own[pi];
        if next.access_type != AccessType::Tua
            || next.start_time <= report.peak_time
            || plan.release_flags.contains(&prev.access_id)
            || base.get(next.access_id).is_none()
        {
            continue;
        }
        let regen_op = graph.producer(t);
        let regen_inputs_ok = graph.op(regen_op).inputs.iter().all(|&i| {
            if plan.is_swapped(i) || plan.is_recomputed(i) {
                return false;
            }
            graph.tensor(i).kind.is_persistent()
                || last_access(eff, i).is_some_and(|a| a.start_time >= next.start_time)
        });
        if !regen_inputs_ok {
            continue;
        }
        let Some(latency) = base
            .executions
            .iter()
            .find(|e| e.op_id == regen_op)
            .map(|e| e.end_time - e.start_time)
        else {
            continue;
        };
        let size = graph.size(t);
        let Ok(value) = msps(size, latency) else {
            continue;
        };
        out.push(RecomputeCandidate {
            job_id: graph.job_id(),
            tensor_id: t,
            release_after: prev.access_id,
            target_access: next.access_id,
            regen_op,
            recompute_latency: latency,
            memory_saving: size,
            msps: value,
        });
    }
    out
}

/// Applies a candidate to a copy of `plan`: releases the tensor early, adds
/// the recompute event, shifts swaps that run past the insertion point, and
/// drops any swap pair the shift invalidates.
pub fn apply_recompute(
    graph: &ComputeGraph,
    base: &TensorAccessSequence,
    plan: &SchedulingPlan,
    cand: &RecomputeCandidate,
) -> SchedulingPlan {
    let old_eff = plan.effective_sequence(base, graph);
    let insert_at = old_eff
        .execution_of(cand.target_access)
        .map(|e| old_eff.executions[e].start_time)
        .expect("target access is in the sequence");
    let mut next = plan.clone();
    next.release_flags.insert(cand.release_after);
    next.recompute_events.push(RecomputeEvent {
        event_id: plan.next_event_id(),
        job_id: plan.job_id,
        tensor_id: cand.tensor_id,
        target_access: cand.target_access,
        release_after: cand.release_after,
        regen_op: cand.regen_op,
        recompute_latency: cand.recompute_latency,
        memory_saving: cand.memory_saving,
    });
    let eff = next.effective_sequence(base, graph);
    for ev in &mut next.swap_events {
        if ev.end_time > insert_at {
            ev.start_time += cand.recompute_latency;
            ev.end_time += cand.recompute_latency;
            ev.latest_time += cand.recompute_latency;
            if ev.earliest_time >= insert_at {
                ev.earliest_time += cand.recompute_latency;
            }
        }
        let (trigger, delta) = anchor(&eff, ev.start_time);
        ev.trigger_access = trigger;
        ev.delta_time = delta;
    }
    for pair in invalid_pairs(&next, &eff) {
        next.remove_pair(pair);
    }
    next
}

/// Swap pairs whose events miss their anchors, leave the iteration, overlap
/// each other, or overlap an access of their own tensor under `eff`.
pub fn invalid_pairs(plan: &SchedulingPlan, eff: &TensorAccessSequence) -> Vec<u32> {
    let mut bad = Vec::new();
    for ev in &plan.swap_events {
        let start = resolve(eff, ev.trigger_access, ev.delta_time);
        let end = start + ev.duration();
        let ok = match eff.get(ev.anchor_access) {
            None => false,
            Some(a) => match ev.direction {
                Direction::Out => start >= a.end_time,
                Direction::In => end <= a.start_time,
            },
        } && end <= eff.iteration_period
            && !eff.accesses.iter().any(|a| {
                a.tensor_id == ev.tensor_id && a.start_time < end && start < a.end_time
            });
        if !ok {
            bad.push(ev.pair_id);
        }
    }
    let mut spans: Vec<(u64, u64, u32)> = plan
        .swap_events
        .iter()
        .map(|e| {
            let s = resolve(eff, e.trigger_access, e.delta_time);
            (s, s + e.duration(), e.pair_id)
        })
        .collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            bad.push(w[1].2);
        }
    }
    bad.sort_unstable();
    bad.dedup();
    bad
}

/// Adds the single best recomputation across all jobs. Returns false when
/// the merged peak already fits `budget_bytes` or nothing applies.
pub fn recompute_pass(
    jobs: &[(&ComputeGraph, &TensorAccessSequence)],
    plans: &mut [SchedulingPlan],
    budget_bytes: u64,
    reports: &[PeakReport],
) -> bool {
    let merged: u64 = reports.iter().map(|r| r.memory_peak).sum();
    if merged <= budget_bytes {
        return false;
    }
    let mut all: Vec<(usize, RecomputeCandidate)> = Vec::new();
    for (i, &(graph, base)) in jobs.iter().enumerate() {
        let eff = plans[i].effective_sequence(base, graph);
        for c in recompute_candidates(graph, base, &eff, &plans[i], &reports[i]) {
            all.push((i, c));
        }
    }
    all.sort_by(|(_, a), (_, b)| {
        b.msps
            .total_cmp(&a.msps)
            .then(a.job_id.cmp(&b.job_id))
            .then(a.tensor_id.cmp(&b.tensor_id))
    });
    for (i, cand) in all {
        let (graph, base) = jobs[i];
        let trial = apply_recompute(graph, base, &plans[i], &cand);
        match analyze_plan(graph, base, &trial) {
            Ok((r, _)) if r.memory_peak <= reports[i].memory_peak => {
                plans[i] = trial;
                return true;
            }
            _ => continue,
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msps_formula() {
        assert_eq!(msps(100, 2), Ok(50.0));
        assert_eq!(msps(0, 5), Ok(0.0));
        assert_eq!(msps(100, 0), Err(RecomputeError::ZeroTime));
    }
}
