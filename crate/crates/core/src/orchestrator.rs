//! The planning loop over all jobs and the online replanning lifecycle.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::{activity_analysis, generate_access_sequence, AccessError, LatencyTable, TensorAccessSequence};
use crate::graph::ComputeGraph;
use crate::ids::{JobId, OpId};
use crate::latency::{should_replan, LatencyError, LatencyTracker, ReplanState};
use crate::peak::{analyze_plan, PeakError, PeakReport};
use crate::plan::{SchedulingPlan, TransferModel};
use crate::recompute::recompute_pass;
use crate::swap::{swap_pass, JobView, SwapBudget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub pcie_bandwidth: u64,
    pub transfer_setup: u64,
    pub memory_budget: u64,
    pub max_swap_ratios: BTreeMap<JobId, f64>,
    pub ewma_alpha: f64,
    pub replan_threshold: f64,
    pub stall_epsilon: f64,
    pub stall_min_iters: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            pcie_bandwidth: 12_000,
            transfer_setup: 10,
            memory_budget: u64::MAX,
            max_swap_ratios: BTreeMap::new(),
            ewma_alpha: 0.3,
            replan_threshold: 0.2,
            stall_epsilon: 0.0005,
            stall_min_iters: 100,
        }
    }
}

impl PlannerConfig {
    pub fn transfer(&self) -> TransferModel {
        TransferModel::new(self.pcie_bandwidth, self.transfer_setup)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |what: &str| Err(OrchestratorError::Config(what.to_string()));
        if self.pcie_bandwidth == 0 {
            return bad("pcie_bandwidth must be positive");
        }
        if !(0.0..=1.0).contains(&self.ewma_alpha) {
            return bad("ewma_alpha must lie in [0, 1]");
        }
        if self.replan_threshold <= 0.0 {
            return bad("replan_threshold must be positive");
        }
        if !(self.stall_epsilon > 0.0 && self.stall_epsilon < 1.0) {
            return bad("stall_epsilon must lie in (0, 1)");
        }
        if self.max_swap_ratios.values().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return bad("max_swap_ratio must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid planner config: {0}")]
    Config(String),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Peak(#[from] PeakError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
}

#[derive(Debug, Clone)]
pub struct PlanningJob {
    pub graph: ComputeGraph,
    pub latencies: LatencyTable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanOutcome {
    pub plans: BTreeMap<JobId, SchedulingPlan>,
    pub reports: BTreeMap<JobId, PeakReport>,
    /// Merged peak at the start of every loop iteration, then the final one.
    pub mp_history: Vec<u64>,
    pub iterations: usize,
    pub diagnostic: Option<String>,
}

impl PlanOutcome {
    pub fn merged_peak(&self) -> u64 {
        self.reports.values().map(|r| r.memory_peak).sum()
    }
}

/// Access sequence with release flags for one job.
pub fn base_sequence(graph: &ComputeGraph, latencies: &LatencyTable) -> Result<TensorAccessSequence, AccessError> {
    Ok(activity_analysis(&generate_access_sequence(graph, latencies)?, graph))
}

fn analyze_all(
    jobs: &[PlanningJob],
    bases: &[TensorAccessSequence],
    plans: &[SchedulingPlan],
) -> Result<(Vec<PeakReport>, Vec<TensorAccessSequence>), PeakError> {
    let mut reports = Vec::with_capacity(jobs.len());
    let mut effs = Vec::with_capacity(jobs.len());
    for ((job, base), plan) in jobs.iter().zip(bases).zip(plans) {
        let (r, eff) = analyze_plan(&job.graph, base, plan)?;
        reports.push(r);
        effs.push(eff);
    }
    Ok((reports, effs))
}

/// Mean peak over the jobs touched in the last three iterations improved by
/// less than `epsilon` (relative).
fn stalled(history: &[(BTreeSet<usize>, Vec<u64>)], epsilon: f64) -> bool {
    if history.len() < 4 {
        return false;
    }
    let recent = &history[history.len() - 4..];
    let touched: BTreeSet<usize> = recent[1..].iter().flat_map(|(t, _)| t.iter().copied()).collect();
    if touched.is_empty() {
        return true;
    }
    let mean = |mps: &Vec<u64>| touched.iter().map(|&j| mps[j] as f64).sum::<f64>() / touched.len() as f64;
    let before = mean(&recent[0].1);
    let after = mean(&recent[3].1);
    before <= 0.0 || (before - after) / before < epsilon
}

/// Runs the swap-then-recompute fixed point over all jobs.
pub fn build_plan(jobs: &[PlanningJob], config: &PlannerConfig) -> Result<PlanOutcome, OrchestratorError> {
    config.validate()?;
    let transfer = config.transfer();
    let bases: Vec<TensorAccessSequence> = jobs
        .iter()
        .map(|j| base_sequence(&j.graph, &j.latencies))
        .collect::<Result<_, _>>()?;
    let mut plans: Vec<SchedulingPlan> = bases.iter().map(SchedulingPlan::from_sequence).collect();

    let mut swap_ok = true;
    let mut recompute_ok = true;
    let mut iter = 0usize;
    let mut mp_history = Vec::new();
    let mut stall_history: Vec<(BTreeSet<usize>, Vec<u64>)> = Vec::new();
    let mut touched_last = BTreeSet::new();
    while swap_ok || recompute_ok {
        let (reports, effs) = analyze_all(jobs, &bases, &plans)?;
        let merged: u64 = reports.iter().map(|r| r.memory_peak).sum();
        mp_history.push(merged);
        stall_history.push((touched_last.clone(), reports.iter().map(|r| r.memory_peak).collect()));
        if iter > config.stall_min_iters && stalled(&stall_history, config.stall_epsilon) {
            break;
        }
        let before = plans.clone();
        if swap_ok {
            let views: Vec<JobView> = jobs
                .iter()
                .zip(&effs)
                .zip(&reports)
                .map(|((j, seq), report)| JobView { graph: &j.graph, seq, report })
                .collect();
            let mut budget = SwapBudget::from_plans(config.max_swap_ratios.clone(), &plans);
            swap_ok = swap_pass(&views, &mut plans, &mut budget, &transfer);
        } else if merged > config.memory_budget {
            let pairs: Vec<(&ComputeGraph, &TensorAccessSequence)> =
                jobs.iter().zip(&bases).map(|(j, b)| (&j.graph, b)).collect();
            recompute_ok = recompute_pass(&pairs, &mut plans, config.memory_budget, &reports);
        } else {
            break;
        }
        touched_last = (0..plans.len()).filter(|&i| plans[i] != before[i]).collect();
        iter += 1;
    }

    let (reports, _) = analyze_all(jobs, &bases, &plans)?;
    let merged: u64 = reports.iter().map(|r| r.memory_peak).sum();
    mp_history.push(merged);
    let diagnostic = (merged > config.memory_budget).then(|| {
        format!(
            "merged peak {merged} bytes still exceeds the memory budget of {} bytes",
            config.memory_budget
        )
    });
    Ok(PlanOutcome {
        plans: plans.into_iter().map(|p| (p.job_id, p)).collect(),
        reports: jobs.iter().map(|j| j.graph.job_id()).zip(reports).collect(),
        mp_history,
        iterations: iter,
        diagnostic,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub job: JobId,
    pub op: OpId,
    pub ticks: u64,
}

/// A replacement plan and the latencies it was timed with.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanUpdate {
    pub plan: SchedulingPlan,
    pub latencies: LatencyTable,
}

/// Folds observations into the tracker and, if the latency sum drifted past
/// the threshold, replans every job from the corrected estimates. New plans
/// carry the next version number of the plans they replace.
pub fn replan_if_needed(
    graphs: &[ComputeGraph],
    observations: &[Observation],
    tracker: &mut LatencyTracker,
    state: &mut ReplanState,
    current: &BTreeMap<JobId, SchedulingPlan>,
    config: &PlannerConfig,
) -> Result<Option<PlanOutcome>, OrchestratorError> {
    for o in observations {
        tracker.observe(o.job, o.op, o.ticks);
    }
    state.current_sum = tracker.sum();
    if !should_replan(state) {
        return Ok(None);
    }
    state.last_sum = state.current_sum;
    let jobs: Vec<PlanningJob> = graphs
        .iter()
        .map(|g| PlanningJob {
            graph: g.clone(),
            latencies: tracker.table(g.job_id()),
        })
        .collect();
    let mut outcome = build_plan(&jobs, config)?;
    for (job, plan) in outcome.plans.iter_mut() {
        plan.version = current.get(job).map_or(0, |p| p.version) + 1;
    }
    Ok(Some(outcome))
}

/// Replanning state carried across a simulation run.
#[derive(Debug, Clone)]
pub struct Lifecycle {
    pub graphs: Vec<ComputeGraph>,
    pub config: PlannerConfig,
    pub tracker: LatencyTracker,
    pub state: ReplanState,
    pub plans: BTreeMap<JobId, SchedulingPlan>,
    pub replans: u32,
}

impl Lifecycle {
    /// Plans every job from its cold-start latencies.
    pub fn start(jobs: &[PlanningJob], config: &PlannerConfig) -> Result<(Self, PlanOutcome), OrchestratorError> {
        let outcome = build_plan(jobs, config)?;
        let initial: BTreeMap<JobId, LatencyTable> =
            jobs.iter().map(|j| (j.graph.job_id(), j.latencies.clone())).collect();
        let tracker = LatencyTracker::new(config.ewma_alpha, &initial)?;
        let sum = tracker.sum();
        let lifecycle = Lifecycle {
            graphs: jobs.iter().map(|j| j.graph.clone()).collect(),
            config: config.clone(),
            tracker,
            state: ReplanState {
                last_sum: sum,
                current_sum: sum,
                threshold: config.replan_threshold,
            },
            plans: outcome.plans.clone(),
            replans: 0,
        };
        Ok((lifecycle, outcome))
    }

    /// Handles one iteration report; returns new plans when a replan fired.
    pub fn report(&mut self, observations: &[Observation]) -> Result<Vec<PlanUpdate>, OrchestratorError> {
        let next = replan_if_needed(
            &self.graphs,
            observations,
            &mut self.tracker,
            &mut self.state,
            &self.plans,
            &self.config,
        )?;
        Ok(match next {
            Some(outcome) => {
                self.replans += 1;
                self.plans = outcome.plans;
                self.plans
                    .values()
                    .map(|p| PlanUpdate {
                        plan: p.clone(),
                        latencies: self.tracker.table(p.job_id),
                    })
                    .collect()
            }
            None => Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_jobs() {
        let out = build_plan(&[], &PlannerConfig::default()).unwrap();
        assert!(out.plans.is_empty());
        assert_eq!(out.merged_peak(), 0);
    }

    #[test]
    fn config_validation() {
        let mut c = PlannerConfig::default();
        assert!(c.validate().is_ok());
        c.stall_epsilon = 0.0;
        assert!(c.validate().is_err());
    }
}
