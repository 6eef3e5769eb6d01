//! Static memory-footprint analysis over the merged timeline of tensor
//! accesses and planned events.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::{AccessType, TensorAccessSequence};
use crate::graph::{ComputeGraph, TensorKind};
use crate::ids::{AccessId, TensorId};
use crate::plan::{initial_resident, resolve, Direction, SchedulingPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimelineEventType {
    Tga,
    Tua,
    SwapInComplete,
    SwapOutComplete,
    Release,
}

impl TimelineEventType {
    fn frees(self) -> bool {
        matches!(
            self,
            TimelineEventType::SwapOutComplete | TimelineEventType::Release
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub time: u64,
    pub event_type: TimelineEventType,
    pub tensor_id: TensorId,
    pub size: u64,
    pub delta: i64,
    pub access_id: Option<AccessId>,
    /// Set on TUAs whose tensor is released when the access ends.
    pub release_flag: bool,
    /// Set on the TGA of an updated parameter: the parameter whose storage it takes over.
    pub alias_of: Option<TensorId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakReport {
    pub memory_peak: u64,
    pub peak_tensors: BTreeSet<TensorId>,
    pub last_input_access: Option<AccessId>,
    pub peak_time: u64,
    pub footprint_curve: Vec<(u64, u64)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PeakError {
    #[error("plan references unknown access {0}")]
    UnknownAccess(AccessId),
    #[error("tensor {tensor} released at tick {time} while not resident")]
    DoubleRelease { tensor: TensorId, time: u64 },
    #[error("tensor {tensor} swapped in at tick {time} while already resident")]
    DoubleAllocation { tensor: TensorId, time: u64 },
    #[error("updated parameter {tensor} takes over {param} at tick {time}, which is not resident")]
    AliasNotResident {
        tensor: TensorId,
        param: TensorId,
        time: u64,
    },
}

/// Merges accesses and plan events into one time-ordered list. At equal ticks
/// frees come first, then everything else, each group ordered by tensor id.
/// Releases that end a zero-length access go last, after the access itself.
pub fn build_timeline(
    seq: &TensorAccessSequence,
    graph: &ComputeGraph,
    plan: &SchedulingPlan,
) -> Result<Vec<TimelineEvent>, PeakError> {
    for &flag in &plan.release_flags {
        if seq.get(flag).is_none() {
            return Err(PeakError::UnknownAccess(flag));
        }
    }
    let mut events = Vec::with_capacity(seq.accesses.len() * 2);
    let mut instant = BTreeSet::new();
    for a in &seq.accesses {
        let spec = graph.tensor(a.tensor_id);
        let size = spec.size;
        match a.access_type {
            AccessType::Tga => {
                let alias = graph.alias_of(a.tensor_id);
                let delta = if alias.is_some() || spec.kind == TensorKind::Parameter {
                    0
                } else {
                    size as i64
                };
                events.push(TimelineEvent {
                    time: a.start_time,
                    event_type: TimelineEventType::Tga,
                    tensor_id: a.tensor_id,
                    size,
                    delta,
                    access_id: Some(a.access_id),
                    release_flag: a.release_flag,
                    alias_of: alias,
                });
            }
            AccessType::Tua => events.push(TimelineEvent {
                time: a.start_time,
                event_type: TimelineEventType::Tua,
                tensor_id: a.tensor_id,
                size,
                delta: 0,
                access_id: Some(a.access_id),
                release_flag: a.release_flag,
                alias_of: None,
            }),
        }
        if a.release_flag {
            instant.extend((a.start_time == a.end_time).then_some(a.access_id));
            events.push(TimelineEvent {
                time: a.end_time,
                event_type: TimelineEventType::Release,
                tensor_id: a.tensor_id,
                size,
                delta: -(size as i64),
                access_id: Some(a.access_id),
                release_flag: true,
                alias_of: None,
            });
        }
    }
    for ev in &plan.swap_events {
        if let Some(t) = ev.trigger_access {
            seq.get(t).ok_or(PeakError::UnknownAccess(t))?;
        }
        let anchor = seq
            .get(ev.anchor_access)
            .ok_or(PeakError::UnknownAccess(ev.anchor_access))?;
        let size = graph.size(ev.tensor_id);
        let start = resolve(seq, ev.trigger_access, ev.delta_time);
        let end = start + ev.duration();
        let (time, event_type, delta) = match ev.direction {
            Direction::Out => (
                end.max(anchor.end_time),
                TimelineEventType::SwapOutComplete,
                -(size as i64),
            ),
            Direction::In => (end, TimelineEventType::SwapInComplete, size as i64),
        };
        events.push(TimelineEvent {
            time,
            event_type,
            tensor_id: ev.tensor_id,
            size,
            delta,
            access_id: None,
            release_flag: false,
            alias_of: None,
        });
    }
    // stable sort keeps emission order as the final tie-break
    let tier = |e: &TimelineEvent| match e.event_type {
        TimelineEventType::Release if e.access_id.is_some_and(|a| instant.contains(&a)) => 2,
        t if t.frees() => 0,
        _ => 1,
    };
    events.sort_by_key(|e| (e.time, tier(e), e.tensor_id));
    Ok(events)
}

/// Walks the timeline and reports the footprint peak. The footprint starts
/// at the total size of `initial_resident`; TGAs of those tensors add nothing.
pub fn analyze_peak(
    timeline: &[TimelineEvent],
    initial_resident: &BTreeMap<TensorId, u64>,
) -> Result<PeakReport, PeakError> {
    let mut used: u64 = initial_resident.values().sum();
    let mut resident: BTreeSet<TensorId> = initial_resident.keys().copied().collect();
    let mut last_input = None;
    let mut report = PeakReport {
        memory_peak: used,
        peak_tensors: resident.clone(),
        last_input_access: None,
        peak_time: 0,
        footprint_curve: vec![(0, used)],
    };

    let mut i = 0;
    while i < timeline.len() {
        let time = timeline[i].time;
        // accesses seen this tick; their releases wait for the peak check
        let mut seen = BTreeSet::new();
        let mut late = Vec::new();
        while i < timeline.len() && timeline[i].time == time {
            let ev = &timeline[i];
            i += 1;
            if ev.event_type == TimelineEventType::Release && ev.access_id.is_some_and(|a| seen.contains(&a)) {
                late.push(ev);
                continue;
            }
            if ev.event_type != TimelineEventType::Release {
                seen.extend(ev.access_id);
            }
            match ev.event_type {
                TimelineEventType::Tga => {
                    if let Some(param) = ev.alias_of {
                        if !resident.remove(&param) {
                            return Err(PeakError::AliasNotResident {
                                tensor: ev.tensor_id,
                                param,
                                time,
                            });
                        }
                        resident.insert(ev.tensor_id);
                    } else if ev.delta != 0 && !initial_resident.contains_key(&ev.tensor_id) {
                        if !resident.insert(ev.tensor_id) {
                            return Err(PeakError::DoubleAllocation {
                                tensor: ev.tensor_id,
                                time,
                            });
                        }
                        used += ev.size;
                    }
                }
                TimelineEventType::Tua => {
                    if !ev.release_flag {
                        last_input = ev.access_id;
                    }
                }
                TimelineEventType::Release | TimelineEventType::SwapOutComplete => {
                    if !resident.remove(&ev.tensor_id) {
                        return Err(PeakError::DoubleRelease {
                            tensor: ev.tensor_id,
                            time,
                        });
                    }
                    used -= ev.size;
                }
                TimelineEventType::SwapInComplete => {
                    if !resident.insert(ev.tensor_id) {
                        return Err(PeakError::DoubleAllocation {
                            tensor: ev.tensor_id,
                            time,
                        });
                    }
                    used += ev.size;
                }
            }
        }
        report.footprint_curve.push((time, used));
        if used > report.memory_peak {
            report.memory_peak = used;
            report.peak_time = time;
            report.peak_tensors = resident.clone();
            report.last_input_access = last_input;
        }
        if !late.is_empty() {
            for ev in late {
                if !resident.remove(&ev.tensor_id) {
                    return Err(PeakError::DoubleRelease {
                        tensor: ev.tensor_id,
                        time,
                    });
                }
                used -= ev.size;
            }
            report.footprint_curve.push((time, used));
        }
    }
    Ok(report)
}

pub fn merge_global_peak(reports: &[PeakReport]) -> u64 {
    reports.iter().map(|r| r.memory_peak).sum()
}

/// Peak report for `plan` applied to the job's base sequence, together with
/// the effective sequence it was computed on.
pub fn analyze_plan(
    graph: &ComputeGraph,
    base: &TensorAccessSequence,
    plan: &SchedulingPlan,
) -> Result<(PeakReport, TensorAccessSequence), PeakError> {
    let eff = plan.effective_sequence(base, graph);
    let timeline = build_timeline(&eff, graph, plan)?;
    let report = analyze_peak(&timeline, &initial_resident(graph, plan))?;
    Ok((report, eff))
}
