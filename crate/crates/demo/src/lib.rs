//! Browser demo: plan one generated workload, compare the three execution
//! modes, and watch the drift tracker decide when to replan.
//!
//! Every export returns a JSON string so the page needs no bindings beyond
//! the generated glue.

use memsched::latency::{ewma_update, should_replan, ReplanState};
use memsched::metrics::compute_metrics;
use memsched::orchestrator::{base_sequence, build_plan, PlannerConfig, PlanningJob};
use memsched::peak::analyze_plan;
use memsched::simulator::{simulate, Mode, SimConfig, SimJob};
use memsched::workload::{generate_workload, DeviceModel, Family};
use memsched::{JobId, SchedulingPlan};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const MAX_POINTS: usize = 400;

/// Keeps at most `MAX_POINTS` points of a step curve, always the maximum of
/// each bucket so peaks survive.
fn thin(curve: &[(u64, u64)]) -> Vec<(u64, u64)> {
    if curve.len() <= MAX_POINTS {
        return curve.to_vec();
    }
    let step = curve.len().div_ceil(MAX_POINTS);
    curve
        .chunks(step)
        .map(|c| *c.iter().max_by_key(|p| p.1).unwrap())
        .collect()
}

struct Workload {
    job: PlanningJob,
    planner: PlannerConfig,
}

fn workload(family: &str, batch: u64, bandwidth: u64) -> Result<Workload, String> {
    let family: Family = family.parse().map_err(|e| format!("{e}"))?;
    let graph = generate_workload(family, batch, JobId(0)).map_err(|e| e.to_string())?;
    let latencies = DeviceModel::default().latencies(&graph);
    let planner = PlannerConfig {
        pcie_bandwidth: bandwidth.max(1),
        ..PlannerConfig::default()
    };
    Ok(Workload {
        job: PlanningJob { graph, latencies },
        planner,
    })
}

/// Plans a single generated job and reports the footprint before and after.
pub fn plan_report(family: &str, batch: u64, bandwidth: u64) -> Result<Value, String> {
    let w = workload(family, batch, bandwidth)?;
    let g = &w.job.graph;
    let base = base_sequence(g, &w.job.latencies).map_err(|e| e.to_string())?;
    let (before, _) = analyze_plan(g, &base, &SchedulingPlan::from_sequence(&base)).map_err(|e| e.to_string())?;
    let out = build_plan(std::slice::from_ref(&w.job), &w.planner).map_err(|e| e.to_string())?;
    let plan = &out.plans[&g.job_id()];
    let after = &out.reports[&g.job_id()];
    let wrapped = plan.swap_events.iter().filter(|e| e.wraps_iteration).count();
    Ok(json!({
        "ops": g.ops().len(),
        "tensors": g.tensors().len(),
        "period": base.iteration_period,
        "swap_events": plan.swap_events.len(),
        "wrapped_events": wrapped,
        "recompute_events": plan.recompute_events.len(),
        "peak_before": before.memory_peak,
        "peak_after": after.memory_peak,
        "mp_history": out.mp_history,
        "curve_before": thin(&before.footprint_curve),
        "curve_after": thin(&after.footprint_curve),
    }))
}

/// Runs vanilla, scheduled and passive on one job. Passive gets the
/// scheduled plan's peak as its pool, so both save the same memory.
pub fn mode_report(family: &str, batch: u64, bandwidth: u64, jitter: f64, seed: u64) -> Result<Value, String> {
    let w = workload(family, batch, bandwidth)?;
    let g = &w.job.graph;
    let out = build_plan(std::slice::from_ref(&w.job), &w.planner).map_err(|e| e.to_string())?;
    let jobs = [SimJob {
        graph: g.clone(),
        plan: out.plans[&g.job_id()].clone(),
        latencies: w.job.latencies.clone(),
        planned_latencies: None,
        launch_tick: 0,
    }];
    let config = |mode, budget| SimConfig {
        mode,
        transfer: w.planner.transfer(),
        memory_budget: budget,
        latency_jitter: jitter.clamp(0.0, 0.9),
        seed,
        ..SimConfig::default()
    };
    let vanilla = simulate(&jobs, &config(Mode::Vanilla, u64::MAX)).map_err(|e| e.to_string())?;
    let scheduled = simulate(&jobs, &config(Mode::Scheduled, u64::MAX)).map_err(|e| e.to_string())?;
    let passive = simulate(&jobs, &config(Mode::Passive, scheduled.peak)).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for t in [&vanilla, &scheduled, &passive] {
        let m = compute_metrics(&vanilla, t).map_err(|e| e.to_string())?;
        rows.push(json!({
            "mode": t.mode.name(),
            "peak": t.peak,
            "time": t.time_cost(),
            "passive_swaps": t.passive_swap_count,
            "msr": m.msr,
            "eor": m.eor,
            "cbr": m.cbr.to_string(),
            "curve": thin(&t.footprint_curve),
        }));
    }
    Ok(Value::Array(rows))
}

/// EWMA of a latency that jumps from 1 to `drift` at step 5, and the steps
/// at which the drift check fires.
pub fn drift_report(alpha: f64, threshold: f64, drift: f64, steps: u32) -> Result<Value, String> {
    let mut estimate = 1.0;
    let mut state = ReplanState {
        last_sum: 1.0,
        current_sum: 1.0,
        threshold,
    };
    let mut points = Vec::new();
    let mut replans = Vec::new();
    for step in 0..steps.min(1000) {
        let observed = if step < 5 { 1.0 } else { drift };
        estimate = ewma_update(estimate, observed, alpha).map_err(|e| e.to_string())?;
        state.current_sum = estimate;
        if should_replan(&state) {
            state.last_sum = estimate;
            replans.push(step);
        }
        points.push(json!({ "step": step, "observed": observed, "estimate": estimate }));
    }
    Ok(json!({ "points": points, "replans": replans }))
}

fn export(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn plan_workload(family: &str, batch: u32, bandwidth: u32) -> Result<String, JsError> {
    export(plan_report(family, batch.into(), bandwidth.into()))
}

#[wasm_bindgen]
pub fn simulate_modes(family: &str, batch: u32, bandwidth: u32, jitter: f64, seed: u32) -> Result<String, JsError> {
    export(mode_report(family, batch.into(), bandwidth.into(), jitter, seed.into()))
}

#[wasm_bindgen]
pub fn ewma_trace(alpha: f64, threshold: f64, drift: f64, steps: u32) -> Result<String, JsError> {
    export(drift_report(alpha, threshold, drift, steps))
}
