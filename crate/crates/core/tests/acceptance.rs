//! Acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use memsched::latency::{fit_predictor, FeatureVector, Sample};
use memsched::metrics::{compute_metrics, metrics_from};
use memsched::orchestrator::{base_sequence, build_plan, PlanOutcome, PlannerConfig, PlanningJob};
use memsched::peak::analyze_plan;
use memsched::plan::initial_resident;
use memsched::scenario::{run_scenario, write_report, Format, JobEntry, Scenario, ScenarioConfig};
use memsched::simulator::{simulate, Mode, SimConfig, SimJob, TraceKind};
use memsched::workload::{generate_workload, DeviceModel, Family};
use memsched::{ComputeGraph, JobId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_JOBS: u64 = 200;
const ORACLE_LIMIT: Duration = Duration::from_secs(10);
const SCENARIOS: u64 = 100;
const SAFETY_LIMIT: Duration = Duration::from_secs(60);
const SLACK_FACTOR: u64 = 2;
const BUDGET_FRACTION: f64 = 0.7;
const FAMILY_BATCH: u64 = 4;
const FAMILY_LIMIT: Duration = Duration::from_secs(300);
const CBR_TOLERANCE: f64 = 0.001;
const REPLAN_THRESHOLD: f64 = 0.2;
const R2_NOISELESS: f64 = 0.99;
const R2_NOISY: f64 = 0.9;
const NOISE: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn sim_jobs(m: &MultiJob, plans: &BTreeMap<JobId, memsched::SchedulingPlan>) -> Vec<SimJob> {
    m.graphs
        .iter()
        .zip(&m.latencies)
        .zip(&m.launches)
        .map(|((g, l), &t)| SimJob {
            graph: g.clone(),
            plan: plans[&g.job_id()].clone(),
            latencies: l.clone(),
            planned_latencies: None,
            launch_tick: t,
        })
        .collect()
}

fn single(graph: &ComputeGraph, plan: memsched::SchedulingPlan, lat: &memsched::access::LatencyTable) -> Vec<SimJob> {
    vec![SimJob { graph: graph.clone(), plan, latencies: lat.clone(), planned_latencies: None, launch_tick: 0 }]
}

fn peak_oracle() -> Outcome {
    let start = Instant::now();
    let mut matched = 0;
    let mut swaps = 0;
    for seed in 0..ORACLE_JOBS {
        let (g, base, plan) = planned_job(seed);
        swaps += plan.swap_events.len();
        let (report, eff) = analyze_plan(&g, &base, &plan).unwrap();
        let oracle = oracle_peak(&g, &eff, &plan, &initial_resident(&g, &plan));
        if (report.memory_peak, report.peak_time, report.peak_tensors) == oracle {
            matched += 1;
        }
    }
    let took = start.elapsed();
    outcome(
        matched == ORACLE_JOBS && took < ORACLE_LIMIT,
        format!("{matched}/{ORACLE_JOBS} jobs match ({swaps} swap events), {}", secs(took)),
    )
}

struct Planned {
    scenario: MultiJob,
    outcome: PlanOutcome,
    scheduled_peak: u64,
}

fn plan_safety(planned: &mut Vec<Planned>) -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut reads = 0;
    for seed in 0..SCENARIOS {
        let m = multi_job(seed);
        let out = build_plan(&m.planning(), &m.config).unwrap();
        let jobs = sim_jobs(&m, &out.plans);
        let cfg = SimConfig { mode: Mode::Scheduled, transfer: m.config.transfer(), seed, ..SimConfig::default() };
        let trace = simulate(&jobs, &cfg).unwrap();
        match check_trace(&trace) {
            Ok(c) if trace.double_releases == 0 => reads += c.reads,
            Ok(_) => failures.push(format!("seed {seed}: double release")),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
        planned.push(Planned { scenario: m, outcome: out, scheduled_peak: trace.peak });
    }
    let took = start.elapsed();
    let detail = match failures.first() {
        Some(f) => format!("{} unsafe runs, first: {f}", failures.len()),
        None => format!("{SCENARIOS} scenarios, {reads} reads checked, {}", secs(took)),
    };
    outcome(failures.is_empty() && took < SAFETY_LIMIT, detail)
}

fn peak_monotonicity(planned: &[Planned]) -> Outcome {
    let mut rising = 0;
    let mut above = 0;
    for p in planned {
        if p.outcome.mp_history.windows(2).any(|w| w[1] > w[0]) {
            rising += 1;
        }
        let jobs = sim_jobs(&p.scenario, &p.outcome.plans);
        let cfg = SimConfig { mode: Mode::Vanilla, transfer: p.scenario.config.transfer(), ..SimConfig::default() };
        if p.scheduled_peak > simulate(&jobs, &cfg).unwrap().peak {
            above += 1;
        }
    }
    let n = planned.len();
    outcome(
        rising == 0 && above == 0 && n as u64 == SCENARIOS,
        format!("MP nonincreasing in {}/{n}, scheduled <= vanilla in {}/{n}", n - rising, n - above),
    )
}

fn slack_overlap() -> Outcome {
    let g = generate_workload(Family::Vgg16, 2, JobId(0)).unwrap();
    let lat = DeviceModel::default().latencies(&g);
    let planner = PlannerConfig { pcie_bandwidth: 50_000, transfer_setup: 1, ..PlannerConfig::default() };
    let pj = PlanningJob { graph: g.clone(), latencies: lat.clone() };
    let plan = build_plan(&[pj], &planner).unwrap().plans.remove(&JobId(0)).unwrap();
    let transfer = planner.transfer();
    let tight = plan
        .swap_events
        .iter()
        .filter(|e| e.latest_time - e.earliest_time < SLACK_FACTOR * transfer.duration(g.size(e.tensor_id)))
        .count();
    let cfg = |mode| SimConfig { mode, transfer, ..SimConfig::default() };
    let van = simulate(&single(&g, plan.clone(), &lat), &cfg(Mode::Vanilla)).unwrap();
    let sch = simulate(&single(&g, plan.clone(), &lat), &cfg(Mode::Scheduled)).unwrap();
    let m = compute_metrics(&van, &sch).unwrap();
    outcome(
        !plan.swap_events.is_empty() && tight == 0 && m.eor == 0.0 && sch.passive_swap_count == 0,
        format!(
            "{} swap events, {tight} under {SLACK_FACTOR}x slack, EOR {}, passive {}, MSR {:.3}",
            plan.swap_events.len(),
            m.eor,
            sch.passive_swap_count,
            m.msr
        ),
    )
}

fn proactive_beats_passive() -> Outcome {
    let start = Instant::now();
    let mut worse = Vec::new();
    let mut cells = Vec::new();
    for family in Family::NETWORKS {
        let g = generate_workload(family, FAMILY_BATCH, JobId(0)).unwrap();
        let lat = DeviceModel::default().latencies(&g);
        let base = base_sequence(&g, &lat).unwrap();
        let empty = memsched::SchedulingPlan::from_sequence(&base);
        let transfer = PlannerConfig::default().transfer();
        let van = simulate(&single(&g, empty.clone(), &lat), &SimConfig { mode: Mode::Vanilla, transfer, ..SimConfig::default() }).unwrap();
        let budget = (van.peak as f64 * BUDGET_FRACTION) as u64;
        let planner = PlannerConfig { memory_budget: budget, ..PlannerConfig::default() };
        let pj = PlanningJob { graph: g.clone(), latencies: lat.clone() };
        let plan = build_plan(&[pj], &planner).unwrap().plans.remove(&JobId(0)).unwrap();
        let cfg = |mode| SimConfig { mode, transfer, memory_budget: budget, ..SimConfig::default() };
        let sch = simulate(&single(&g, plan, &lat), &cfg(Mode::Scheduled)).unwrap();
        let pas = simulate(&single(&g, empty, &lat), &cfg(Mode::Passive)).unwrap();
        let (etc_s, etc_p) = (sch.time_cost(), pas.time_cost());
        if etc_s > etc_p {
            worse.push(family.to_string());
        }
        cells.push(format!("{family} {etc_s:.0}/{etc_p:.0}"));
    }
    let took = start.elapsed();
    outcome(
        worse.is_empty() && took < FAMILY_LIMIT,
        format!("scheduled/passive ETC: {}; {}", cells.join(", "), secs(took)),
    )
}

fn cbr_consistency() -> Outcome {
    // (msr, eor, reported cbr)
    let rows = [(0.3483, 0.2295, 1.518), (0.7468, 0.2006, 3.722)];
    let mut pass = true;
    let mut cells = Vec::new();
    for (msr, eor, want) in rows {
        let m = metrics_from(1.0, 1.0 - msr, 1.0, 1.0 + eor);
        let got = m.cbr.value();
        pass &= (got - want).abs() <= CBR_TOLERANCE;
        cells.push(format!("{got:.4} vs {want}"));
    }
    outcome(pass, cells.join(", "))
}

/// Replans seen over a scheduled run whose device runs `factor` times
/// slower than planned, plus the final plan versions.
fn replans_under_drift(factor: f64) -> (u32, BTreeSet<u64>) {
    let graphs: Vec<ComputeGraph> = [Family::Chain { depth: 4 }, Family::Vgg16]
        .into_iter()
        .enumerate()
        .map(|(i, f)| generate_workload(f, 2, JobId(i as u32)).unwrap())
        .collect();
    // multiples of 20 keep 1.05x and 1.25x integral
    let tables: Vec<_> = graphs
        .iter()
        .map(|g| Some(DeviceModel::default().latencies(g).into_iter().map(|(o, t)| (o, t * 20)).collect()))
        .collect();
    let jobs = graphs
        .iter()
        .enumerate()
        .map(|(i, g)| JobEntry {
            graph_file: format!("job{}.json", g.job_id()).into(),
            max_swap_ratio: 1.0,
            launch_tick: 100 * i as u64,
            latency_file: None,
            latency_scale: factor,
        })
        .collect();
    let config = ScenarioConfig {
        pcie_bandwidth: 12_000,
        transfer_setup: 10,
        memory_budget: u64::MAX,
        ewma_alpha: 0.3,
        replan_threshold: REPLAN_THRESHOLD,
        stall_epsilon: 0.0005,
        stall_min_iters: 100,
        jobs,
        iterations: 12,
        seed: 0,
        gpu_slowdown_curve: BTreeMap::new(),
        latency_jitter: 0.0,
        predictor_file: None,
        gpu_capacity: 4,
        ticks_per_iteration_limit: None,
    };
    let s = Scenario::assemble(config, graphs, tables, None).unwrap();
    let r = run_scenario(&s, &[Mode::Scheduled]).unwrap();
    (r.replans, r.final_plans.values().map(|p| p.version).collect())
}

fn replan_trigger() -> Outcome {
    let (high, high_versions) = replans_under_drift(1.25);
    let (low, low_versions) = replans_under_drift(1.05);
    outcome(
        high == 1 && high_versions == BTreeSet::from([1]) && low == 0 && low_versions == BTreeSet::from([0]),
        format!("25% drift: {high} replan(s), versions {high_versions:?}; 5% drift: {low} replan(s)"),
    )
}

fn cross_iteration() -> Outcome {
    let g = generate_workload(Family::Vgg16, FAMILY_BATCH, JobId(0)).unwrap();
    let lat = DeviceModel::default().latencies(&g);
    let planner = PlannerConfig::default();
    let pj = PlanningJob { graph: g.clone(), latencies: lat.clone() };
    let plan = build_plan(&[pj], &planner).unwrap().plans.remove(&JobId(0)).unwrap();
    let wrapped: BTreeSet<_> = plan
        .swap_events
        .iter()
        .filter(|e| e.wraps_iteration && g.updated_by(e.tensor_id).is_some())
        .map(|e| e.tensor_id)
        .collect();
    let cfg = SimConfig { mode: Mode::Scheduled, transfer: planner.transfer(), ..SimConfig::default() };
    let trace = simulate(&single(&g, plan, &lat), &cfg).unwrap();
    let first_iteration_end = trace.iteration_times[&JobId(0)][0];
    let waited: BTreeSet<_> = trace
        .events
        .iter()
        .filter(|e| e.kind == TraceKind::PassiveRequest && e.tick >= first_iteration_end)
        .map(|e| e.tensor_id)
        .filter(|t| wrapped.contains(t))
        .collect();
    let read_later = trace
        .events
        .iter()
        .filter(|e| e.kind == TraceKind::Read && e.tick > first_iteration_end && wrapped.contains(&e.tensor_id))
        .count();
    outcome(
        !wrapped.is_empty() && waited.is_empty() && read_later > 0,
        format!(
            "{} parameters carry wrapped pairs, {} waited passively in later iterations, {read_later} later reads",
            wrapped.len(),
            waited.len()
        ),
    )
}

fn fit_quality() -> Outcome {
    let samples = |noise: f64, seed: u64| -> Vec<Sample> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..200)
            .map(|_| {
                let f = FeatureVector {
                    input_dims: (0..4).map(|_| r.gen_range(1.0..512.0)).collect(),
                    attributes: vec![r.gen_range(1.0..4.0f64).round()],
                    gpu_usage: r.gen_range(0.0..1.0),
                };
                let truth = 2.0 * f.input_dims[0] + 0.5 * f.input_dims[2] + 3.0 * f.attributes[0] + 5.0;
                let jitter = if noise > 0.0 { 1.0 + r.gen_range(-noise..=noise) } else { 1.0 };
                Sample { op_kind: "conv2d".into(), features: f, observed: truth * jitter }
            })
            .collect()
    };
    let r2 = |noise, seed| fit_predictor(&samples(noise, seed)).unwrap().r2("conv2d").unwrap();
    let clean = r2(0.0, 1);
    let noisy = r2(NOISE, 2);
    outcome(
        clean >= R2_NOISELESS && noisy >= R2_NOISY,
        format!("R2 {clean:.4} noiseless, {noisy:.4} with {:.0}% noise", NOISE * 100.0),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut jobs = Vec::new();
    for (i, family) in [Family::Chain { depth: 5 }, Family::Resnet50, Family::Random { seed: 4 }].into_iter().enumerate() {
        let g = generate_workload(family, 2, JobId(i as u32)).unwrap();
        let lat = DeviceModel::default().latencies(&g);
        fs::write(dir.path().join(format!("g{i}.json")), g.to_json()).unwrap();
        fs::write(dir.path().join(format!("l{i}.json")), serde_json::to_string(&lat).unwrap()).unwrap();
        jobs.push(JobEntry {
            graph_file: format!("g{i}.json").into(),
            max_swap_ratio: 1.0,
            launch_tick: 30 * i as u64,
            latency_file: Some(format!("l{i}.json").into()),
            latency_scale: 1.0 + 0.2 * i as f64,
        });
    }
    let config = ScenarioConfig {
        pcie_bandwidth: 6_000,
        transfer_setup: 3,
        memory_budget: 2_000_000,
        ewma_alpha: 0.3,
        replan_threshold: 0.1,
        stall_epsilon: 0.0005,
        stall_min_iters: 100,
        jobs,
        iterations: 4,
        seed: 42,
        gpu_slowdown_curve: BTreeMap::from([(2, 1.2), (3, 1.5)]),
        latency_jitter: 0.15,
        predictor_file: None,
        gpu_capacity: 4,
        ticks_per_iteration_limit: None,
    };
    let path = dir.path().join("scenario.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let s = Scenario::load(&path).unwrap();
        let r = run_scenario(&s, &Mode::ALL).unwrap();
        let files = write_report(&r, &dir.path().join(format!("out{k}")), Format::Csv).unwrap();
        let bytes: Vec<(String, Vec<u8>)> = files
            .iter()
            .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(f).unwrap()))
            .collect();
        runs.push(bytes);
    }
    let same = runs[0] == runs[1];
    let total: usize = runs[0].iter().map(|(_, b)| b.len()).sum();
    outcome(same, format!("{} files, {total} bytes, identical: {same}", runs[0].len()))
}

fn main() -> ExitCode {
    let mut planned = Vec::new();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("peak analysis matches the replay oracle", Box::new(peak_oracle)),
        ("scheduled runs are safe", Box::new(|| plan_safety(&mut planned))),
    ];
    let mut results = Vec::new();
    for (name, run) in criteria {
        results.push((name, run()));
    }
    let rest: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("peaks are monotone", Box::new(move || peak_monotonicity(&planned))),
        ("slack swaps cost nothing", Box::new(slack_overlap)),
        ("proactive beats passive", Box::new(proactive_beats_passive)),
        ("cost-benefit formula", Box::new(cbr_consistency)),
        ("replan trigger", Box::new(replan_trigger)),
        ("cross-iteration swaps", Box::new(cross_iteration)),
        ("latency model fit", Box::new(fit_quality)),
        ("byte-identical reruns", Box::new(determinism)),
    ];
    for (name, run) in rest {
        results.push((name, run()));
    }
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
