//! Scenario files: load jobs, plan them, simulate the requested modes and
//! write reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::LatencyTable;
use crate::graph::{load_graph, ComputeGraph, GraphError};
use crate::ids::{JobId, OpId};
use crate::latency::{LatencyError, Predictor};
use crate::metrics::{compute_metrics, Cbr, MetricsError, MetricsReport};
use crate::orchestrator::{Lifecycle, Observation, OrchestratorError, PlanOutcome, PlanUpdate, PlannerConfig, PlanningJob};
use crate::plan::SchedulingPlan;
use crate::simulator::{simulate_with, Controller, Mode, NoReplan, SimConfig, SimError, SimJob, SimulationTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobEntry {
    pub graph_file: PathBuf,
    #[serde(default = "one")]
    pub max_swap_ratio: f64,
    #[serde(default)]
    pub launch_tick: u64,
    /// Measured latency table (op id to ticks) the device delivers.
    #[serde(default)]
    pub latency_file: Option<PathBuf>,
    /// Multiplies the delivered latencies, to model a device slower or
    /// faster than planned.
    #[serde(default = "one")]
    pub latency_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn default_iterations() -> u32 {
    3
}

fn default_capacity() -> u32 {
    4
}

fn unlimited() -> u64 {
    u64::MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub pcie_bandwidth: u64,
    pub transfer_setup: u64,
    #[serde(default = "unlimited")]
    pub memory_budget: u64,
    pub ewma_alpha: f64,
    pub replan_threshold: f64,
    pub stall_epsilon: f64,
    pub stall_min_iters: usize,
    pub jobs: Vec<JobEntry>,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gpu_slowdown_curve: BTreeMap<u32, f64>,
    #[serde(default)]
    pub latency_jitter: f64,
    #[serde(default)]
    pub predictor_file: Option<PathBuf>,
    /// Jobs the device runs at full speed; predictor usage is
    /// concurrent jobs over capacity.
    #[serde(default = "default_capacity")]
    pub gpu_capacity: u32,
    #[serde(default)]
    pub ticks_per_iteration_limit: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}")]
    Graph { path: PathBuf, source: GraphError },
    #[error("job {0} appears twice in the scenario")]
    DuplicateJob(JobId),
    #[error("job {job}: no latency source; fit a predictor or supply a latency_file")]
    NoLatencies { job: JobId },
    #[error("job {job}: latency table lacks op {op}")]
    IncompleteLatencies { job: JobId, op: OpId },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error(transparent)]
    Plan(#[from] OrchestratorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), ScenarioError> {
    fs::write(path, contents).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ScenarioError> {
    serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

impl ScenarioConfig {
    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            pcie_bandwidth: self.pcie_bandwidth,
            transfer_setup: self.transfer_setup,
            memory_budget: self.memory_budget,
            max_swap_ratios: BTreeMap::new(),
            ewma_alpha: self.ewma_alpha,
            replan_threshold: self.replan_threshold,
            stall_epsilon: self.stall_epsilon,
            stall_min_iters: self.stall_min_iters,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.planner().validate()?;
        if self.iterations == 0 {
            return Err(ScenarioError::Invalid("iterations must be at least 1".into()));
        }
        if self.gpu_capacity == 0 {
            return Err(ScenarioError::Invalid("gpu_capacity must be positive".into()));
        }
        if self.gpu_slowdown_curve.values().any(|&m| !(m >= 1.0)) {
            return Err(ScenarioError::Invalid("slowdown multipliers must be at least 1".into()));
        }
        if self.jobs.iter().any(|j| !(j.latency_scale > 0.0)) {
            return Err(ScenarioError::Invalid("latency_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let config: ScenarioConfig = parse(path, &read(path)?)?;
        config.validate()?;
        Ok(config)
    }
}

/// A scenario with all files loaded.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub graphs: Vec<ComputeGraph>,
    /// Cold-start estimates the planner starts from.
    pub planning: Vec<LatencyTable>,
    /// Latencies the simulated device delivers.
    pub delivered: Vec<LatencyTable>,
}

fn scale(table: &LatencyTable, factor: f64) -> LatencyTable {
    table
        .iter()
        .map(|(&op, &t)| (op, (t as f64 * factor).round() as u64))
        .collect()
}

fn check_table(graph: &ComputeGraph, table: &LatencyTable) -> Result<(), ScenarioError> {
    match graph.ops().iter().find(|o| !table.contains_key(&o.id)) {
        Some(op) => Err(ScenarioError::IncompleteLatencies {
            job: graph.job_id(),
            op: op.id,
        }),
        None => Ok(()),
    }
}

impl Scenario {
    /// Loads the config at `path`; relative file names resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let config = ScenarioConfig::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let predictor = match &config.predictor_file {
            Some(p) => {
                let p = resolve(p);
                Some(Predictor::from_json(&read(&p)?)?)
            }
            None => None,
        };
        let mut graphs = Vec::new();
        let mut measured = Vec::new();
        for entry in &config.jobs {
            let gp = resolve(&entry.graph_file);
            let graph = load_graph(&read(&gp)?).map_err(|source| ScenarioError::Graph { path: gp, source })?;
            let table = match &entry.latency_file {
                Some(p) => {
                    let p = resolve(p);
                    let t: LatencyTable = parse(&p, &read(&p)?)?;
                    check_table(&graph, &t)?;
                    Some(t)
                }
                None => None,
            };
            graphs.push(graph);
            measured.push(table);
        }
        Scenario::assemble(config, graphs, measured, predictor.as_ref())
    }

    /// Builds a scenario from in-memory parts. Each job needs a measured
    /// table or the predictor; with both, the predictor supplies the planning
    /// estimate and the table the delivered latency.
    pub fn assemble(
        config: ScenarioConfig,
        graphs: Vec<ComputeGraph>,
        measured: Vec<Option<LatencyTable>>,
        predictor: Option<&Predictor>,
    ) -> Result<Self, ScenarioError> {
        config.validate()?;
        if graphs.len() != config.jobs.len() || measured.len() != graphs.len() {
            return Err(ScenarioError::Invalid("one graph and table slot per job entry".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &graphs {
            if !seen.insert(g.job_id()) {
                return Err(ScenarioError::DuplicateJob(g.job_id()));
            }
        }
        let usage = graphs.len() as f64 / config.gpu_capacity as f64;
        let mut planning = Vec::new();
        let mut delivered = Vec::new();
        for ((g, m), entry) in graphs.iter().zip(measured).zip(&config.jobs) {
            let predicted = predictor.map(|p| p.latencies(g, usage)).transpose()?;
            let (plan_t, truth) = match (predicted, m) {
                (Some(p), Some(m)) => (p, m),
                (Some(p), None) => (p.clone(), p),
                (None, Some(m)) => (m.clone(), m),
                (None, None) => return Err(ScenarioError::NoLatencies { job: g.job_id() }),
            };
            planning.push(plan_t);
            delivered.push(scale(&truth, entry.latency_scale));
        }
        Ok(Scenario {
            config,
            graphs,
            planning,
            delivered,
        })
    }

    /// Planner settings, including per-job swap ratio limits.
    pub fn planner(&self) -> PlannerConfig {
        let mut p = self.config.planner();
        for (g, e) in self.graphs.iter().zip(&self.config.jobs) {
            if e.max_swap_ratio < 1.0 {
                p.max_swap_ratios.insert(g.job_id(), e.max_swap_ratio);
            }
        }
        p
    }

    pub fn planning_jobs(&self) -> Vec<PlanningJob> {
        self.graphs
            .iter()
            .zip(&self.planning)
            .map(|(g, l)| PlanningJob {
                graph: g.clone(),
                latencies: l.clone(),
            })
            .collect()
    }

    pub fn sim_config(&self, mode: Mode) -> SimConfig {
        let c = &self.config;
        SimConfig {
            ticks_per_iteration_limit: c.ticks_per_iteration_limit.unwrap_or(u64::MAX),
            iterations: c.iterations,
            seed: c.seed,
            gpu_slowdown_curve: c.gpu_slowdown_curve.clone(),
            mode,
            transfer: c.planner().transfer(),
            memory_budget: c.memory_budget,
            latency_jitter: c.latency_jitter,
        }
    }

    fn sim_jobs(&self, plans: &BTreeMap<JobId, SchedulingPlan>) -> Vec<SimJob> {
        self.graphs
            .iter()
            .zip(&self.delivered)
            .zip(&self.planning)
            .zip(&self.config.jobs)
            .map(|(((g, lat), planned), e)| SimJob {
                graph: g.clone(),
                plan: plans[&g.job_id()].clone(),
                latencies: lat.clone(),
                planned_latencies: Some(planned.clone()),
                launch_tick: e.launch_tick,
            })
            .collect()
    }
}

/// Feeds per-iteration reports to the replanning lifecycle.
pub struct LifecycleController {
    pub lifecycle: Lifecycle,
    pub error: Option<OrchestratorError>,
}

impl Controller for LifecycleController {
    fn on_iteration(&mut self, _job: JobId, _iteration: u32, observed: &[Observation]) -> Vec<PlanUpdate> {
        if self.error.is_some() {
            return Vec::new();
        }
        match self.lifecycle.report(observed) {
            Ok(plans) => plans,
            Err(e) => {
                self.error = Some(e);
                Vec::new()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub mode: Mode,
    pub peak_bytes: u64,
    pub time_cost: f64,
    pub passive_swaps: u64,
    pub blocked_ticks: u64,
    pub replans: u32,
    pub msr: f64,
    pub eor: f64,
    pub cbr: Cbr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub outcome: PlanOutcome,
    /// Plans in force when the scheduled run finished.
    pub final_plans: BTreeMap<JobId, SchedulingPlan>,
    pub traces: BTreeMap<Mode, SimulationTrace>,
    pub metrics: BTreeMap<Mode, MetricsReport>,
    pub summary: Vec<SummaryRow>,
    pub replans: u32,
}

/// Plans the scenario and simulates `modes`. Vanilla always runs since it is
/// the baseline for the ratios.
pub fn run_scenario(scenario: &Scenario, modes: &[Mode]) -> Result<ScenarioReport, ScenarioError> {
    let (lifecycle, outcome) = Lifecycle::start(&scenario.planning_jobs(), &scenario.planner())?;
    let mut traces = BTreeMap::new();
    let mut final_plans = outcome.plans.clone();
    let mut replans = 0;
    let mut wanted: Vec<Mode> = modes.to_vec();
    wanted.push(Mode::Vanilla);
    wanted.sort();
    wanted.dedup();
    for mode in wanted {
        let sim_jobs = scenario.sim_jobs(&outcome.plans);
        let config = scenario.sim_config(mode);
        let trace = if mode == Mode::Scheduled {
            let mut ctl = LifecycleController {
                lifecycle: lifecycle.clone(),
                error: None,
            };
            let trace = simulate_with(&sim_jobs, &config, &mut ctl)?;
            if let Some(e) = ctl.error {
                return Err(e.into());
            }
            replans = ctl.lifecycle.replans;
            final_plans = ctl.lifecycle.plans;
            trace
        } else {
            simulate_with(&sim_jobs, &config, &mut NoReplan)?
        };
        traces.insert(mode, trace);
    }
    let vanilla = &traces[&Mode::Vanilla];
    let mut metrics = BTreeMap::new();
    let mut summary = Vec::new();
    for (&mode, trace) in &traces {
        let m = compute_metrics(vanilla, trace)?;
        metrics.insert(mode, m);
        summary.push(SummaryRow {
            mode,
            peak_bytes: trace.peak,
            time_cost: trace.time_cost(),
            passive_swaps: trace.passive_swap_count,
            blocked_ticks: trace.blocked_ticks,
            replans: if mode == Mode::Scheduled { replans } else { 0 },
            msr: m.msr,
            eor: m.eor,
            cbr: m.cbr,
        });
    }
    Ok(ScenarioReport {
        outcome,
        final_plans,
        traces,
        metrics,
        summary,
        replans,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format {s:?}")),
        }
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("mode,peak_bytes,time_cost,passive_swaps,blocked_ticks,replans,msr,eor,cbr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.3},{},{},{},{:.6},{:.6},{}\n",
            r.mode.name(),
            r.peak_bytes,
            r.time_cost,
            r.passive_swaps,
            r.blocked_ticks,
            r.replans,
            r.msr,
            r.eor,
            r.cbr
        ));
    }
    s
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Writes plans, peak reports, traces, metrics and the summary into `dir`.
/// Returns the written paths.
pub fn write_report(report: &ScenarioReport, dir: &Path, format: Format) -> Result<Vec<PathBuf>, ScenarioError> {
    fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<(String, String)> = vec![
        ("plans.json".into(), pretty(&report.final_plans)),
        ("peaks.json".into(), pretty(&report.outcome.reports)),
        ("metrics.json".into(), pretty(&report.metrics)),
    ];
    for (mode, trace) in &report.traces {
        match format {
            Format::Csv => files.push((format!("trace_{}.csv", mode.name()), trace.to_csv())),
            Format::Json => files.push((format!("trace_{}.json", mode.name()), pretty(trace))),
        }
    }
    match format {
        Format::Csv => files.push(("summary.csv".into(), summary_csv(&report.summary))),
        Format::Json => files.push(("summary.json".into(), pretty(&report.summary))),
    }
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        write(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}
