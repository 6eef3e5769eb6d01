use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use memsched::latency::fit_predictor;
use memsched::orchestrator::build_plan;
use memsched::scenario::{run_scenario, summary_csv, write_report, Format, Scenario};
use memsched::simulator::Mode;
use memsched::workload::{generate_workload, DeviceModel, Family};
use memsched::{load_graph, JobId};

/// Plan and simulate tensor swapping and recomputation for concurrent
/// training jobs.
#[derive(Parser)]
#[command(name = "memsched", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload graph file.
    Gen {
        /// vgg16, resnet50, inception_v3, inception_v4, densenet,
        /// chain[:depth] or random[:seed]
        family: Family,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        #[arg(long, default_value_t = 0)]
        job: u32,
        /// Seed for the random family.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the device model's latency table here.
        #[arg(long)]
        latencies: Option<PathBuf>,
    },
    /// Fit a latency predictor on device-model samples of the given graphs.
    Fit {
        #[arg(required = true)]
        graphs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Multiplicative noise on each sample, as a fraction.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Latency growth at full device usage.
        #[arg(long, default_value_t = 0.5)]
        slope: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build plans for a scenario and write plans and peak reports.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario in the chosen modes and write traces and a summary.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// vanilla, scheduled or passive; repeat for several. Default: all.
        #[arg(long)]
        mode: Vec<Mode>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Print the summary table of a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn load_scenario(config: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut s = Scenario::load(config)?;
    if let Some(seed) = seed {
        s.config.seed = seed;
    }
    Ok(s)
}

fn gen(family: Family, batch: u64, job: u32, seed: Option<u64>, out: &Path, lat: Option<&Path>) -> Result<()> {
    let family = match (family, seed) {
        (Family::Random { .. }, Some(seed)) => Family::Random { seed },
        (f, _) => f,
    };
    let g = generate_workload(family, batch, JobId(job))?;
    write(out, &g.to_json())?;
    if let Some(path) = lat {
        write(path, &serde_json::to_string_pretty(&DeviceModel::default().latencies(&g))?)?;
    }
    println!("{family}: {} ops, {} tensors -> {}", g.ops().len(), g.tensors().len(), out.display());
    Ok(())
}

fn fit(graphs: &[PathBuf], out: &Path, noise: f64, slope: f64, seed: u64) -> Result<()> {
    let mut loaded = Vec::new();
    for p in graphs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        loaded.push(load_graph(&text).with_context(|| p.display().to_string())?);
    }
    let usages = [0.25, 0.5, 0.75, 1.0];
    let samples = DeviceModel::default().samples(&loaded, &usages, slope, noise, seed);
    let predictor = fit_predictor(&samples)?;
    write(out, &predictor.to_json())?;
    for (kind, m) in &predictor.models {
        println!("{kind:<16} r2 {:.4}", m.r2);
    }
    Ok(())
}

fn plan(config: &Path, out: &Path) -> Result<()> {
    let s = load_scenario(config, None)?;
    let outcome = build_plan(&s.planning_jobs(), &s.planner())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("plans.json"), &serde_json::to_string_pretty(&outcome.plans)?)?;
    write(&out.join("peaks.json"), &serde_json::to_string_pretty(&outcome.reports)?)?;
    for (job, p) in &outcome.plans {
        println!(
            "job {job}: {} swaps, {} recomputes, peak {}",
            p.swap_events.len(),
            p.recompute_events.len(),
            outcome.reports[job].memory_peak
        );
    }
    println!("merged peak {:?} over {} iterations", outcome.mp_history, outcome.iterations);
    if let Some(d) = &outcome.diagnostic {
        println!("{d}");
    }
    Ok(())
}

fn simulate(config: &Path, out: &Path, modes: &[Mode], seed: Option<u64>, format: Format) -> Result<()> {
    let s = load_scenario(config, seed)?;
    let modes = if modes.is_empty() { Mode::ALL.to_vec() } else { modes.to_vec() };
    let report = run_scenario(&s, &modes)?;
    let files = write_report(&report, out, format)?;
    print!("{}", summary_csv(&report.summary));
    eprintln!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
    }
    s
}

fn report(out: &Path) -> Result<()> {
    let csv = out.join("summary.csv");
    let json = out.join("summary.json");
    let rows: Vec<Vec<String>> = if csv.exists() {
        fs::read_to_string(&csv)?
            .lines()
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect()
    } else if json.exists() {
        let v: Vec<serde_json::Map<String, serde_json::Value>> = serde_json::from_str(&fs::read_to_string(&json)?)?;
        let header: Vec<String> = summary_csv(&[]).trim_end().split(',').map(str::to_string).collect();
        let mut rows = vec![header.clone()];
        for r in &v {
            rows.push(
                header
                    .iter()
                    .map(|k| match r.get(k) {
                        Some(serde_json::Value::String(s)) => s.clone(),
                        Some(other) => other.to_string(),
                        None => String::new(),
                    })
                    .collect(),
            );
        }
        rows
    } else {
        bail!("no summary.csv or summary.json in {}", out.display());
    };
    print!("{}", table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            family,
            batch,
            job,
            seed,
            out,
            latencies,
        } => gen(family, batch, job, seed, &out, latencies.as_deref()),
        Command::Fit {
            graphs,
            out,
            noise,
            slope,
            seed,
        } => fit(&graphs, &out, noise, slope, seed),
        Command::Plan { config, out } => plan(&config, &out),
        Command::Simulate {
            config,
            out,
            mode,
            seed,
            format,
        } => simulate(&config, &out, &mode, seed, format),
        Command::Report { out } => report(&out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
