//! Command-line front end: `validate`, `run`, `sweep` and `compare`.
//!
//! Exit codes: 0 success, 1 invalid input, 2 failure while running or
//! writing results.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cola_sim::analysis::{compare_runs, export_cdf, run_report, Comparison, LatencyStats, RunReport, CDF_HEADER};
use cola_sim::config::{RunConfig, RunSetup};
use cola_sim::engine::{check_setup, RunTrace};
use cola_sim::mitigation::MitigationConfig;
use cola_sim::sweep::{sweep, sweep_csv, SweepAxis};
use cola_sim::{Error, SimTime};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const TRACE_FILE: &str = "trace.ndjson";
pub const REPORT_FILE: &str = "report.json";
pub const CDF_FILE: &str = "cdf.csv";
pub const BASELINE_TRACE_FILE: &str = "baseline.trace.ndjson";
pub const BASELINE_REPORT_FILE: &str = "baseline.report.json";
pub const COMPARE_FILE: &str = "compare.json";
pub const SWEEP_FILE: &str = "sweep.csv";
const DEFAULT_OUT: &str = "cola-out";

#[derive(Debug, Parser)]
#[command(name = "cola-sim", version, about = "Reaction-time and tail-latency simulator for driving pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate a scenario, a pipeline and optionally a run config.
    Validate(RunArgs),
    /// Run one simulation and write trace, report and CDF.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Also run with every mitigation off on the same seed and write a comparison.
        #[arg(long)]
        paired: bool,
    },
    /// One run per axis value; writes an aggregated CSV.
    Sweep {
        #[command(flatten)]
        args: RunArgs,
        /// deadline_cap (microseconds), density or seed.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Compare two traces of the same scenario and seed.
    Compare {
        baseline: PathBuf,
        treatment: PathBuf,
        /// Write the comparison here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags mirror the run config keys and override values from `--config`.
#[derive(Debug, Args)]
struct RunArgs {
    /// Run config (JSON); its paths resolve relative to the file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    pipeline: Option<PathBuf>,
    /// Required when the pipeline has latency noise or traffic is added.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: cola-out].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    fastpath: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    proactive: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    stealing: Option<bool>,
    /// Upper bound on object deadlines, microseconds.
    #[arg(long)]
    deadline_cap_us: Option<u64>,
    /// Recorded in the trace header and report.
    #[arg(long)]
    label: Option<String>,
}

/// An error plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

fn invalid(error: Error) -> Failure {
    Failure {
        code: EXIT_INVALID,
        error,
    }
}

fn runtime(error: Error) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        error,
    }
}

type CliResult<T> = Result<T, Failure>;

impl RunArgs {
    fn config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(invalid)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.scenario {
            cfg.scenario = p.clone();
        }
        if let Some(p) = &self.pipeline {
            cfg.pipeline = p.clone();
        }
        for (name, path) in [("--scenario", &cfg.scenario), ("--pipeline", &cfg.pipeline)] {
            if path.as_os_str().is_empty() {
                return Err(invalid(Error::Usage(format!("{name} is required (or --config)"))));
            }
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if let Some(l) = &self.label {
            cfg.label = l.clone();
        }
        let m = &mut cfg.engine.mitigation;
        if let Some(v) = self.fastpath {
            m.fastpath = v;
        }
        if let Some(v) = self.proactive {
            m.proactive = v;
        }
        if let Some(v) = self.stealing {
            m.stealing = v;
        }
        if let Some(cap) = self.deadline_cap_us {
            m.deadline_cap_us = SimTime::from_micros(cap);
        }
        Ok(cfg)
    }

    fn setup(&self) -> CliResult<(RunSetup, PathBuf)> {
        let cfg = self.config()?;
        let setup = cfg.resolve().map_err(invalid)?;
        check_setup(&setup.scenario(), &setup.pipeline, &setup.groups, &setup.engine).map_err(invalid)?;
        let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok((setup, out))
    }
}

fn ms(t: SimTime) -> String {
    format!("{:.2} ms", t.as_millis_f64())
}

/// `mean / p99 / worst / violations / collisions` for one run.
pub fn summary_line(report: &RunReport) -> String {
    let lat = |f: fn(&LatencyStats) -> SimTime| report.frames.as_ref().map_or("n/a".to_string(), |s| ms(f(s)));
    format!(
        "{}mean {} / p99 {} / worst {} / violations {} / collisions {}",
        if report.label.is_empty() { String::new() } else { format!("[{}] ", report.label) },
        lat(|s| s.mean),
        lat(|s| s.p99),
        lat(|s| s.max),
        report.safety.violations,
        report.safety.collisions
    )
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| runtime(Error::io(path, e)))
}

fn write_outputs(trace: &RunTrace, dir: &Path, trace_name: &str, report_name: &str) -> CliResult<RunReport> {
    trace.save(dir.join(trace_name)).map_err(runtime)?;
    let report = run_report(trace);
    report.save(dir.join(report_name)).map_err(runtime)?;
    Ok(report)
}

fn write_cdf_file(trace: &RunTrace, path: &Path) -> CliResult<()> {
    let samples = trace.frame_latencies();
    if samples.is_empty() {
        return write_file(path, &format!("{CDF_HEADER}\n"));
    }
    export_cdf(&samples, path).map_err(runtime)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))
}

fn cmd_validate(args: &RunArgs, err: &mut dyn Write) -> CliResult<()> {
    let (setup, _) = args.setup()?;
    let _ = writeln!(
        err,
        "ok: scenario `{}` ({} agents, {} hazards), pipeline with {} nodes in {} groups",
        setup.base.name,
        setup.base.agents.len(),
        setup.base.hazards.len(),
        setup.pipeline.nodes().len(),
        setup.groups.len()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs, paired: bool, out: &mut dyn Write) -> CliResult<()> {
    let (setup, dir) = args.setup()?;
    let trace = setup.run().map_err(runtime)?;
    create_dir(&dir)?;
    let report = write_outputs(&trace, &dir, TRACE_FILE, REPORT_FILE)?;
    write_cdf_file(&trace, &dir.join(CDF_FILE))?;
    let _ = writeln!(out, "{}", summary_line(&report));
    if paired {
        let mut base = setup.clone();
        base.engine.mitigation = MitigationConfig {
            fastpath: false,
            proactive: false,
            stealing: false,
            ..base.engine.mitigation
        };
        base.label = "baseline".into();
        let baseline = base.run().map_err(runtime)?;
        let base_report = write_outputs(&baseline, &dir, BASELINE_TRACE_FILE, BASELINE_REPORT_FILE)?;
        let cmp = compare_runs(&baseline, &trace).map_err(runtime)?;
        write_file(&dir.join(COMPARE_FILE), &cmp.to_json())?;
        let _ = writeln!(out, "{}", summary_line(&base_report));
        let _ = writeln!(out, "{}", compare_line(&cmp));
    }
    Ok(())
}

fn compare_line(c: &Comparison) -> String {
    let d = |v: i64| format!("{:+.2} ms", v as f64 / 1000.0);
    format!(
        "delta over {} frames: mean {} / p99 {} / worst {} / violations {:+} / collisions {:+}",
        c.frames_compared,
        d(c.mean_delta_us),
        d(c.p99_delta_us),
        d(c.worst_delta_us),
        c.violations_delta,
        c.collisions_delta
    )
}

fn cmd_sweep(args: &RunArgs, axis: &str, values: &[f64], out: &mut dyn Write) -> CliResult<()> {
    let axis: SweepAxis = axis.parse().map_err(invalid)?;
    if values.len() < 2 {
        return Err(invalid(Error::Usage(">= 2 values required".into())));
    }
    let (setup, dir) = args.setup()?;
    for &v in values {
        cola_sim::sweep::apply_axis(&setup, axis, v).map_err(invalid)?;
    }
    let rows = sweep(&setup, axis, values).map_err(runtime)?;
    let csv = sweep_csv(&rows);
    create_dir(&dir)?;
    write_file(&dir.join(SWEEP_FILE), &csv)?;
    let _ = write!(out, "{csv}");
    Ok(())
}

fn cmd_compare(baseline: &Path, treatment: &Path, dest: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let b = RunTrace::load(baseline).map_err(invalid)?;
    let t = RunTrace::load(treatment).map_err(invalid)?;
    let cmp = compare_runs(&b, &t).map_err(invalid)?;
    match dest {
        Some(p) => {
            write_file(p, &cmp.to_json())?;
            let _ = writeln!(out, "{}", compare_line(&cmp));
        }
        None => {
            let _ = write!(out, "{}", cmp.to_json());
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Validate(a) => cmd_validate(a, err),
        Command::Run { args, paired } => cmd_run(args, *paired, out),
        Command::Sweep { args, axis, values } => cmd_sweep(args, axis, values, out),
        Command::Compare {
            baseline,
            treatment,
            out: dest,
        } => cmd_compare(baseline, treatment, dest.as_deref(), out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.error);
            f.code
        }
    }
}
