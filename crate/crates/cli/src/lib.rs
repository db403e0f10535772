//! Command-line front end for the chord-parallel fitting pipeline.
//!
//! `chordfit gen` writes a synthetic discharge, `split` cuts it into
//! per-chord inputs, `fit` fits one chord, `run` fits a whole work directory
//! serially or in parallel, `certest` compares runs against stored
//! references, `bench` times runs, `simulate` replays durations through the
//! scheduler model and `script` emits a job-array batch script.

pub mod config;
pub mod gen;

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use chordfit_core::bench::{
    benchmark, component_breakdown, per_chord_table, scaling_bounds, scaling_from_totals, speedup,
    trials_gnuplot,
};
use chordfit_core::certest::{compare, generate_reference, ToleranceSpec};
use chordfit_core::chordio::{parse_discharge, split_chords};
use chordfit_core::dispatch::{
    discover_tasks, effective_concurrency, emit_batch_script_with, run_parallel, run_serial,
    simulate_with, ByteSize, ChordTask, ClusterConfig, Dilated, ExecMode, FitRunner, InputNaming,
    NoOp, Policy, RunReport, SubprocessRunner, TaskRunner,
};
use chordfit_core::lmfit::FitOptions;
use chordfit_core::pipeline::process_chord_text;

use config::{Config, WORKDIR_ENV};
use gen::GenOptions;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DISCHARGE_FILE: &str = "discharge.in";
pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const CERTEST_REPORT_FILE: &str = "certest_report.json";
pub const BENCH_CSV_FILE: &str = "bench.csv";
pub const BENCH_DAT_FILE: &str = "bench.dat";
pub const BENCH_JSON_FILE: &str = "bench.json";
pub const BATCH_SCRIPT_FILE: &str = "batch.sh";

/// A usage problem found after argument parsing (bad config file, missing
/// durations source, ...). Maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "chordfit", version, about = "Chord-parallel spectral fitting pipeline")]
pub struct Cli {
    /// key = value configuration file supplying defaults
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic discharge file
    Gen(GenArgs),
    /// Split a discharge file into one input file per chord
    Split(SplitArgs),
    /// Fit every timeslice of one chord
    Fit(FitArgs),
    /// Fit every chord in a work directory
    Run(RunArgs),
    /// Store or check reference fit outputs
    Certest {
        #[command(subcommand)]
        action: CertestAction,
    },
    /// Time runs or replay recorded timings
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Replay task durations through the scheduler model
    Simulate(SimulateArgs),
    /// Emit a job-array batch script
    Script(ScriptArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ResourceArgs {
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Cores per node [default: available parallelism]
    #[arg(long)]
    pub cores: Option<usize>,
    /// Memory per core, e.g. 1G [default: 1G]
    #[arg(long)]
    pub mem_per_core: Option<ByteSize>,
    /// Memory each task requests [default: 1G]
    #[arg(long)]
    pub mem_per_task: Option<ByteSize>,
    /// Seconds between completion polls in subprocess mode [default: 2]
    #[arg(long)]
    pub poll_interval: Option<f64>,
}

impl ResourceArgs {
    /// Flags win over the config file, which wins over built-in defaults.
    pub fn resolve(&self, cfg: &Config, default_cores: usize) -> Result<ClusterConfig> {
        let nodes = pick(self.nodes, cfg.get("nodes")?, 1);
        let cores = pick(self.cores, cfg.get("cores")?, default_cores);
        let mem_core = pick(self.mem_per_core, cfg.get("mem_per_core")?, ByteSize::gib(1));
        let mem_task = pick(self.mem_per_task, cfg.get("mem_per_task")?, ByteSize::gib(1));
        let poll = pick(self.poll_interval, cfg.get("poll_interval")?, 2.0);
        Ok(ClusterConfig::new(nodes, cores)
            .with_memory(mem_core, mem_task)
            .with_poll_interval(poll))
    }
}

fn pick<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Clone, Args)]
pub struct DilateArgs {
    /// Sleep a seeded random MIN,MAX milliseconds per task
    #[arg(long, value_name = "MIN,MAX", value_parser = parse_range_ms)]
    pub dilate: Option<(u64, u64)>,
    #[arg(long, default_value_t = 1)]
    pub dilate_seed: u64,
    /// What each task does besides sleeping
    #[arg(long, value_enum, default_value_t = Payload::Fit)]
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Payload {
    Fit,
    None,
}

fn parse_range_ms(s: &str) -> std::result::Result<(u64, u64), String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a > b {
        return Err(format!("MIN {a} exceeds MAX {b}"));
    }
    Ok((a, b))
}

impl DilateArgs {
    fn apply(&self, tasks: &mut [ChordTask]) {
        if let Some((lo, hi)) = self.dilate {
            let d = gen::dilation_durations(tasks.len(), lo, hi, self.dilate_seed);
            for (t, d) in tasks.iter_mut().zip(d) {
                t.sim_duration = Some(d);
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 64)]
    pub chords: usize,
    #[arg(long, default_value_t = 5)]
    pub timeslices: usize,
    /// Multiply the timeslice count (32 gives 10,240 fits for 64 chords)
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 163100)]
    pub shot: u64,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Chord input file [default: stdin]
    #[arg(long = "in", value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Fit output file [default: stdout]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunMode {
    Serial,
    Parallel,
    Subprocess,
    Simulate,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Directory holding chord_<k>.in files
    #[arg(long)]
    pub work: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RunMode::Parallel)]
    pub mode: RunMode,
    #[command(flatten)]
    pub resources: ResourceArgs,
    #[command(flatten)]
    pub dilate: DilateArgs,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum CertestAction {
    /// Copy a run's fit outputs into a reference directory
    Reference {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long = "ref", value_name = "DIR")]
        reference: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Compare a run against a reference directory
    Compare {
        #[arg(long = "ref", value_name = "DIR")]
        reference: PathBuf,
        #[arg(long, value_name = "DIR")]
        test: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        rel: f64,
        #[arg(long, default_value_t = 1e-9)]
        abs: f64,
        /// Require bit-identical numbers
        #[arg(long, conflicts_with_all = ["rel", "abs"])]
        exact: bool,
        /// Per-field tolerance, FIELD=REL,ABS (repeatable)
        #[arg(long = "tol", value_name = "FIELD=REL,ABS", value_parser = parse_field_tol)]
        overrides: Vec<(String, f64, f64)>,
        /// Where to write the report [default: the test directory]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_field_tol(s: &str) -> std::result::Result<(String, f64, f64), String> {
    let (field, rest) = s.split_once('=').ok_or("expected FIELD=REL,ABS")?;
    let (r, a) = rest.split_once(',').ok_or("expected FIELD=REL,ABS")?;
    let r: f64 = r.parse().map_err(|e| format!("{e}"))?;
    let a: f64 = a.parse().map_err(|e| format!("{e}"))?;
    if r < 0.0 || a < 0.0 {
        return Err("tolerances must be >= 0".into());
    }
    Ok((field.to_string(), r, a))
}

#[derive(Debug, Clone, Subcommand)]
pub enum BenchAction {
    /// Speedup and scaling bounds from recorded wall times
    Replay {
        /// Serial wall time (s)
        #[arg(long)]
        serial: f64,
        /// Parallel wall time (s)
        #[arg(long)]
        parallel: f64,
        /// Worker count for the scaling bound
        #[arg(long)]
        workers: Option<usize>,
        /// Longest single task (s)
        #[arg(long, requires = "workers")]
        max_task: Option<f64>,
        #[arg(long, default_value_t = 64)]
        tasks: usize,
    },
    /// Time serial and parallel runs of a work directory
    Run(BenchRunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BenchRunArgs {
    #[arg(long)]
    pub work: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    /// Parallel flavour to compare against serial
    #[arg(long, value_enum, default_value_t = RunMode::Parallel)]
    pub mode: RunMode,
    #[command(flatten)]
    pub resources: ResourceArgs,
    #[command(flatten)]
    pub dilate: DilateArgs,
    /// Output directory [default: the work directory]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Greedy,
    RoundRobin,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Comma-separated task durations (s)
    #[arg(long, value_delimiter = ',', conflicts_with = "durations_file")]
    pub durations: Vec<f64>,
    /// File of whitespace-separated durations (s)
    #[arg(long, value_name = "FILE")]
    pub durations_file: Option<PathBuf>,
    /// Worker count [default: effective concurrency of the resource flags]
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Greedy)]
    pub policy: PolicyArg,
    #[command(flatten)]
    pub resources: ResourceArgs,
    /// Also print each task's worker and interval
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NamingArg {
    Listing,
    ChordFiles,
}

#[derive(Debug, Clone, Args)]
pub struct ScriptArgs {
    #[arg(long)]
    pub tasks: usize,
    /// Tasks per node [default: 24]
    #[arg(long)]
    pub cores: Option<usize>,
    /// Memory per task, e.g. 1G [default: 1G]
    #[arg(long)]
    pub mem_per_task: Option<ByteSize>,
    /// Scheduler partition [default: gpus]
    #[arg(long)]
    pub partition: Option<String>,
    #[arg(long, value_enum, default_value_t = NamingArg::Listing)]
    pub naming: NamingArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `argv` (including the program name).
pub fn parse_args<I, T>(argv: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

/// Parse and execute, returning the process exit status.
pub fn main_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match parse_args(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match execute(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            if e.is::<UsageError>() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

/// `flag`, else `$CHORDFIT_WORKDIR`, else the current directory.
pub fn work_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(WORKDIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from),
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    match &cli.config {
        None => Ok(Config::default()),
        Some(p) => Config::load(p).map_err(|e| usage(format!("{e:#}"))),
    }
}

fn fit_options(flag: Option<usize>, cfg: &Config) -> Result<FitOptions> {
    let mut o = FitOptions::default();
    if let Some(n) = flag.or(cfg.get("max_iterations")?) {
        o.max_iterations = n;
    }
    o.validate().map_err(|e| usage(e.to_string()))?;
    Ok(o)
}

fn write_file(path: &Path, data: &str) -> Result<()> {
    fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Split(a) => cmd_split(a, out),
        Command::Fit(a) => cmd_fit(a, &cfg, out, err),
        Command::Run(a) => cmd_run(a, &cfg, out, err),
        Command::Certest { action } => cmd_certest(action, out),
        Command::Bench { action } => cmd_bench(action, &cfg, out),
        Command::Simulate(a) => cmd_simulate(a, &cfg, out),
        Command::Script(a) => cmd_script(a, &cfg, out),
    }
}

fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<i32> {
    if a.chords == 0 || a.timeslices == 0 || a.scale == 0 {
        return Err(usage("--chords, --timeslices and --scale must be >= 1"));
    }
    let opts = GenOptions {
        chords: a.chords,
        timeslices: a.timeslices,
        scale: a.scale,
        seed: a.seed,
        shot: a.shot,
    };
    let dir = work_dir(a.out.as_deref());
    ensure_dir(&dir)?;
    let path = dir.join(DISCHARGE_FILE);
    write_file(&path, &gen::generate(&opts).to_text())?;
    writeln!(
        out,
        "wrote {} ({} chords, {} fits)",
        path.display(),
        opts.chords,
        opts.total_fits()
    )?;
    Ok(EXIT_OK)
}

fn cmd_split(a: &SplitArgs, out: &mut dyn Write) -> Result<i32> {
    let text = fs::read_to_string(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let input = parse_discharge(&text).with_context(|| a.input.display().to_string())?;
    let dir = work_dir(a.out.as_deref());
    ensure_dir(&dir)?;
    let files = split_chords(&input, &dir)?;
    writeln!(out, "shot {}: {} chord files in {}", input.shot, files.len(), dir.display())?;
    Ok(EXIT_OK)
}

fn cmd_fit(a: &FitArgs, cfg: &Config, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let opts = fit_options(a.max_iterations, cfg)?;
    let text = match &a.input {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
            s
        }
    };
    let (rendered, fits) = process_chord_text(&text, &opts)?;
    match &a.out {
        Some(p) => write_file(p, &rendered)?,
        None => out.write_all(rendered.as_bytes())?,
    }
    let failed: Vec<_> = fits.iter().filter_map(|f| f.error.as_ref().map(|e| (f, e))).collect();
    for (f, e) in &failed {
        writeln!(err, "t={}: fit failed: {e}", f.record.time)?;
    }
    Ok(if failed.is_empty() { EXIT_OK } else { EXIT_FAILURE })
}

fn payload_runner(payload: Payload, opts: FitOptions) -> Box<dyn TaskRunner> {
    match payload {
        Payload::Fit => Box::new(Dilated(FitRunner { options: opts })),
        Payload::None => Box::new(Dilated(NoOp)),
    }
}

fn subprocess_runner(payload: Payload, opts: &FitOptions) -> Result<Box<dyn TaskRunner>> {
    let exe = std::env::current_exe().context("locating the chordfit executable")?;
    let mut args: Vec<String> = ["fit", "--in", "{input}", "--out", "{output}"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    args.extend(["--max-iterations".to_string(), opts.max_iterations.to_string()]);
    Ok(match payload {
        Payload::Fit => Box::new(Dilated(SubprocessRunner::new(exe, args))),
        Payload::None => Box::new(Dilated(NoOp)),
    })
}

/// Execute one run of `tasks` in `mode`.
fn run_once(
    tasks: &[ChordTask],
    mode: RunMode,
    cluster: &ClusterConfig,
    payload: Payload,
    opts: &FitOptions,
) -> Result<RunReport> {
    let report = match mode {
        RunMode::Serial => run_serial(tasks, &*payload_runner(payload, *opts))?,
        RunMode::Parallel => {
            let c = cluster.clone().with_mode(ExecMode::InProcess);
            run_parallel(tasks, &c, &*payload_runner(payload, *opts))?
        }
        RunMode::Subprocess => {
            let c = cluster.clone().with_mode(ExecMode::Subprocess);
            run_parallel(tasks, &c, &*subprocess_runner(payload, opts)?)?
        }
        RunMode::Simulate => {
            if tasks.iter().any(|t| t.sim_duration.is_none()) {
                return Err(usage("simulate mode needs --dilate MIN,MAX"));
            }
            let c = cluster.clone().with_mode(ExecMode::Simulate);
            run_parallel(tasks, &c, &NoOp)?
        }
    };
    Ok(report)
}

fn cmd_run(a: &RunArgs, cfg: &Config, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let opts = fit_options(a.max_iterations, cfg)?;
    let cluster = a.resources.resolve(cfg, available_cores())?;
    let dir = work_dir(a.work.as_deref());
    let mut tasks = discover_tasks(&dir)?;
    if tasks.is_empty() {
        bail!("no chord_<k>.in files in {}", dir.display());
    }
    a.dilate.apply(&mut tasks);
    let report = run_once(&tasks, a.mode, &cluster, a.dilate.payload, &opts)?;
    write_file(&dir.join(RUN_REPORT_FILE), &report.to_json())?;
    writeln!(
        out,
        "{}: {} tasks, concurrency {}, makespan {:.3} s",
        report.mode,
        report.records.len(),
        report.concurrency_limit,
        report.makespan_s
    )?;
    let mut failed = 0;
    for r in report.records.iter().filter(|r| r.error.is_some()) {
        failed += 1;
        writeln!(err, "task {} failed: {}", r.index, r.error.as_deref().unwrap_or(""))?;
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_certest(action: &CertestAction, out: &mut dyn Write) -> Result<i32> {
    match action {
        CertestAction::Reference {
            run,
            reference,
            overwrite,
        } => {
            let n = generate_reference(run, reference, *overwrite)?;
            writeln!(out, "stored {n} reference files in {}", reference.display())?;
            Ok(EXIT_OK)
        }
        CertestAction::Compare {
            reference,
            test,
            rel,
            abs,
            exact,
            overrides,
            out: report_dir,
        } => {
            let mut tol = if *exact {
                ToleranceSpec::exact()
            } else {
                ToleranceSpec {
                    rel: *rel,
                    abs: *abs,
                    ..ToleranceSpec::default()
                }
            };
            for (f, r, a) in overrides {
                tol = tol.with_override(f, *r, *a);
            }
            if !tol.validate() {
                return Err(usage("tolerances must be >= 0"));
            }
            let report = compare(reference, test, &tol)?;
            let dir = report_dir.as_deref().unwrap_or(test);
            ensure_dir(dir)?;
            write_file(&dir.join(CERTEST_REPORT_FILE), &report.to_json())?;
            write!(out, "{}", report.to_table())?;
            Ok(if report.pass { EXIT_OK } else { EXIT_FAILURE })
        }
    }
}

/// `x` rounded to `n` significant figures.
pub fn sig_figs(x: f64, n: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = n as i32 - 1 - mag;
    if decimals >= 0 {
        format!("{x:.*}", decimals as usize)
    } else {
        let p = 10f64.powi(-decimals);
        format!("{:.0}", (x / p).round() * p)
    }
}

fn cmd_bench(action: &BenchAction, cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    match action {
        BenchAction::Replay {
            serial,
            parallel,
            workers,
            max_task,
            tasks,
        } => {
            let s = speedup(*serial, *parallel)?;
            writeln!(out, "speedup {}", sig_figs(s, 3))?;
            if let Some(p) = workers {
                let max = max_task.unwrap_or(0.0);
                let b = scaling_from_totals(*serial, max, *tasks, *p, Some(*parallel))?;
                writeln!(out, "lower_bound {} s", sig_figs(b.lower_bound_makespan, 3))?;
                writeln!(out, "ideal_speedup {}", sig_figs(b.ideal_speedup, 3))?;
                writeln!(out, "overhead {} s", sig_figs(*parallel - b.lower_bound_makespan, 3))?;
            }
            Ok(EXIT_OK)
        }
        BenchAction::Run(a) => cmd_bench_run(a, cfg, out),
    }
}

fn cmd_bench_run(a: &BenchRunArgs, cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    if a.mode == RunMode::Serial || a.mode == RunMode::Simulate {
        return Err(usage("bench run compares serial against parallel or subprocess"));
    }
    let opts = fit_options(None, cfg)?;
    let cluster = a.resources.resolve(cfg, available_cores())?;
    let workers = effective_concurrency(&cluster)?;
    let dir = work_dir(a.work.as_deref());
    let mut tasks = discover_tasks(&dir)?;
    if tasks.is_empty() {
        bail!("no chord_<k>.in files in {}", dir.display());
    }
    a.dilate.apply(&mut tasks);

    let run_set = |mode: RunMode| -> Result<_> {
        let mut reports = Vec::new();
        let label = if mode == RunMode::Serial { "serial" } else { "parallel" };
        let set = benchmark(label, a.trials, || -> Result<()> {
            let r = run_once(&tasks, mode, &cluster, a.dilate.payload, &opts)?;
            if r.any_failed() {
                bail!("{label} run had failed tasks");
            }
            reports.push(r);
            Ok(())
        })?;
        Ok((set, reports))
    };
    let (serial, serial_reports) = run_set(RunMode::Serial)?;
    let (parallel, _) = run_set(a.mode)?;

    let table = per_chord_table(&serial_reports)?;
    let mean_durations: Vec<f64> = table
        .rows
        .iter()
        .map(|(_, d)| d.iter().sum::<f64>() / d.len() as f64)
        .collect();
    let s = speedup(serial.mean, parallel.mean)?;
    let scaling = scaling_bounds(&mean_durations, workers, Some(parallel.mean))?;

    let components = if a.dilate.payload == Payload::Fit {
        let mut timers = Vec::new();
        for t in &tasks {
            let text = fs::read_to_string(&t.input)?;
            let (_, fits) = process_chord_text(&text, &opts)?;
            timers.extend(fits.into_iter().filter_map(|f| f.result.map(|r| r.timers)));
        }
        component_breakdown(&timers).ok()
    } else {
        None
    };

    let odir = a.out.clone().unwrap_or_else(|| dir.clone());
    ensure_dir(&odir)?;
    write_file(&odir.join(BENCH_CSV_FILE), &table.to_csv())?;
    write_file(&odir.join(BENCH_DAT_FILE), &trials_gnuplot(&serial, &parallel))?;
    let json = serde_json::json!({
        "serial": serial,
        "parallel": parallel,
        "speedup": s,
        "workers": workers,
        "scaling": scaling,
        "components": components,
    });
    write_file(&odir.join(BENCH_JSON_FILE), &serde_json::to_string_pretty(&json)?)?;

    writeln!(out, "serial   mean {:.3} s over {} trials", serial.mean, serial.trials.len())?;
    writeln!(out, "parallel mean {:.3} s over {} trials", parallel.mean, parallel.trials.len())?;
    writeln!(out, "speedup {} on {workers} workers (ideal {})", sig_figs(s, 3), sig_figs(scaling.ideal_speedup, 3))?;
    if let Some(c) = components {
        writeln!(
            out,
            "fit time: model {:.1}%, solve {:.1}%, other {:.1}%",
            100.0 * c.model_eval,
            100.0 * c.linear_solve,
            100.0 * c.other
        )?;
    }
    Ok(EXIT_OK)
}

fn cmd_simulate(a: &SimulateArgs, cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    let durations: Vec<f64> = match &a.durations_file {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .split_whitespace()
            .map(|t| t.parse::<f64>().with_context(|| format!("bad duration {t:?}")))
            .collect::<Result<_>>()?,
        None => a.durations.clone(),
    };
    if durations.is_empty() {
        return Err(usage("give --durations or --durations-file"));
    }
    if durations.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(usage("durations must be finite and >= 0"));
    }
    let workers = match a.workers {
        Some(0) => return Err(usage("--workers must be >= 1")),
        Some(w) => w,
        None => effective_concurrency(&a.resources.resolve(cfg, 1)?)?,
    };
    let policy = match a.policy {
        PolicyArg::Greedy => Policy::GreedyPull,
        PolicyArg::RoundRobin => Policy::StaticRoundRobin,
    };
    let sim = simulate_with(&durations, workers, policy);
    let bound = scaling_bounds(&durations, workers, Some(sim.makespan))?;
    writeln!(out, "makespan {}", sim.makespan)?;
    writeln!(out, "lower_bound {}", bound.lower_bound_makespan)?;
    writeln!(out, "workers {workers}")?;
    if a.verbose {
        for (k, s) in sim.assignment.iter().enumerate() {
            writeln!(out, "task {} worker {} start {} end {}", k + 1, s.worker, s.start, s.end)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_script(a: &ScriptArgs, cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    if a.tasks == 0 {
        return Err(usage("--tasks must be >= 1"));
    }
    let cores = pick(a.cores, cfg.get("cores")?, 24);
    let mem = pick(a.mem_per_task, cfg.get("mem_per_task")?, ByteSize::gib(1));
    let partition = pick(a.partition.clone(), cfg.get("partition")?, "gpus".to_string());
    let cluster = ClusterConfig::new(1, cores).with_memory(mem, mem);
    let naming = match a.naming {
        NamingArg::Listing => InputNaming::Listing,
        NamingArg::ChordFiles => InputNaming::ChordFiles,
    };
    let script = emit_batch_script_with(a.tasks, &cluster, &partition, naming);
    let dir = work_dir(a.out.as_deref());
    ensure_dir(&dir)?;
    let path = dir.join(BATCH_SCRIPT_FILE);
    write_file(&path, &script)?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(EXIT_OK)
}
