//! Serial and job-array-style parallel execution of chord tasks.
//!
//! Parallel runs keep one FIFO queue; each worker slot pulls the next task
//! when it goes idle. In subprocess mode the slots launch child processes
//! and overall completion is observed by polling, so the reported makespan
//! is quantised to the poll interval exactly like an external wrapper that
//! queries the scheduler. The raw join time is recorded alongside it.

mod resources;
mod script;
mod simulate;

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chordio::{chord_input_name, fit_output_name};
use crate::lmfit::FitOptions;
use crate::pipeline::process_chord_file;

pub use resources::{effective_concurrency, ByteSize, ClusterConfig, ExecMode, WorkerId};
pub use script::{emit_batch_script, emit_batch_script_with, InputNaming};
pub use simulate::{simulate, simulate_with, Assignment, Policy, SimOutcome};

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("invalid cluster configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("task needs {task} but a node only has {node}")]
    Unschedulable { task: ByteSize, node: ByteSize },
    #[error("invalid task list: {0}")]
    InvalidTasks(String),
    #[error("simulate mode needs a sim_duration for task {0}")]
    MissingDuration(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DispatchError> = std::result::Result<T, E>;

/// One unit of parallel work: fit `chord_<k>.in` into `fit_<k>.out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChordTask {
    /// 1-based array index.
    pub index: usize,
    pub input: PathBuf,
    pub output: PathBuf,
    /// Injected run time for dilated runs and the simulator.
    pub sim_duration: Option<Duration>,
}

impl ChordTask {
    pub fn in_dir(dir: &Path, index: usize) -> Self {
        Self {
            index,
            input: dir.join(chord_input_name(index)),
            output: dir.join(fit_output_name(index)),
            sim_duration: None,
        }
    }
}

/// Tasks `1..=n` whose inputs and outputs live in `dir`.
pub fn chord_tasks(dir: &Path, n: usize) -> Vec<ChordTask> {
    (1..=n).map(|k| ChordTask::in_dir(dir, k)).collect()
}

/// Tasks for every `chord_<k>.in` in `dir`; the indices must be dense from 1.
pub fn discover_tasks(dir: &Path) -> Result<Vec<ChordTask>> {
    let io = |source| DispatchError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let name = entry.map_err(io)?.file_name();
        let name = name.to_string_lossy();
        if let Some(k) = name
            .strip_prefix("chord_")
            .and_then(|s| s.strip_suffix(".in"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            found.push(k);
        }
    }
    found.sort_unstable();
    if found.iter().enumerate().any(|(i, &k)| k != i + 1) {
        return Err(DispatchError::InvalidTasks(format!(
            "chord input indices in {} are not dense from 1",
            dir.display()
        )));
    }
    Ok(chord_tasks(dir, found.len()))
}

fn validate_tasks(tasks: &[ChordTask]) -> Result<()> {
    let mut paths = HashSet::new();
    for (i, t) in tasks.iter().enumerate() {
        if t.index != i + 1 {
            return Err(DispatchError::InvalidTasks(format!(
                "task at position {} has index {}",
                i + 1,
                t.index
            )));
        }
        if !paths.insert(&t.input) || !paths.insert(&t.output) {
            return Err(DispatchError::InvalidTasks(format!(
                "task {} reuses a path",
                t.index
            )));
        }
    }
    Ok(())
}

/// What a worker does with one task.
pub trait TaskRunner: Sync {
    fn run(&self, task: &ChordTask) -> Result<(), String>;
}

impl<F> TaskRunner for F
where
    F: Fn(&ChordTask) -> Result<(), String> + Sync,
{
    fn run(&self, task: &ChordTask) -> Result<(), String> {
        self(task)
    }
}

/// Reads the chord input, fits every timeslice, writes the fit output.
#[derive(Debug, Clone, Default)]
pub struct FitRunner {
    pub options: FitOptions,
}

impl TaskRunner for FitRunner {
    fn run(&self, task: &ChordTask) -> Result<(), String> {
        process_chord_file(&task.input, &task.output, &self.options)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

/// Does nothing; combine with [`Dilated`] for pure scheduling experiments.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoOp;

impl TaskRunner for NoOp {
    fn run(&self, _task: &ChordTask) -> Result<(), String> {
        Ok(())
    }
}

/// Sleeps for the task's `sim_duration` before running the inner payload.
#[derive(Debug, Clone, Default)]
pub struct Dilated<R>(pub R);

impl<R: TaskRunner> TaskRunner for Dilated<R> {
    fn run(&self, task: &ChordTask) -> Result<(), String> {
        if let Some(d) = task.sim_duration {
            thread::sleep(d);
        }
        self.0.run(task)
    }
}

/// Launches one child process per task.
///
/// `{input}`, `{output}` and `{k}` in `args` are substituted per task. With
/// `stdio` set, the child's stdin is the input file and its stdout goes to
/// the output file.
#[derive(Debug, Clone)]
pub struct SubprocessRunner {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub stdio: bool,
}

impl SubprocessRunner {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            stdio: false,
        }
    }
}

impl TaskRunner for SubprocessRunner {
    fn run(&self, task: &ChordTask) -> Result<(), String> {
        let mut cmd = Command::new(&self.program);
        for a in &self.args {
            cmd.arg(
                a.replace("{input}", &task.input.to_string_lossy())
                    .replace("{output}", &task.output.to_string_lossy())
                    .replace("{k}", &task.index.to_string()),
            );
        }
        if self.stdio {
            let stdin = fs::File::open(&task.input).map_err(|e| e.to_string())?;
            let stdout = fs::File::create(&task.output).map_err(|e| e.to_string())?;
            cmd.stdin(stdin).stdout(stdout);
        } else {
            cmd.stdin(Stdio::null()).stdout(Stdio::null());
        }
        cmd.stderr(Stdio::piped());
        let out = cmd
            .spawn()
            .and_then(|c| c.wait_with_output())
            .map_err(|e| format!("{}: {e}", self.program.display()))?;
        if out.status.success() {
            Ok(())
        } else {
            let err = String::from_utf8_lossy(&out.stderr);
            Err(format!("{}: {}", out.status, err.trim()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Ok,
    Failed,
}

/// Execution trace of one task. Times are seconds since the run started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    #[serde(rename = "k")]
    pub index: usize,
    pub worker: WorkerId,
    pub submit_s: f64,
    pub start_s: f64,
    pub end_s: f64,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskRecord {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    /// First submit to completion as the run observed it (poll-quantised in
    /// subprocess mode).
    pub makespan_s: f64,
    /// First submit to last task end.
    pub join_makespan_s: f64,
    pub concurrency_limit: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poll_interval_s: Option<f64>,
    #[serde(default)]
    pub polls: usize,
    /// Sorted by task index.
    #[serde(rename = "tasks")]
    pub records: Vec<TaskRecord>,
}

impl RunReport {
    fn assemble(
        mode: &str,
        concurrency_limit: usize,
        mut records: Vec<TaskRecord>,
        observed_end: Option<f64>,
        poll_interval_s: Option<f64>,
        polls: usize,
    ) -> Self {
        records.sort_by_key(|r| r.index);
        let first_submit = records
            .iter()
            .map(|r| r.submit_s)
            .fold(f64::INFINITY, f64::min);
        let last_end = records.iter().map(|r| r.end_s).fold(0.0_f64, f64::max);
        let join = if records.is_empty() {
            0.0
        } else {
            last_end - first_submit
        };
        let makespan = match observed_end {
            Some(t) if !records.is_empty() => (t - first_submit).max(join),
            _ => join,
        };
        Self {
            mode: mode.to_string(),
            makespan_s: makespan,
            join_makespan_s: join,
            concurrency_limit,
            poll_interval_s,
            polls,
            records,
        }
    }

    pub fn any_failed(&self) -> bool {
        self.records.iter().any(|r| r.status == TaskStatus::Failed)
    }

    /// Per-task run time, in task order.
    pub fn durations(&self) -> Vec<f64> {
        self.records.iter().map(TaskRecord::duration).collect()
    }

    /// Largest number of tasks running at one instant. Intervals are
    /// half-open, so a task ending exactly when another starts does not
    /// overlap it.
    pub fn peak_concurrency(&self) -> usize {
        let mut events: Vec<(f64, i32)> = self
            .records
            .iter()
            .flat_map(|r| [(r.start_s, 1), (r.end_s, -1)])
            .collect();
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut live = 0i32;
        let mut peak = 0i32;
        for (_, d) in events {
            live += d;
            peak = peak.max(live);
        }
        peak as usize
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn run_one(runner: &dyn TaskRunner, task: &ChordTask) -> (TaskStatus, Option<String>) {
    match catch_unwind(AssertUnwindSafe(|| runner.run(task))) {
        Ok(Ok(())) => (TaskStatus::Ok, None),
        Ok(Err(e)) => (TaskStatus::Failed, Some(e)),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "worker panicked".to_string());
            (TaskStatus::Failed, Some(msg))
        }
    }
}

/// Run every task in index order on a single worker.
pub fn run_serial(tasks: &[ChordTask], runner: &dyn TaskRunner) -> Result<RunReport> {
    validate_tasks(tasks)?;
    let origin = Instant::now();
    let worker = WorkerId { node: 0, core: 0 };
    let records = tasks
        .iter()
        .map(|task| {
            let start = origin.elapsed().as_secs_f64();
            let (status, error) = run_one(runner, task);
            TaskRecord {
                index: task.index,
                worker,
                submit_s: 0.0,
                start_s: start,
                end_s: origin.elapsed().as_secs_f64(),
                status,
                error,
            }
        })
        .collect();
    Ok(RunReport::assemble("serial", 1, records, None, None, 0))
}

/// Run tasks on `effective_concurrency(config)` workers pulling from one
/// FIFO queue.
pub fn run_parallel(
    tasks: &[ChordTask],
    config: &ClusterConfig,
    runner: &dyn TaskRunner,
) -> Result<RunReport> {
    let slots = config.worker_slots()?;
    validate_tasks(tasks)?;
    match config.mode {
        ExecMode::Simulate => simulate_report(tasks, &slots),
        ExecMode::InProcess => Ok(run_pool(tasks, &slots, runner, None)),
        ExecMode::Subprocess => Ok(run_pool(
            tasks,
            &slots,
            runner,
            Some(Duration::from_secs_f64(config.poll_interval)),
        )),
    }
}

fn simulate_report(tasks: &[ChordTask], slots: &[WorkerId]) -> Result<RunReport> {
    let durations = tasks
        .iter()
        .map(|t| {
            t.sim_duration
                .map(|d| d.as_secs_f64())
                .ok_or(DispatchError::MissingDuration(t.index))
        })
        .collect::<Result<Vec<f64>>>()?;
    let out = simulate(&durations, slots.len());
    let records = tasks
        .iter()
        .zip(&out.assignment)
        .map(|(t, a)| TaskRecord {
            index: t.index,
            worker: slots[a.worker],
            submit_s: 0.0,
            start_s: a.start,
            end_s: a.end,
            status: TaskStatus::Ok,
            error: None,
        })
        .collect();
    Ok(RunReport::assemble(
        "simulate",
        slots.len(),
        records,
        None,
        None,
        0,
    ))
}

fn run_pool(
    tasks: &[ChordTask],
    slots: &[WorkerId],
    runner: &dyn TaskRunner,
    poll: Option<Duration>,
) -> RunReport {
    let origin = Instant::now();
    let next = AtomicUsize::new(0);
    let live = AtomicUsize::new(tasks.len());
    let (records, observed, polls) = thread::scope(|scope| {
        let handles: Vec<_> = slots
            .iter()
            .map(|&worker| {
                let (next, live) = (&next, &live);
                scope.spawn(move || {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(task) = tasks.get(i) else { break };
                        let start = origin.elapsed().as_secs_f64();
                        let (status, error) = run_one(runner, task);
                        let end = origin.elapsed().as_secs_f64();
                        live.fetch_sub(1, Ordering::SeqCst);
                        mine.push(TaskRecord {
                            index: task.index,
                            worker,
                            submit_s: 0.0,
                            start_s: start,
                            end_s: end,
                            status,
                            error,
                        });
                    }
                    mine
                })
            })
            .collect();

        let mut observed = None;
        let mut polls = 0;
        if let Some(interval) = poll {
            loop {
                polls += 1;
                if live.load(Ordering::SeqCst) == 0 {
                    observed = Some(origin.elapsed().as_secs_f64());
                    break;
                }
                thread::sleep(interval);
            }
        }
        let records: Vec<TaskRecord> = handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread"))
            .collect();
        (records, observed, polls)
    });
    let mode = if poll.is_some() {
        "subprocess"
    } else {
        "in_process"
    };
    RunReport::assemble(
        mode,
        slots.len(),
        records,
        observed,
        poll.map(|d| d.as_secs_f64()),
        polls,
    )
}
