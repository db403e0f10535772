//! Trial timing, speedup and strong-scaling bounds, per-chord timing tables
//! and in-fit component fractions.

use std::fmt::{Display, Write as _};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::RunReport;
use crate::lmfit::FitTimers;

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("total fit time is zero; fractions undefined")]
    DegenerateTiming,
    #[error("trial {failed_trial} failed after {} completed: {message}", completed.len())]
    Aborted {
        failed_trial: usize,
        completed: Vec<f64>,
        message: String,
    },
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub mode: String,
    /// Wall time per trial (s).
    pub trials: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 when undefined (single trial).
    pub std_dev: f64,
    pub std_defined: bool,
}

impl TrialSet {
    pub fn from_trials(mode: impl Into<String>, trials: Vec<f64>) -> Result<Self> {
        if trials.is_empty() {
            return Err(BenchError::Domain("a trial set needs at least one trial".into()));
        }
        if trials.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(BenchError::Domain("trial times must be finite and >= 0".into()));
        }
        let n = trials.len() as f64;
        let mean = trials.iter().sum::<f64>() / n;
        let (std_dev, std_defined) = if trials.len() > 1 {
            let ss = trials.iter().map(|t| (t - mean).powi(2)).sum::<f64>();
            ((ss / (n - 1.0)).sqrt(), true)
        } else {
            (0.0, false)
        };
        Ok(Self {
            mode: mode.into(),
            trials,
            mean,
            std_dev,
            std_defined,
        })
    }
}

/// Run `runner` `trials` times back to back, timing each on a monotonic
/// clock. A failing trial aborts the set; completed times are returned in
/// the error.
pub fn benchmark<F, E>(mode: &str, trials: usize, mut runner: F) -> Result<TrialSet>
where
    F: FnMut() -> Result<(), E>,
    E: Display,
{
    if trials == 0 {
        return Err(BenchError::Domain("trials must be >= 1".into()));
    }
    let mut times = Vec::with_capacity(trials);
    for i in 0..trials {
        let t = Instant::now();
        if let Err(e) = runner() {
            return Err(BenchError::Aborted {
                failed_trial: i + 1,
                completed: times,
                message: e.to_string(),
            });
        }
        times.push(t.elapsed().as_secs_f64());
    }
    TrialSet::from_trials(mode, times)
}

pub fn speedup(t_serial: f64, t_parallel: f64) -> Result<f64> {
    let ok = |t: f64| t.is_finite() && t > 0.0;
    if !(ok(t_serial) && ok(t_parallel)) {
        return Err(BenchError::Domain(format!(
            "speedup needs positive times, got {t_serial} and {t_parallel}"
        )));
    }
    Ok(t_serial / t_parallel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingAnalysis {
    /// Σ task durations (s).
    pub total_work: f64,
    /// Longest single task (s).
    pub max_task: f64,
    pub workers: usize,
    pub n_tasks: usize,
    /// Σ/P, the perfectly divisible ideal that ignores the longest task.
    pub work_over_workers: f64,
    /// max(max_task, Σ/P).
    pub lower_bound_makespan: f64,
    /// Σ / lower_bound.
    pub ideal_speedup: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_makespan: Option<f64>,
    /// observed − lower_bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overhead: Option<f64>,
}

/// Strong-scaling bounds from aggregate numbers alone.
pub fn scaling_from_totals(
    total_work: f64,
    max_task: f64,
    n_tasks: usize,
    workers: usize,
    observed: Option<f64>,
) -> Result<ScalingAnalysis> {
    if workers == 0 {
        return Err(BenchError::Domain("workers must be >= 1".into()));
    }
    if n_tasks == 0 {
        return Err(BenchError::Domain("need at least one task".into()));
    }
    if !(total_work.is_finite() && max_task.is_finite() && max_task >= 0.0 && total_work >= max_task)
    {
        return Err(BenchError::Domain(format!(
            "inconsistent totals: work {total_work}, longest task {max_task}"
        )));
    }
    let work_over_workers = total_work / workers as f64;
    let lower = max_task.max(work_over_workers);
    let ideal = if lower > 0.0 { total_work / lower } else { 1.0 };
    Ok(ScalingAnalysis {
        total_work,
        max_task,
        workers,
        n_tasks,
        work_over_workers,
        lower_bound_makespan: lower,
        ideal_speedup: ideal,
        observed_makespan: observed,
        overhead: observed.map(|o| o - lower),
    })
}

pub fn scaling_bounds(
    durations: &[f64],
    workers: usize,
    observed: Option<f64>,
) -> Result<ScalingAnalysis> {
    if durations.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(BenchError::Domain("durations must be finite and >= 0".into()));
    }
    let total = durations.iter().sum();
    let max = durations.iter().copied().fold(0.0, f64::max);
    scaling_from_totals(total, max, durations.len(), workers, observed)
}

/// Per-chord durations across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerChordTable {
    pub trials: usize,
    /// `(chord index, duration in each trial)`.
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl PerChordTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("chord");
        for t in 1..=self.trials {
            let _ = write!(s, ",trial_{t}");
        }
        s.push('\n');
        for (k, d) in &self.rows {
            let _ = write!(s, "{k}");
            for v in d {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Whitespace-separated columns with a `#` header.
    pub fn to_gnuplot(&self) -> String {
        let mut s = String::from("# chord");
        for t in 1..=self.trials {
            let _ = write!(s, " trial_{t}");
        }
        s.push('\n');
        for (k, d) in &self.rows {
            let _ = write!(s, "{k}");
            for v in d {
                let _ = write!(s, " {v:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Durations of one trial in chord order.
    pub fn column(&self, trial: usize) -> Vec<f64> {
        self.rows.iter().map(|(_, d)| d[trial]).collect()
    }
}

/// One row per chord with its duration in every report (trial).
pub fn per_chord_table(reports: &[RunReport]) -> Result<PerChordTable> {
    let Some(first) = reports.first() else {
        return Err(BenchError::Shape("no reports".into()));
    };
    let n = first.records.len();
    if let Some(bad) = reports.iter().position(|r| r.records.len() != n) {
        return Err(BenchError::Shape(format!(
            "trial {} has {} tasks, trial 1 has {n}",
            bad + 1,
            reports[bad].records.len()
        )));
    }
    let rows = (0..n)
        .map(|i| {
            let k = first.records[i].index;
            let d = reports.iter().map(|r| r.records[i].duration()).collect();
            (k, d)
        })
        .collect();
    Ok(PerChordTable {
        trials: reports.len(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentFractions {
    pub model_eval: f64,
    pub linear_solve: f64,
    pub other: f64,
}

/// Share of total fit time spent in model evaluation and the linear solve.
pub fn component_breakdown<'a, I>(timers: I) -> Result<ComponentFractions>
where
    I: IntoIterator<Item = &'a FitTimers>,
{
    let (mut eval, mut solve, mut total) = (0.0, 0.0, 0.0);
    for t in timers {
        eval += t.model_eval_seconds;
        solve += t.linear_solve_seconds;
        total += t.total_seconds;
    }
    if total <= 0.0 {
        return Err(BenchError::DegenerateTiming);
    }
    let model_eval = (eval / total).clamp(0.0, 1.0);
    let linear_solve = (solve / total).clamp(0.0, 1.0 - model_eval);
    Ok(ComponentFractions {
        model_eval,
        linear_solve,
        other: 1.0 - model_eval - linear_solve,
    })
}

/// Bar-chart data for serial vs parallel trial times.
pub fn trials_gnuplot(serial: &TrialSet, parallel: &TrialSet) -> String {
    let mut s = format!("# trial {} {}\n", serial.mode, parallel.mode);
    let n = serial.trials.len().max(parallel.trials.len());
    for i in 0..n {
        let cell = |t: &TrialSet| {
            t.trials
                .get(i)
                .map_or_else(|| "NaN".to_string(), |v| format!("{v:.6}"))
        };
        let _ = writeln!(s, "{} {} {}", i + 1, cell(serial), cell(parallel));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::{TaskRecord, TaskStatus, WorkerId};

    #[test]
    fn trial_mean_and_std() {
        let t = TrialSet::from_trials("serial", vec![1005.0, 1010.0, 1015.0]).unwrap();
        assert_eq!(t.mean, 1010.0);
        assert!((t.std_dev - 5.0).abs() < 1e-12);
        assert!(t.std_defined);
    }

    #[test]
    fn single_trial_std_flagged() {
        let t = TrialSet::from_trials("parallel", vec![51.0]).unwrap();
        assert_eq!(t.mean, 51.0);
        assert_eq!(t.std_dev, 0.0);
        assert!(!t.std_defined);
    }

    #[test]
    fn benchmark_runs_each_trial() {
        let mut calls = 0;
        let t = benchmark("noop", 3, || -> Result<(), String> {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 3);
        assert_eq!(t.trials.len(), 3);
    }

    #[test]
    fn benchmark_abort_reports_partial() {
        let mut calls = 0;
        let err = benchmark("flaky", 3, || {
            calls += 1;
            if calls == 2 {
                Err("boom")
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        match err {
            BenchError::Aborted {
                failed_trial,
                completed,
                message,
            } => {
                assert_eq!(failed_trial, 2);
                assert_eq!(completed.len(), 1);
                assert_eq!(message, "boom");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn speedup_cases() {
        assert_eq!(speedup(100.0, 4.0).unwrap(), 25.0);
        assert_eq!(speedup(7.5, 7.5).unwrap(), 1.0);
        let s = speedup(1016.0, 51.0).unwrap();
        assert!((s - 19.921_568_627_45).abs() < 1e-9);
        assert!(speedup(0.0, 1.0).is_err());
        assert!(speedup(1.0, -1.0).is_err());
    }

    #[test]
    fn scaling_serial_limit_and_balanced() {
        let a = scaling_bounds(&[3.0, 1.0, 2.0], 1, None).unwrap();
        assert_eq!(a.lower_bound_makespan, 6.0);
        assert_eq!(a.ideal_speedup, 1.0);
        let b = scaling_bounds(&[2.0; 5], 8, Some(2.5)).unwrap();
        assert_eq!(b.lower_bound_makespan, 2.0);
        assert_eq!(b.ideal_speedup, 5.0);
        assert_eq!(b.overhead, Some(0.5));
        assert!(scaling_bounds(&[], 2, None).is_err());
        assert!(scaling_bounds(&[1.0], 0, None).is_err());
    }

    #[test]
    fn long_pole_bound() {
        let a = scaling_from_totals(1016.0, 30.0, 64, 48, Some(51.0)).unwrap();
        assert_eq!(a.lower_bound_makespan, 30.0);
        assert!((a.work_over_workers - 21.166_666_666_666_668).abs() < 1e-12);
        assert!((a.ideal_speedup - 33.866_666_666_666_67).abs() < 1e-9);
        assert_eq!(a.overhead, Some(21.0));
    }

    #[test]
    fn breakdown_fractions() {
        let t = FitTimers {
            model_eval_seconds: 0.16,
            linear_solve_seconds: 0.10,
            total_seconds: 1.0,
            n_model_evals: 1,
        };
        let f = component_breakdown([&t]).unwrap();
        assert_eq!(f.model_eval, 0.16);
        assert_eq!(f.linear_solve, 0.10);
        assert!((f.other - 0.74).abs() < 1e-15);

        let only = FitTimers {
            model_eval_seconds: 2.0,
            linear_solve_seconds: 0.0,
            total_seconds: 2.0,
            n_model_evals: 1,
        };
        let f = component_breakdown([&only]).unwrap();
        assert_eq!((f.model_eval, f.linear_solve, f.other), (1.0, 0.0, 0.0));

        assert_eq!(
            component_breakdown([&FitTimers::default()]),
            Err(BenchError::DegenerateTiming)
        );
    }

    fn report(durs: &[f64]) -> RunReport {
        let mut t = 0.0;
        let records = durs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let r = TaskRecord {
                    index: i + 1,
                    worker: WorkerId { node: 0, core: 0 },
                    submit_s: 0.0,
                    start_s: t,
                    end_s: t + d,
                    status: TaskStatus::Ok,
                    error: None,
                };
                t += d;
                r
            })
            .collect();
        RunReport {
            mode: "serial".into(),
            makespan_s: t,
            join_makespan_s: t,
            concurrency_limit: 1,
            poll_interval_s: None,
            polls: 0,
            records,
        }
    }

    #[test]
    fn per_chord_table_shape() {
        let reps: Vec<RunReport> = (0..3).map(|_| report(&[1.0; 64])).collect();
        let t = per_chord_table(&reps).unwrap();
        assert_eq!(t.rows.len(), 64);
        assert!(t.rows.iter().all(|(_, d)| d.len() == 3));
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 65);
        assert_eq!(csv.lines().next().unwrap(), "chord,trial_1,trial_2,trial_3");
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 4);

        let one = per_chord_table(&[report(&[0.5])]).unwrap();
        assert_eq!(one.rows, vec![(1, vec![0.5])]);

        assert!(matches!(
            per_chord_table(&[report(&[1.0; 3]), report(&[1.0; 2])]),
            Err(BenchError::Shape(_))
        ));
    }
}
