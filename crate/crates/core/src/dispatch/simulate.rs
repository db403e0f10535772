//! Deterministic event-driven model of a job array draining a FIFO queue.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Idle workers pull the next queued task.
    #[default]
    GreedyPull,
    /// Task j is bound to worker j mod P up front.
    StaticRoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub worker: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub makespan: f64,
    /// Indexed like the input durations.
    pub assignment: Vec<Assignment>,
}

#[derive(Clone, Copy, PartialEq)]
struct FreeAt {
    time: f64,
    worker: usize,
}

impl Eq for FreeAt {}

impl Ord for FreeAt {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.worker.cmp(&other.worker))
    }
}

impl PartialOrd for FreeAt {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy FIFO pull on `workers` identical workers. Ties in availability go
/// to the lowest worker id.
///
/// # Panics
/// If `workers == 0` or a duration is negative or non-finite.
pub fn simulate(durations: &[f64], workers: usize) -> SimOutcome {
    simulate_with(durations, workers, Policy::GreedyPull)
}

pub fn simulate_with(durations: &[f64], workers: usize, policy: Policy) -> SimOutcome {
    assert!(workers >= 1, "simulate needs at least one worker");
    assert!(
        durations.iter().all(|d| d.is_finite() && *d >= 0.0),
        "durations must be finite and non-negative"
    );
    let assignment: Vec<Assignment> = match policy {
        Policy::GreedyPull => {
            let mut free: BinaryHeap<Reverse<FreeAt>> = (0..workers)
                .map(|worker| Reverse(FreeAt { time: 0.0, worker }))
                .collect();
            durations
                .iter()
                .map(|&d| {
                    let Reverse(slot) = free.pop().expect("worker heap never empty");
                    let end = slot.time + d;
                    free.push(Reverse(FreeAt {
                        time: end,
                        worker: slot.worker,
                    }));
                    Assignment {
                        worker: slot.worker,
                        start: slot.time,
                        end,
                    }
                })
                .collect()
        }
        Policy::StaticRoundRobin => {
            let mut clock = vec![0.0; workers];
            durations
                .iter()
                .enumerate()
                .map(|(j, &d)| {
                    let worker = j % workers;
                    let start = clock[worker];
                    clock[worker] += d;
                    Assignment {
                        worker,
                        start,
                        end: clock[worker],
                    }
                })
                .collect()
        }
    };
    let makespan = assignment.iter().fold(0.0_f64, |m, a| m.max(a.end));
    SimOutcome {
        makespan,
        assignment,
    }
}
