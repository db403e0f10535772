use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DispatchError;

/// Memory amount in bytes, written with scheduler-style binary suffixes
/// (`K`, `M`, `G`, `T`; bare numbers are bytes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ByteSize(pub u64);

const UNITS: [(char, u64); 4] = [
    ('T', 1 << 40),
    ('G', 1 << 30),
    ('M', 1 << 20),
    ('K', 1 << 10),
];

impl ByteSize {
    pub const fn gib(n: u64) -> Self {
        Self(n << 30)
    }

    pub const fn mib(n: u64) -> Self {
        Self(n << 20)
    }

    pub fn bytes(self) -> u64 {
        self.0
    }
}

impl fmt::Display for ByteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (suffix, scale) in UNITS {
            if self.0 >= scale && self.0.is_multiple_of(scale) {
                return write!(f, "{}{}", self.0 / scale, suffix);
            }
        }
        write!(f, "{}", self.0)
    }
}

impl FromStr for ByteSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (digits, scale) = match s.chars().last() {
            Some(c) if c.is_ascii_alphabetic() => {
                let up = c.to_ascii_uppercase();
                let scale = UNITS
                    .iter()
                    .find(|(u, _)| *u == up)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| format!("unknown size suffix {c:?}"))?;
                (&s[..s.len() - 1], scale)
            }
            _ => (s, 1),
        };
        let n: u64 = digits
            .parse()
            .map_err(|_| format!("invalid size {s:?}"))?;
        n.checked_mul(scale)
            .map(ByteSize)
            .ok_or_else(|| format!("size {s:?} overflows"))
    }
}

impl From<ByteSize> for String {
    fn from(b: ByteSize) -> String {
        b.to_string()
    }
}

impl TryFrom<String> for ByteSize {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Worker threads run the task payload directly.
    #[default]
    InProcess,
    /// Worker slots launch child processes; whole-run completion is detected
    /// by polling at `poll_interval`.
    Subprocess,
    /// Nothing runs; the event-driven simulator replays `sim_duration`s.
    Simulate,
}

impl FromStr for ExecMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "in_process" | "in-process" => Ok(Self::InProcess),
            "subprocess" => Ok(Self::Subprocess),
            "simulate" => Ok(Self::Simulate),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

/// Nodes × cores with a per-core memory budget, as a job-array scheduler sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub nodes: usize,
    pub cores_per_node: usize,
    pub mem_per_core: ByteSize,
    pub mem_per_task: ByteSize,
    /// Seconds between completion polls (subprocess mode).
    pub poll_interval: f64,
    pub mode: ExecMode,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            nodes: 1,
            cores_per_node: 1,
            mem_per_core: ByteSize::gib(1),
            mem_per_task: ByteSize::gib(1),
            poll_interval: 2.0,
            mode: ExecMode::InProcess,
        }
    }
}

impl ClusterConfig {
    pub fn new(nodes: usize, cores_per_node: usize) -> Self {
        Self {
            nodes,
            cores_per_node,
            ..Self::default()
        }
    }

    pub fn with_memory(mut self, per_core: ByteSize, per_task: ByteSize) -> Self {
        self.mem_per_core = per_core;
        self.mem_per_task = per_task;
        self
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_poll_interval(mut self, seconds: f64) -> Self {
        self.poll_interval = seconds;
        self
    }

    pub fn node_memory(&self) -> u64 {
        self.cores_per_node as u64 * self.mem_per_core.bytes()
    }

    /// Simultaneous tasks a single node can host.
    pub fn slots_per_node(&self) -> Result<usize, DispatchError> {
        if self.nodes == 0 || self.cores_per_node == 0 {
            return Err(DispatchError::InvalidConfig("nodes and cores must be >= 1"));
        }
        if self.mem_per_task.bytes() == 0 || self.mem_per_core.bytes() == 0 {
            return Err(DispatchError::InvalidConfig("memory sizes must be > 0"));
        }
        if !(self.poll_interval.is_finite() && self.poll_interval > 0.0) {
            return Err(DispatchError::InvalidConfig("poll interval must be > 0"));
        }
        let node_mem = self.node_memory();
        if self.mem_per_task.bytes() > node_mem {
            return Err(DispatchError::Unschedulable {
                task: self.mem_per_task,
                node: ByteSize(node_mem),
            });
        }
        let by_mem = (node_mem / self.mem_per_task.bytes()) as usize;
        Ok(self.cores_per_node.min(by_mem))
    }

    /// `(node, core)` identity of every worker slot.
    pub fn worker_slots(&self) -> Result<Vec<WorkerId>, DispatchError> {
        let per = self.slots_per_node()?;
        Ok((0..self.nodes)
            .flat_map(|node| (0..per).map(move |core| WorkerId { node, core }))
            .collect())
    }
}

/// Tasks the cluster can run at once: per node the smaller of its cores and
/// the number of tasks its memory can hold, summed over nodes.
pub fn effective_concurrency(config: &ClusterConfig) -> Result<usize, DispatchError> {
    Ok(config.slots_per_node()? * config.nodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WorkerId {
    pub node: usize,
    pub core: usize,
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}c{}", self.node, self.core)
    }
}
