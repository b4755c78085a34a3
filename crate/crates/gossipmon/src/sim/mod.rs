//! Deterministic discrete-event simulation: topology construction, timer
//! scheduling, latency-delayed message delivery with loss, event tracing and
//! round-boundary coverage snapshots.

pub mod engine;
pub mod topology;

use serde::{Deserialize, Serialize};

pub use engine::{run, RunOutput};
pub use topology::{build_topology, sample_latency, LatencyModel, PairClass, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Send,
    Deliver,
    Drop,
    Timer,
    Sample,
}

/// One trace line. The serialized form carries exactly the external fields
/// (tick, kind, node, msg_kind, msg_id); the ttl fields are an in-memory
/// audit aid for relay-depth checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub tick: u64,
    pub kind: EventKind,
    pub node: u32,
    pub msg_kind: Option<&'static str>,
    pub msg_id: Option<u64>,
    #[serde(skip)]
    pub ttl: Option<i32>,
    #[serde(skip)]
    pub initial_ttl: Option<i32>,
}

/// What one VM knows at a round boundary: how many origin records it holds
/// and how many group/region digests it has seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmCoverage {
    pub vm: u32,
    pub origins: u64,
    pub groups: u64,
    pub regions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSnapshot {
    pub round: u64,
    pub total_groups: u64,
    pub total_regions: u64,
    pub alive: u64,
    pub per_vm: Vec<VmCoverage>,
}

/// Send/deliver/drop accounting for one message kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct KindCounts {
    pub sends: u64,
    pub delivers: u64,
    pub drops: u64,
    pub in_flight: u64,
}

impl KindCounts {
    pub fn balanced(&self) -> bool {
        self.sends == self.delivers + self.drops + self.in_flight
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Conservation {
    pub intra_group: KindCounts,
    pub inter_group: KindCounts,
    pub inter_cloud: KindCounts,
    pub central: KindCounts,
}

impl Conservation {
    pub fn balanced(&self) -> bool {
        self.intra_group.balanced()
            && self.inter_group.balanced()
            && self.inter_cloud.balanced()
            && self.central.balanced()
    }
}
