//! Layered gossip monitoring for cloud VM fleets: protocol library and
//! deterministic discrete-event simulator.
//!
//! VMs gossip their resource usage within application-affinity groups, group
//! leaders exchange aggregate digests across groups, and region leaders
//! exchange region digests across clouds, so every VM ends up with a
//! system-wide usage summary. The simulator pits this layered scheme against
//! flat gossip and centralized collection on identical topologies and seeds.

pub mod baselines;
pub mod grouping;
pub mod model;
pub mod protocol;
pub mod report;
pub mod scenario;
pub mod sim;
