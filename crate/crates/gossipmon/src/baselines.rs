//! Comparison schemes: flat gossip and centralized collection.
//!
//! Flat gossip reuses the layered protocol's intra-group machinery with the
//! whole population as one group spanning every region; the inter-group and
//! inter-cloud timers never fire. Centralized collection is a deterministic
//! per-cycle unicast count with no peer-to-peer traffic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::VmId;
use crate::protocol::{GossipMessage, MsgIdGen, NodeState, ProtocolParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentralizedParams {
    /// Poll period, in ticks.
    pub t_poll: u64,
    /// Messages accounted per polled VM per cycle (1 = response only,
    /// 2 = request + response).
    pub messages_per_poll: u64,
}

impl Default for CentralizedParams {
    fn default() -> Self {
        CentralizedParams { t_poll: 1000, messages_per_poll: 2 }
    }
}

impl CentralizedParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.t_poll < 1 {
            return Err("t_poll must be >= 1".into());
        }
        if !(1..=2).contains(&self.messages_per_poll) {
            return Err(format!("messages_per_poll must be 1 or 2, got {}", self.messages_per_poll));
        }
        Ok(())
    }
}

/// Messages the central server exchanges with `n` monitored VMs in one cycle.
pub fn centralized_cycle(n: u64, params: &CentralizedParams) -> u64 {
    n * params.messages_per_poll
}

/// One population-wide gossip round: every node fires its intra-group timer
/// against the flat peer set. Returned messages are tagged with their
/// intended target.
pub fn flat_gossip_round(
    nodes: &mut [NodeState],
    params: &ProtocolParams,
    rng: &mut impl Rng,
    ids: &mut MsgIdGen,
) -> Vec<(VmId, GossipMessage)> {
    let mut out = Vec::new();
    for node in nodes.iter_mut() {
        out.extend(node.on_timer_intra(rng, params, ids));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GroupId, RegionId, ResourceUsage};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn centralized_counts() {
        let p = CentralizedParams::default();
        assert_eq!(centralized_cycle(0, &p), 0);
        assert_eq!(centralized_cycle(100, &p), 200);
        let total: u64 = (0..50).map(|_| centralized_cycle(100, &p)).sum();
        assert_eq!(total, 10_000);
    }

    #[test]
    fn centralized_params_validation() {
        assert!(CentralizedParams { t_poll: 0, messages_per_poll: 2 }.validate().is_err());
        assert!(CentralizedParams { t_poll: 1, messages_per_poll: 3 }.validate().is_err());
        assert!(CentralizedParams::default().validate().is_ok());
    }

    fn flat_population(n: u32) -> Vec<NodeState> {
        let group = GroupId { region: RegionId(0), index: 0 };
        (0..n)
            .map(|i| {
                let mut node = NodeState::new(VmId(i), group, RegionId(0), n as usize);
                node.peers = (0..n).filter(|p| *p != i).map(|p| (VmId(p), 1.0)).collect();
                node.on_local_sample(
                    ResourceUsage { cpu_pct: 1.0, mem_pct: 1.0, disk_pct: 1.0, net_kbps: 1.0 },
                    1,
                );
                node
            })
            .collect()
    }

    #[test]
    fn flat_round_single_node_sends_nothing() {
        let mut nodes = flat_population(1);
        let mut rng = StdRng::seed_from_u64(1);
        let mut ids = MsgIdGen::new();
        assert!(flat_gossip_round(&mut nodes, &ProtocolParams::default(), &mut rng, &mut ids)
            .is_empty());
    }

    #[test]
    fn flat_round_initiation_count() {
        // fanout(100) with beta 0.1, f_max 5 is 5, so 100 nodes initiate 500
        // messages before any forwarding.
        let mut nodes = flat_population(100);
        let mut rng = StdRng::seed_from_u64(1);
        let mut ids = MsgIdGen::new();
        let msgs = flat_gossip_round(&mut nodes, &ProtocolParams::default(), &mut rng, &mut ids);
        assert_eq!(msgs.len(), 500);
    }
}
