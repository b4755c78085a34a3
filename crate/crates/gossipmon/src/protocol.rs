//! The per-VM layered-gossip state machine.
//!
//! Three tiers of traffic with three rates:
//! - intra-group rumor gossip every `t_gossip`, fanout proportional to group
//!   size, targets weighted toward low-latency peers, relayed with a TTL hop
//!   budget and new-information gating;
//! - inter-group digest gossip by each group's leader every `k_group` intra
//!   rounds, one message per other group in the region;
//! - inter-cloud digest gossip by each region's leader every `k_cloud`
//!   inter-group rounds, one message per other region.
//!
//! All transitions are pure functions of (state, event, injected rng, tick),
//! so replaying a recorded event sequence reproduces identical state.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use crate::model::{
    combine_digests, compute_aggregate, AggregateDigest, DigestSet, GroupId, OriginRecordSet,
    RegionId, ResourceUsage, Scope, Tick, UsageRecord, VmId,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    /// Intra-group gossip period, in ticks.
    pub t_gossip: Tick,
    /// Fanout coefficient: fanout = clamp(ceil(beta * (n - 1)), 1, f_max).
    pub beta: f64,
    /// Fanout cap.
    pub f_max: usize,
    /// Intra rounds per inter-group round.
    pub k_group: u64,
    /// Inter-group rounds per inter-cloud round.
    pub k_cloud: u64,
    /// Maximum record age included in an aggregate, in ticks.
    pub staleness_window: Tick,
    /// Small positive offset added to latencies when weighting target
    /// selection, so zero-latency peers don't get infinite weight.
    pub epsilon_latency: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        let t_gossip = 1000;
        ProtocolParams {
            t_gossip,
            beta: 0.1,
            f_max: 5,
            k_group: 5,
            k_cloud: 5,
            staleness_window: 10 * t_gossip,
            epsilon_latency: 0.1,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.t_gossip < 1 {
            return Err("t_gossip must be >= 1".into());
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(format!("beta must be in (0, 1], got {}", self.beta));
        }
        if self.f_max < 1 {
            return Err("f_max must be >= 1".into());
        }
        if self.k_group < 1 || self.k_cloud < 1 {
            return Err("k_group and k_cloud must be >= 1".into());
        }
        if self.staleness_window < 1 {
            return Err("staleness_window must be >= 1".into());
        }
        if !(self.epsilon_latency > 0.0) {
            return Err("epsilon_latency must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    IntraGroup,
    InterGroup,
    InterCloud,
}

#[derive(Debug, Clone)]
pub enum Payload {
    IntraGroup {
        records: Rc<OriginRecordSet>,
        digests: Rc<DigestSet>,
    },
    // the digests are boxed to keep the enum (and with it every queued
    // message) small; inter-tier traffic is orders of magnitude rarer than
    // intra-group rumors
    InterGroup {
        digest: Box<AggregateDigest>,
        digests: Rc<DigestSet>,
    },
    InterCloud {
        digest: Box<AggregateDigest>,
        digests: Rc<DigestSet>,
    },
}

#[derive(Debug, Clone)]
pub struct GossipMessage {
    pub msg_id: u64,
    pub sender: VmId,
    /// Remaining hop budget; meaningful for IntraGroup only.
    pub ttl: i32,
    /// Hop budget the rumor started with, carried so relay depth can be
    /// audited on any copy.
    pub initial_ttl: i32,
    pub payload: Payload,
}

impl GossipMessage {
    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::IntraGroup { .. } => MessageKind::IntraGroup,
            Payload::InterGroup { .. } => MessageKind::InterGroup,
            Payload::InterCloud { .. } => MessageKind::InterCloud,
        }
    }

    pub fn relay_depth(&self) -> i32 {
        self.initial_ttl - self.ttl
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolViolation {
    #[error("message {msg_id} has negative ttl {ttl}")]
    NegativeTtl { msg_id: u64, ttl: i32 },
}

/// Monotone source of message ids, owned by the harness.
#[derive(Debug, Default)]
pub struct MsgIdGen {
    next: u64,
}

impl MsgIdGen {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }
}

/// Fibonacci-multiplicative hasher for message ids; the default SipHash is
/// overkill for sequential u64 keys and shows up in profiles.
#[derive(Debug, Clone, Default)]
pub struct MsgIdHasher(u64);

impl std::hash::Hasher for MsgIdHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 ^ b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        }
    }

    fn write_u64(&mut self, n: u64) {
        self.0 = n.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
}

/// Bounded set of already-processed rumor ids, FIFO-evicted.
#[derive(Debug, Clone, Default)]
pub struct SeenSet {
    ids: HashSet<u64, std::hash::BuildHasherDefault<MsgIdHasher>>,
    order: VecDeque<u64>,
    cap: usize,
}

impl SeenSet {
    pub fn with_capacity(cap: usize) -> Self {
        SeenSet { ids: HashSet::default(), order: VecDeque::new(), cap }
    }

    pub fn contains(&self, id: u64) -> bool {
        self.ids.contains(&id)
    }

    pub fn insert(&mut self, id: u64) {
        if self.ids.insert(id) {
            self.order.push_back(id);
            if self.order.len() > self.cap {
                if let Some(old) = self.order.pop_front() {
                    self.ids.remove(&old);
                }
            }
        }
    }
}

const SEEN_CAPACITY: usize = 8192;

/// Per-VM protocol state.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: VmId,
    pub group: GroupId,
    pub region: RegionId,
    /// Same-group peers with their fixed pairwise latency in ms. Never
    /// contains the node itself.
    pub peers: Vec<(VmId, f64)>,
    /// One contact VM per other group in the region.
    pub group_contacts: BTreeMap<GroupId, VmId>,
    /// One contact VM per other region.
    pub region_contacts: BTreeMap<RegionId, VmId>,
    pub records: OriginRecordSet,
    pub digests: DigestSet,
    /// True while this node is its group's agreed-upon digest emitter.
    pub is_leader: bool,
    /// True while this node leads the region's smallest group.
    pub is_region_leader: bool,
    /// Sequence number for digests this node emits as a leader.
    pub leader_seq: u64,
    seen: SeenSet,
    /// Cumulative selection weights over `peers`, rebuilt lazily; lets the
    /// hot path pick targets by binary search instead of a linear scan.
    peer_prefix: Vec<f64>,
}

impl NodeState {
    pub fn new(id: VmId, group: GroupId, region: RegionId, record_capacity: usize) -> Self {
        NodeState {
            id,
            group,
            region,
            peers: Vec::new(),
            group_contacts: BTreeMap::new(),
            region_contacts: BTreeMap::new(),
            records: OriginRecordSet::with_capacity(record_capacity),
            digests: DigestSet::new(),
            is_leader: false,
            is_region_leader: false,
            leader_seq: 0,
            seen: SeenSet::with_capacity(SEEN_CAPACITY),
            peer_prefix: Vec::new(),
        }
    }

    /// Drop the cached selection weights; call after replacing `peers`.
    pub fn invalidate_peer_cache(&mut self) {
        self.peer_prefix.clear();
    }

    fn ensure_peer_cache(&mut self, epsilon: f64) {
        if self.peer_prefix.len() == self.peers.len() {
            return;
        }
        self.peer_prefix.clear();
        let mut acc = 0.0;
        for (_, lat) in &self.peers {
            acc += 1.0 / (lat + epsilon);
            self.peer_prefix.push(acc);
        }
    }

    /// Weighted sampling without replacement over `peers`, equivalent in
    /// distribution to `select_targets_excluding` but using the cached prefix
    /// sums: each draw binary-searches the cumulative weights and rejected
    /// draws (the excluded sender or an already-chosen peer) renormalise the
    /// remainder implicitly. Falls back to the exact linear scan if rejections
    /// pile up, e.g. when one peer carries nearly all the weight.
    fn select_peers(
        &mut self,
        k: usize,
        exclude: Option<VmId>,
        epsilon: f64,
        rng: &mut impl Rng,
    ) -> Vec<VmId> {
        let n = self.peers.len();
        if k == 0 || n == 0 {
            return Vec::new();
        }
        self.ensure_peer_cache(epsilon);
        let picks = if k < n {
            k
        } else {
            // the membership scan only matters when k could exhaust the peers
            let excluded =
                exclude.map_or(false, |e| self.peers.iter().any(|(p, _)| *p == e)) as usize;
            k.min(n - excluded)
        };
        let total = *self.peer_prefix.last().unwrap();
        let mut chosen = Vec::with_capacity(picks);
        let mut misses = 0usize;
        while chosen.len() < picks {
            let roll = rng.gen::<f64>() * total;
            let idx = self.peer_prefix.partition_point(|&p| p <= roll).min(n - 1);
            let id = self.peers[idx].0;
            if Some(id) == exclude || chosen.contains(&id) {
                misses += 1;
                if misses > 64 {
                    let remaining: Vec<(VmId, f64)> = self
                        .peers
                        .iter()
                        .filter(|(p, _)| Some(*p) != exclude && !chosen.contains(p))
                        .copied()
                        .collect();
                    let rest =
                        select_targets(&remaining, picks - chosen.len(), epsilon, rng);
                    chosen.extend(rest);
                    break;
                }
            } else {
                chosen.push(id);
            }
        }
        chosen
    }

    pub fn group_size(&self) -> usize {
        self.peers.len() + 1
    }

    /// Record a local usage sample stamped `now`.
    pub fn on_local_sample(&mut self, usage: ResourceUsage, now: Tick) {
        debug_assert!(usage.validate().is_ok());
        self.records.insert(UsageRecord { origin: self.id, stamp: now, usage });
    }

    /// Intra-group gossip round: push own records and digests to
    /// fanout-many latency-preferred peers.
    pub fn on_timer_intra(
        &mut self,
        rng: &mut impl Rng,
        params: &ProtocolParams,
        ids: &mut MsgIdGen,
    ) -> Vec<(VmId, GossipMessage)> {
        let k = fanout(self.group_size(), params);
        if k == 0 {
            return Vec::new();
        }
        let targets = self.select_peers(k, None, params.epsilon_latency, rng);
        if targets.is_empty() {
            return Vec::new();
        }
        let ttl = intra_ttl(self.group_size());
        let msg_id = ids.next_id();
        self.seen.insert(msg_id);
        let records = Rc::new(self.records.clone());
        let digests = Rc::new(self.digests.clone());
        targets
            .into_iter()
            .map(|t| {
                (
                    t,
                    GossipMessage {
                        msg_id,
                        sender: self.id,
                        ttl,
                        initial_ttl: ttl,
                        payload: Payload::IntraGroup {
                            records: Rc::clone(&records),
                            digests: Rc::clone(&digests),
                        },
                    },
                )
            })
            .collect()
    }

    /// Merge an incoming message and, for intra-group rumors that carried
    /// news, relay a copy with a decremented hop budget.
    pub fn on_receive(
        &mut self,
        msg: &GossipMessage,
        rng: &mut impl Rng,
        params: &ProtocolParams,
    ) -> Result<Vec<(VmId, GossipMessage)>, ProtocolViolation> {
        if msg.ttl < 0 {
            return Err(ProtocolViolation::NegativeTtl { msg_id: msg.msg_id, ttl: msg.ttl });
        }
        match &msg.payload {
            Payload::IntraGroup { records, digests } => {
                // A duplicate msg_id carries a payload merged before, and both
                // merges are idempotent, so duplicates are pure no-ops.
                if self.seen.contains(msg.msg_id) {
                    return Ok(Vec::new());
                }
                self.seen.insert(msg.msg_id);
                let records_changed = self.records.merge_from(records);
                self.digests.merge_from(digests);
                if !records_changed || msg.ttl == 0 {
                    return Ok(Vec::new());
                }
                let k = fanout(self.group_size(), params);
                let targets =
                    self.select_peers(k, Some(msg.sender), params.epsilon_latency, rng);
                Ok(targets
                    .into_iter()
                    .map(|t| {
                        (
                            t,
                            GossipMessage {
                                msg_id: msg.msg_id,
                                sender: self.id,
                                ttl: msg.ttl - 1,
                                initial_ttl: msg.initial_ttl,
                                payload: msg.payload.clone(),
                            },
                        )
                    })
                    .collect())
            }
            Payload::InterGroup { digest, digests } => {
                self.digests.insert(**digest);
                self.digests.merge_from(digests);
                Ok(Vec::new())
            }
            Payload::InterCloud { digest, digests } => {
                self.digests.insert(**digest);
                self.digests.merge_from(digests);
                Ok(Vec::new())
            }
        }
    }

    /// Leader-only: recompute the group digest from current records and keep
    /// it in the local digest view with a bumped sequence number. Runs every
    /// intra round so the leader's own view never lags its own group.
    pub fn refresh_local_digest(
        &mut self,
        now: Tick,
        params: &ProtocolParams,
    ) -> Option<AggregateDigest> {
        if !self.is_leader {
            return None;
        }
        let digest = compute_aggregate(
            &self.records,
            now,
            params.staleness_window,
            Scope::Group(self.group),
            self.leader_seq + 1,
        )?;
        self.leader_seq += 1;
        self.digests.insert(digest);
        Some(digest)
    }

    /// Region-leader-only: combine every group digest currently held for the
    /// own region into a region digest and keep it locally.
    pub fn refresh_region_digest(&mut self) -> Option<AggregateDigest> {
        if !self.is_region_leader {
            return None;
        }
        let parts: Vec<&AggregateDigest> = self
            .digests
            .group_digests
            .iter()
            .filter(|(g, _)| g.region == self.region)
            .map(|(_, d)| d)
            .collect();
        let digest = combine_digests(parts, Scope::Region(self.region), self.leader_seq + 1)?;
        self.leader_seq += 1;
        self.digests.insert(digest);
        Some(digest)
    }

    /// Inter-group round: the group leader summarises its group's records and
    /// sends the digest (plus its full digest view, piggybacked) to every
    /// other group's contact in the region.
    pub fn on_timer_inter_group(
        &mut self,
        now: Tick,
        params: &ProtocolParams,
        ids: &mut MsgIdGen,
    ) -> Vec<(VmId, GossipMessage)> {
        let digest = match self.refresh_local_digest(now, params) {
            Some(d) => d,
            None => return Vec::new(),
        };
        let piggyback = Rc::new(self.digests.clone());
        self.group_contacts
            .iter()
            .filter(|(g, _)| g.region == self.region)
            .map(|(_, contact)| {
                (
                    *contact,
                    GossipMessage {
                        msg_id: ids.next_id(),
                        sender: self.id,
                        ttl: 0,
                        initial_ttl: 0,
                        payload: Payload::InterGroup {
                            digest: Box::new(digest),
                            digests: Rc::clone(&piggyback),
                        },
                    },
                )
            })
            .collect()
    }

    /// Inter-cloud round: the region leader combines every group digest it
    /// currently holds for its region and sends the region digest to every
    /// other region's contact.
    pub fn on_timer_inter_cloud(&mut self, ids: &mut MsgIdGen) -> Vec<(VmId, GossipMessage)> {
        let digest = match self.refresh_region_digest() {
            Some(d) => d,
            None => return Vec::new(),
        };
        // Piggyback the full digest set so group-level digests cross region
        // boundaries too; a region digest alone would leave remote VMs blind
        // to this region's groups.
        let piggyback = Rc::new(self.digests.clone());
        self.region_contacts
            .iter()
            .map(|(_, contact)| {
                (
                    *contact,
                    GossipMessage {
                        msg_id: ids.next_id(),
                        sender: self.id,
                        ttl: 0,
                        initial_ttl: 0,
                        payload: Payload::InterCloud {
                            digest: Box::new(digest),
                            digests: Rc::clone(&piggyback),
                        },
                    },
                )
            })
            .collect()
    }
}

/// Gossip fanout: zero for a singleton group, otherwise
/// clamp(ceil(beta * (n - 1)), 1, f_max).
pub fn fanout(group_size: usize, params: &ProtocolParams) -> usize {
    if group_size <= 1 {
        return 0;
    }
    let raw = (params.beta * (group_size - 1) as f64).ceil() as usize;
    raw.clamp(1, params.f_max)
}

/// Hop budget for intra-group rumors: ceil(log2(n)), at least 1.
pub fn intra_ttl(group_size: usize) -> i32 {
    let ttl = (group_size.max(2) as f64).log2().ceil() as i32;
    ttl.max(1)
}

/// Sample min(k, |peers|) distinct peers without replacement, each draw
/// weighted by 1 / (latency + epsilon).
pub fn select_targets(
    peers: &[(VmId, f64)],
    k: usize,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Vec<VmId> {
    select_targets_excluding(peers, None, k, epsilon, rng)
}

/// `select_targets` with one peer masked out, so relays can skip the sender
/// without materialising a filtered peer list.
pub fn select_targets_excluding(
    peers: &[(VmId, f64)],
    exclude: Option<VmId>,
    k: usize,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Vec<VmId> {
    if k == 0 || peers.is_empty() {
        return Vec::new();
    }
    let mut weights = Vec::with_capacity(peers.len());
    let mut remaining = Vec::with_capacity(peers.len());
    for (i, (id, lat)) in peers.iter().enumerate() {
        if Some(*id) != exclude {
            weights.push(1.0 / (lat + epsilon));
            remaining.push(i);
        }
    }
    let picks = k.min(remaining.len());
    let mut chosen = Vec::with_capacity(picks);
    for _ in 0..picks {
        let total: f64 = weights.iter().sum();
        let mut roll = rng.gen::<f64>() * total;
        let mut take = remaining.len() - 1;
        for (pos, w) in weights.iter().enumerate() {
            roll -= w;
            if roll <= 0.0 {
                take = pos;
                break;
            }
        }
        chosen.push(peers[remaining[take]].0);
        remaining.swap_remove(take);
        weights.swap_remove(take);
    }
    chosen
}

/// The agreed-upon digest emitter for a group: minimum VmId among members
/// believed alive.
pub fn elect_group_leader(members: impl IntoIterator<Item = VmId>) -> Option<VmId> {
    members.into_iter().min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn params() -> ProtocolParams {
        ProtocolParams::default()
    }

    fn usage(cpu: f64) -> ResourceUsage {
        ResourceUsage { cpu_pct: cpu, mem_pct: 10.0, disk_pct: 10.0, net_kbps: 10.0 }
    }

    fn group0() -> GroupId {
        GroupId { region: RegionId(0), index: 0 }
    }

    fn node(id: u32, peers: &[u32]) -> NodeState {
        let mut n = NodeState::new(VmId(id), group0(), RegionId(0), 16);
        n.peers = peers.iter().map(|p| (VmId(*p), 1.0)).collect();
        n
    }

    #[test]
    fn fanout_examples() {
        let p = params();
        assert_eq!(fanout(1, &p), 0);
        assert_eq!(fanout(21, &p), 2);
        assert_eq!(fanout(200, &p), 5);
        assert_eq!(fanout(2, &p), 1);
    }

    #[test]
    fn intra_ttl_examples() {
        assert_eq!(intra_ttl(21), 5);
        assert_eq!(intra_ttl(16), 4);
        assert_eq!(intra_ttl(2), 1);
        assert_eq!(intra_ttl(1), 1);
    }

    #[test]
    fn select_targets_zero_and_exhaustion() {
        let peers = vec![(VmId(1), 1.0), (VmId(2), 2.0), (VmId(3), 3.0)];
        let mut rng = StdRng::seed_from_u64(1);
        assert!(select_targets(&peers, 0, 0.1, &mut rng).is_empty());
        let mut all = select_targets(&peers, 10, 0.1, &mut rng);
        all.sort();
        assert_eq!(all, vec![VmId(1), VmId(2), VmId(3)]);
    }

    #[test]
    fn select_targets_prefers_low_latency() {
        // weights 1/(0.9+0.1) = 1 and 1/(99.9+0.1) = 0.01, ratio 100:1;
        // expected pick rate for the fast peer is 100/101.
        let peers = vec![(VmId(1), 0.9), (VmId(2), 99.9)];
        let mut rng = StdRng::seed_from_u64(42);
        let draws = 10_000;
        let fast = (0..draws)
            .filter(|_| select_targets(&peers, 1, 0.1, &mut rng) == vec![VmId(1)])
            .count() as f64;
        let p = 100.0 / 101.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((fast - draws as f64 * p).abs() <= 3.0 * sigma, "fast picked {fast} times");
    }

    #[test]
    fn local_sample_first_and_monotone() {
        let mut n = node(0, &[1]);
        n.on_local_sample(usage(40.0), 1);
        assert_eq!(n.records.len(), 1);
        assert_eq!(n.records.get(VmId(0)).unwrap().stamp, 1);
        n.on_local_sample(usage(50.0), 7);
        assert_eq!(n.records.get(VmId(0)).unwrap().stamp, 7);
    }

    #[test]
    fn peer_merge_keeps_newer_own_record() {
        let mut n = node(0, &[1]);
        n.on_local_sample(usage(40.0), 9);
        let mut stale = OriginRecordSet::new();
        stale.insert(UsageRecord { origin: VmId(0), stamp: 3, usage: usage(99.0) });
        n.records.merge_from(&stale);
        assert_eq!(n.records.get(VmId(0)).unwrap().stamp, 9);
        assert_eq!(n.records.get(VmId(0)).unwrap().usage.cpu_pct, 40.0);
    }

    #[test]
    fn singleton_group_sends_nothing() {
        let mut n = node(0, &[]);
        n.on_local_sample(usage(1.0), 1);
        let mut rng = StdRng::seed_from_u64(1);
        let mut ids = MsgIdGen::new();
        assert!(n.on_timer_intra(&mut rng, &params(), &mut ids).is_empty());
    }

    #[test]
    fn intra_round_message_count_and_ttl() {
        let peers: Vec<u32> = (1..21).collect();
        let mut n = node(0, &peers);
        n.on_local_sample(usage(1.0), 1);
        let mut rng = StdRng::seed_from_u64(1);
        let mut ids = MsgIdGen::new();
        let out = n.on_timer_intra(&mut rng, &params(), &mut ids);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|(_, m)| m.ttl == 5));
        assert!(out.iter().all(|(_, m)| m.kind() == MessageKind::IntraGroup));
        // one rumor id shared by the burst
        assert_eq!(out[0].1.msg_id, out[1].1.msg_id);
    }

    fn intra_msg(msg_id: u64, sender: u32, ttl: i32, records: OriginRecordSet) -> GossipMessage {
        GossipMessage {
            msg_id,
            sender: VmId(sender),
            ttl,
            initial_ttl: ttl,
            payload: Payload::IntraGroup {
                records: Rc::new(records),
                digests: Rc::new(DigestSet::new()),
            },
        }
    }

    #[test]
    fn duplicate_msg_id_suppressed() {
        let mut n = node(0, &[1, 2, 3]);
        let mut rng = StdRng::seed_from_u64(1);
        let mut payload = OriginRecordSet::new();
        payload.insert(UsageRecord { origin: VmId(1), stamp: 5, usage: usage(2.0) });
        let msg = intra_msg(77, 1, 3, payload);
        let first = n.on_receive(&msg, &mut rng, &params()).unwrap();
        assert!(!first.is_empty());
        let before = n.records.clone();
        let second = n.on_receive(&msg, &mut rng, &params()).unwrap();
        assert!(second.is_empty());
        assert_eq!(n.records, before);
    }

    #[test]
    fn ttl_zero_updates_but_never_forwards() {
        let mut n = node(0, &[1, 2, 3]);
        let mut rng = StdRng::seed_from_u64(1);
        let mut payload = OriginRecordSet::new();
        payload.insert(UsageRecord { origin: VmId(1), stamp: 5, usage: usage(2.0) });
        let out = n.on_receive(&intra_msg(1, 1, 0, payload), &mut rng, &params()).unwrap();
        assert!(out.is_empty());
        assert_eq!(n.records.len(), 1);
    }

    #[test]
    fn no_news_means_no_forward() {
        let mut n = node(0, &[1, 2]);
        n.on_local_sample(usage(1.0), 10);
        let mut rng = StdRng::seed_from_u64(1);
        let mut stale = OriginRecordSet::new();
        stale.insert(UsageRecord { origin: VmId(0), stamp: 2, usage: usage(9.0) });
        let out = n.on_receive(&intra_msg(5, 1, 3, stale), &mut rng, &params()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn negative_ttl_rejected_without_state_change() {
        let mut n = node(0, &[1]);
        let mut rng = StdRng::seed_from_u64(1);
        let mut payload = OriginRecordSet::new();
        payload.insert(UsageRecord { origin: VmId(1), stamp: 5, usage: usage(2.0) });
        let mut msg = intra_msg(1, 1, 1, payload);
        msg.ttl = -1;
        let before = n.records.clone();
        assert_eq!(
            n.on_receive(&msg, &mut rng, &params()).unwrap_err(),
            ProtocolViolation::NegativeTtl { msg_id: 1, ttl: -1 }
        );
        assert_eq!(n.records, before);
    }

    #[test]
    fn two_hop_relay_hand_trace() {
        // a initiates to b with ttl 2; b learns something new and forwards to
        // its only fresh peer c with ttl 1; c holds the record afterwards.
        let mut rng = StdRng::seed_from_u64(1);
        let mut ids = MsgIdGen::new();
        let p = params();

        let mut a = node(0, &[1, 2]);
        a.on_local_sample(usage(33.0), 4);
        let burst = a.on_timer_intra(&mut rng, &p, &mut ids);
        let (_, msg) = &burst[0];
        let mut towards_b = msg.clone();
        towards_b.ttl = 2;
        towards_b.initial_ttl = 2;

        let mut b = node(1, &[0, 2]);
        let forwards = b.on_receive(&towards_b, &mut rng, &p).unwrap();
        assert_eq!(forwards.len(), 1);
        let (fw_target, fw_msg) = &forwards[0];
        assert_eq!(*fw_target, VmId(2));
        assert_eq!(fw_msg.ttl, 1);
        assert_eq!(fw_msg.sender, VmId(1));
        assert_eq!(fw_msg.msg_id, towards_b.msg_id);

        let mut c = node(2, &[0, 1]);
        c.on_receive(fw_msg, &mut rng, &p).unwrap();
        assert_eq!(c.records.get(VmId(0)).unwrap().usage.cpu_pct, 33.0);
    }

    #[test]
    fn leader_election_is_min_id() {
        assert_eq!(elect_group_leader([VmId(7)]), Some(VmId(7)));
        assert_eq!(elect_group_leader([VmId(3), VmId(9), VmId(1)]), Some(VmId(1)));
        assert_eq!(elect_group_leader([VmId(3), VmId(9)]), Some(VmId(3)));
        assert_eq!(elect_group_leader([]), None);
    }

    fn leader_node(id: u32, other_groups: &[u16]) -> NodeState {
        let mut n = node(id, &[id + 1]);
        n.is_leader = true;
        for idx in other_groups {
            n.group_contacts
                .insert(GroupId { region: RegionId(0), index: *idx }, VmId(100 + *idx as u32));
        }
        n
    }

    #[test]
    fn non_leader_emits_no_inter_group() {
        let mut n = leader_node(0, &[1, 2, 3]);
        n.is_leader = false;
        n.on_local_sample(usage(1.0), 1);
        let mut ids = MsgIdGen::new();
        assert!(n.on_timer_inter_group(1, &params(), &mut ids).is_empty());
    }

    #[test]
    fn leader_targets_every_other_group() {
        let mut n = leader_node(0, &[1, 2, 3]);
        n.on_local_sample(usage(1.0), 1);
        let mut ids = MsgIdGen::new();
        let out = n.on_timer_inter_group(1, &params(), &mut ids);
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|(_, m)| m.kind() == MessageKind::InterGroup));
    }

    #[test]
    fn consecutive_firings_increment_seq() {
        let mut n = leader_node(0, &[1]);
        n.on_local_sample(usage(1.0), 1);
        let mut ids = MsgIdGen::new();
        let first = n.on_timer_inter_group(1, &params(), &mut ids);
        let second = n.on_timer_inter_group(2, &params(), &mut ids);
        let seq = |msgs: &[(VmId, GossipMessage)]| match &msgs[0].1.payload {
            Payload::InterGroup { digest, .. } => digest.seq,
            _ => unreachable!(),
        };
        assert!(seq(&second) > seq(&first));
    }

    #[test]
    fn leader_without_fresh_records_stays_silent() {
        let mut n = leader_node(0, &[1]);
        let mut ids = MsgIdGen::new();
        assert!(n.on_timer_inter_group(1, &params(), &mut ids).is_empty());
        assert_eq!(n.leader_seq, 0);
    }

    fn region_leader(regions: &[u16]) -> NodeState {
        let mut n = node(0, &[1]);
        n.is_leader = true;
        n.is_region_leader = true;
        for r in regions {
            n.region_contacts.insert(RegionId(*r), VmId(1000 + *r as u32));
        }
        n
    }

    fn group_digest(region: u16, index: u16, contributing: u64) -> AggregateDigest {
        AggregateDigest {
            scope: Scope::Group(GroupId { region: RegionId(region), index }),
            seq: 1,
            contributing,
            cpu: crate::model::MetricStats::singleton(10.0),
            mem: crate::model::MetricStats::singleton(10.0),
            disk: crate::model::MetricStats::singleton(10.0),
            net: crate::model::MetricStats::singleton(10.0),
            freshest: 1,
        }
    }

    #[test]
    fn region_leader_targets_every_other_region() {
        let mut n = region_leader(&[1, 2]);
        n.digests.insert(group_digest(0, 0, 4));
        let mut ids = MsgIdGen::new();
        let out = n.on_timer_inter_cloud(&mut ids);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|(_, m)| m.kind() == MessageKind::InterCloud));
    }

    #[test]
    fn region_digest_covers_only_held_groups() {
        let mut n = region_leader(&[1]);
        n.digests.insert(group_digest(0, 0, 4));
        n.digests.insert(group_digest(0, 2, 3));
        // digest from another region must not leak into this region's summary
        n.digests.insert(group_digest(1, 0, 50));
        let mut ids = MsgIdGen::new();
        let out = n.on_timer_inter_cloud(&mut ids);
        match &out[0].1.payload {
            Payload::InterCloud { digest, .. } => {
                assert_eq!(digest.scope, Scope::Region(RegionId(0)));
                assert_eq!(digest.contributing, 7);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn non_region_leader_emits_no_inter_cloud() {
        let mut n = region_leader(&[1]);
        n.is_region_leader = false;
        n.digests.insert(group_digest(0, 0, 4));
        let mut ids = MsgIdGen::new();
        assert!(n.on_timer_inter_cloud(&mut ids).is_empty());
    }
}
