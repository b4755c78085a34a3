//! The single-threaded deterministic event loop.
//!
//! All randomness flows through one seeded generator; events are processed in
//! (tick, insertion sequence) order, so a (scenario, seed) pair maps to
//! exactly one trace. One tick is one millisecond; message delivery lands at
//! send tick + latency rounded to ticks (minimum one tick). Drops are decided
//! at send time from the pair's loss class.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{GroupId, RegionId, ResourceUsage, Tick, VmId};
use crate::protocol::{elect_group_leader, GossipMessage, MessageKind, MsgIdGen, NodeState};
use crate::report::{convergence_round, MetricsReport, RoundCounts};
use crate::scenario::{ChurnAction, ConfigError, Scenario, Scheme};
use crate::sim::topology::{build_topology, cluster_vector, Topology, VmDescriptor};
use crate::sim::{Conservation, EventKind, KindCounts, RoundSnapshot, TraceEvent, VmCoverage};

#[derive(Debug)]
enum Ev {
    Timer(VmId),
    Deliver { to: VmId, msg: GossipMessage },
    CentralCycle,
    Churn(usize),
}

struct Scheduled {
    tick: Tick,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.tick == other.tick && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // reversed so the BinaryHeap pops the earliest (tick, seq) first
    fn cmp(&self, other: &Self) -> Ordering {
        (other.tick, other.seq).cmp(&(self.tick, self.seq))
    }
}

/// Everything one run produces. `final_states` and `final_usages` exist so
/// tests can check node views against direct recomputation.
#[derive(Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub snapshots: Vec<RoundSnapshot>,
    pub trace: Option<Vec<TraceEvent>>,
    pub conservation: Conservation,
    pub ttl_violations: u64,
    pub protocol_violations: u64,
    pub final_states: Vec<NodeState>,
    pub final_usages: Vec<ResourceUsage>,
    pub alive: Vec<bool>,
    pub topology: Topology,
}

struct Workload {
    values: Vec<ResourceUsage>,
    freeze_tick: Option<Tick>,
    pct_step: f64,
    net_step: f64,
}

impl Workload {
    fn init_one(rng: &mut impl Rng) -> ResourceUsage {
        ResourceUsage {
            cpu_pct: rng.gen_range(10.0..90.0),
            mem_pct: rng.gen_range(10.0..90.0),
            disk_pct: rng.gen_range(10.0..90.0),
            net_kbps: rng.gen_range(0.0..1000.0),
        }
    }

    fn step(&mut self, vm: VmId, now: Tick, rng: &mut impl Rng) -> ResourceUsage {
        let frozen = self.freeze_tick.map_or(false, |f| now >= f);
        let v = &mut self.values[vm.0 as usize];
        if !frozen {
            let s = self.pct_step;
            v.cpu_pct = (v.cpu_pct + rng.gen_range(-s..s)).clamp(0.0, 100.0);
            v.mem_pct = (v.mem_pct + rng.gen_range(-s..s)).clamp(0.0, 100.0);
            v.disk_pct = (v.disk_pct + rng.gen_range(-s..s)).clamp(0.0, 100.0);
            let ns = self.net_step;
            v.net_kbps = (v.net_kbps + rng.gen_range(-ns..ns)).max(0.0);
        }
        *v
    }
}

struct Engine {
    scenario: Scenario,
    topology: Topology,
    nodes: Vec<NodeState>,
    alive: Vec<bool>,
    rounds_fired: Vec<u64>,
    workload: Workload,
    rng: ChaCha8Rng,
    ids: MsgIdGen,
    heap: BinaryHeap<Scheduled>,
    /// Ring of per-tick delivery queues. Message delays are bounded by the
    /// latency model, so deliveries never need the heap; each bucket holds
    /// `(seq, event)` pairs already in insertion (= seq) order.
    wheel: Vec<Vec<(u64, Ev)>>,
    wheel_mask: usize,
    wheel_pending: usize,
    next_seq: u64,
    period: Tick,
    /// Round the loop is currently in, maintained at boundaries so the send
    /// path avoids a division per message.
    current_round: usize,
    counts: Vec<RoundCounts>,
    conservation: Conservation,
    ttl_violations: u64,
    protocol_violations: u64,
    trace: Option<Vec<TraceEvent>>,
    snapshots: Vec<RoundSnapshot>,
}

pub fn run(scenario: &Scenario, record_trace: bool) -> Result<RunOutput, ConfigError> {
    scenario.validate()?;
    let mut engine = Engine::build(scenario.clone(), record_trace)?;
    engine.run_loop();
    Ok(engine.finish())
}

impl Engine {
    fn build(scenario: Scenario, record_trace: bool) -> Result<Engine, ConfigError> {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let topology = build_topology(&scenario, &mut rng)?;
        let n = topology.population();
        let period = if scenario.scheme == Scheme::Central {
            scenario.centralized.t_poll
        } else {
            scenario.protocol.t_gossip
        };

        let workload = Workload {
            values: (0..n).map(|_| Workload::init_one(&mut rng)).collect(),
            freeze_tick: scenario.workload.freeze_round.map(|r| r * period),
            pct_step: scenario.workload.pct_step,
            net_step: scenario.workload.net_step,
        };

        // every delivery delay fits in the wheel: delay = max(1, round(lat))
        // and lat never exceeds the largest range bound
        let max_delay = scenario
            .latency
            .intra_group_ms
            .iter()
            .chain(&scenario.latency.intra_region_ms)
            .chain(&scenario.latency.inter_region_ms)
            .fold(1.0f64, |a, b| a.max(*b));
        let wheel_size = ((max_delay.round() as usize) + 2).next_power_of_two();

        let mut engine = Engine {
            counts: (0..scenario.rounds)
                .map(|round| RoundCounts { round, ..RoundCounts::default() })
                .collect(),
            nodes: Vec::new(),
            alive: vec![true; n],
            rounds_fired: vec![0; n],
            workload,
            ids: MsgIdGen::new(),
            heap: BinaryHeap::new(),
            wheel: (0..wheel_size).map(|_| Vec::new()).collect(),
            wheel_mask: wheel_size - 1,
            wheel_pending: 0,
            next_seq: 0,
            current_round: 0,
            period,
            conservation: Conservation::default(),
            ttl_violations: 0,
            protocol_violations: 0,
            trace: record_trace.then(Vec::new),
            snapshots: Vec::new(),
            scenario,
            topology,
            rng,
        };

        // Churn first so a boundary-tick leave beats that round's timers.
        for idx in 0..engine.scenario.churn.len() {
            let tick = engine.scenario.churn[idx].round * engine.period;
            engine.schedule(tick, Ev::Churn(idx));
        }

        if engine.scenario.scheme == Scheme::Central {
            engine.schedule(0, Ev::CentralCycle);
        } else {
            for vm in 0..n as u32 {
                engine.nodes.push(NodeState::new(
                    VmId(vm),
                    engine.topology.group_of(VmId(vm)),
                    engine.topology.region_of(VmId(vm)),
                    n,
                ));
            }
            engine.rebuild_membership_views();
            for vm in 0..n as u32 {
                let offset = engine.rng.gen_range(0..engine.period);
                engine.schedule(offset, Ev::Timer(VmId(vm)));
            }
        }
        Ok(engine)
    }

    fn schedule(&mut self, tick: Tick, ev: Ev) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { tick, seq, ev });
    }

    /// Queue a delivery `delay` ticks ahead. Requires 1 <= delay < wheel
    /// size, which `build` guarantees from the latency ranges; within that
    /// window every bucket holds events of a single tick.
    fn schedule_delivery(&mut self, now: Tick, delay: Tick, ev: Ev) {
        debug_assert!(delay >= 1 && (delay as usize) < self.wheel.len());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.wheel[(now + delay) as usize & self.wheel_mask].push((seq, ev));
        self.wheel_pending += 1;
    }

    /// Recompute peers, leader flags and contacts from the current alive set.
    /// Membership changes are assumed globally visible (consistent view).
    fn rebuild_membership_views(&mut self) {
        let mut leaders: BTreeMap<GroupId, VmId> = BTreeMap::new();
        for (gid, members) in &self.topology.groups {
            let alive_members = members.iter().copied().filter(|m| self.alive[m.0 as usize]);
            if let Some(leader) = elect_group_leader(alive_members) {
                leaders.insert(*gid, leader);
            }
        }
        // region leader: leader of the smallest group in the region that
        // still has alive members
        let mut region_leaders: BTreeMap<RegionId, VmId> = BTreeMap::new();
        for (gid, leader) in &leaders {
            region_leaders.entry(gid.region).or_insert(*leader);
        }

        for node in &mut self.nodes {
            if !self.alive[node.id.0 as usize] {
                continue;
            }
            let gid = self.topology.group_of(node.id);
            node.peers = self.topology.groups[&gid]
                .iter()
                .copied()
                .filter(|m| *m != node.id && self.alive[m.0 as usize])
                .map(|m| (m, self.topology.latency(node.id, m)))
                .collect();
            node.invalidate_peer_cache();
            node.is_leader = leaders.get(&gid) == Some(&node.id);
            node.is_region_leader =
                node.is_leader && region_leaders.get(&node.region) == Some(&node.id);
            node.group_contacts = leaders
                .iter()
                .filter(|(g, _)| **g != gid && g.region == node.region)
                .map(|(g, l)| (*g, *l))
                .collect();
            node.region_contacts = region_leaders
                .iter()
                .filter(|(r, _)| **r != node.region)
                .map(|(r, l)| (*r, *l))
                .collect();
        }
    }

    fn run_loop(&mut self) {
        let end = self.scenario.rounds * self.period;
        let mut next_boundary = self.period;
        let mut round_cursor = 1;
        let mut bucket = Vec::new();
        for now in 0..end {
            if now == next_boundary && round_cursor <= self.scenario.rounds {
                self.take_snapshot(round_cursor);
                round_cursor += 1;
                next_boundary += self.period;
            }
            if now % self.period == 0 {
                self.current_round = self.round_of(now);
            }
            let slot = now as usize & self.wheel_mask;
            if !self.wheel[slot].is_empty() {
                std::mem::swap(&mut bucket, &mut self.wheel[slot]);
                self.wheel_pending -= bucket.len();
            }
            // merge this tick's deliveries (seq-sorted by construction) with
            // any heap events due now, preserving global (tick, seq) order
            let mut deliveries = bucket.drain(..).peekable();
            loop {
                let wheel_seq = deliveries.peek().map(|(s, _)| *s);
                let heap_seq =
                    self.heap.peek().filter(|h| h.tick <= now).map(|h| h.seq);
                let from_heap = match (wheel_seq, heap_seq) {
                    (None, None) => break,
                    (Some(w), Some(h)) => h < w,
                    (None, Some(_)) => true,
                    (Some(_), None) => false,
                };
                let ev = if from_heap {
                    self.heap.pop().unwrap().ev
                } else {
                    deliveries.next().unwrap().1
                };
                match ev {
                    Ev::Timer(vm) => self.on_timer(vm, now),
                    Ev::Deliver { to, msg } => self.on_deliver(to, msg, now),
                    Ev::CentralCycle => self.on_central_cycle(now),
                    Ev::Churn(idx) => self.on_churn(idx),
                }
            }
            drop(deliveries);
        }
        while round_cursor <= self.scenario.rounds {
            self.take_snapshot(round_cursor);
            round_cursor += 1;
        }
        // whatever is still queued at `end` was never dispatched; count the
        // undelivered messages as in flight
        let mut in_flight = [0u64; 3];
        for (_, ev) in self.wheel.iter().flatten() {
            if let Ev::Deliver { msg, .. } = ev {
                in_flight[msg.kind() as usize] += 1;
            }
        }
        for item in self.heap.iter() {
            if let Ev::Deliver { msg, .. } = &item.ev {
                in_flight[msg.kind() as usize] += 1;
            }
        }
        for (kind, count) in
            [MessageKind::IntraGroup, MessageKind::InterGroup, MessageKind::InterCloud]
                .into_iter()
                .zip(in_flight)
        {
            self.conservation_for(kind).in_flight = count;
        }
    }

    fn conservation_for(&mut self, kind: MessageKind) -> &mut KindCounts {
        match kind {
            MessageKind::IntraGroup => &mut self.conservation.intra_group,
            MessageKind::InterGroup => &mut self.conservation.inter_group,
            MessageKind::InterCloud => &mut self.conservation.inter_cloud,
        }
    }

    fn round_of(&self, tick: Tick) -> usize {
        ((tick / self.period).min(self.scenario.rounds - 1)) as usize
    }

    // lazy so the hot path never builds a TraceEvent while tracing is off
    fn push_trace(&mut self, ev: impl FnOnce() -> TraceEvent) {
        if let Some(trace) = &mut self.trace {
            trace.push(ev());
        }
    }

    fn on_timer(&mut self, vm: VmId, now: Tick) {
        if !self.alive[vm.0 as usize] {
            return;
        }
        let round = self.rounds_fired[vm.0 as usize];
        self.rounds_fired[vm.0 as usize] += 1;
        self.push_trace(|| TraceEvent {
            tick: now,
            kind: EventKind::Timer,
            node: vm.0,
            msg_kind: None,
            msg_id: None,
            ttl: None,
            initial_ttl: None,
        });

        let usage = self.workload.step(vm, now, &mut self.rng);
        self.push_trace(|| TraceEvent {
            tick: now,
            kind: EventKind::Sample,
            node: vm.0,
            msg_kind: None,
            msg_id: None,
            ttl: None,
            initial_ttl: None,
        });
        let node = &mut self.nodes[vm.0 as usize];
        node.on_local_sample(usage, now);
        node.refresh_local_digest(now, &self.scenario.protocol);
        node.refresh_region_digest();

        let burst = node.on_timer_intra(&mut self.rng, &self.scenario.protocol, &mut self.ids);
        for (to, msg) in burst {
            self.send(vm, to, msg, now, false);
        }

        if self.scenario.scheme == Scheme::Layered && round > 0 {
            let (k_group, k_cloud) = (self.scenario.protocol.k_group, self.scenario.protocol.k_cloud);
            if round % k_group == 0 {
                let msgs = self.nodes[vm.0 as usize].on_timer_inter_group(
                    now,
                    &self.scenario.protocol,
                    &mut self.ids,
                );
                for (to, msg) in msgs {
                    self.send(vm, to, msg, now, false);
                }
                if round % (k_group * k_cloud) == 0 {
                    let msgs = self.nodes[vm.0 as usize].on_timer_inter_cloud(&mut self.ids);
                    for (to, msg) in msgs {
                        self.send(vm, to, msg, now, false);
                    }
                }
            }
        }

        if round + 1 < self.scenario.rounds {
            self.schedule(now + self.period, Ev::Timer(vm));
        }
    }

    fn send(&mut self, from: VmId, to: VmId, msg: GossipMessage, now: Tick, forwarded: bool) {
        let round = self.current_round;
        let kind = msg.kind();
        if msg.ttl < 0 || msg.relay_depth() > msg.initial_ttl {
            self.ttl_violations += 1;
        }
        let tier = match kind {
            MessageKind::IntraGroup => &mut self.counts[round].intra_group,
            MessageKind::InterGroup => &mut self.counts[round].inter_group,
            MessageKind::InterCloud => &mut self.counts[round].inter_cloud,
        };
        if forwarded {
            tier.forwarded += 1;
        } else {
            tier.initiated += 1;
        }
        self.conservation_for(kind).sends += 1;
        self.push_trace(|| TraceEvent {
            tick: now,
            kind: EventKind::Send,
            node: from.0,
            msg_kind: Some(kind_label(kind)),
            msg_id: Some(msg.msg_id),
            ttl: Some(msg.ttl),
            initial_ttl: Some(msg.initial_ttl),
        });

        let class = self.topology.pair_class(from, to);
        let loss = self.scenario.latency.loss(class);
        if self.rng.gen::<f64>() < loss {
            self.record_drop(to, msg.msg_id, kind, now);
            return;
        }
        // latency is strictly positive, so +0.5-then-truncate is round()
        let delay = ((self.topology.latency(from, to) + 0.5) as Tick).max(1);
        self.schedule_delivery(now, delay, Ev::Deliver { to, msg });
    }

    fn record_drop(&mut self, to: VmId, msg_id: u64, kind: MessageKind, now: Tick) {
        let round = self.current_round;
        let tier = match kind {
            MessageKind::IntraGroup => &mut self.counts[round].intra_group,
            MessageKind::InterGroup => &mut self.counts[round].inter_group,
            MessageKind::InterCloud => &mut self.counts[round].inter_cloud,
        };
        tier.dropped += 1;
        self.conservation_for(kind).drops += 1;
        self.push_trace(|| TraceEvent {
            tick: now,
            kind: EventKind::Drop,
            node: to.0,
            msg_kind: Some(kind_label(kind)),
            msg_id: Some(msg_id),
            ttl: None,
            initial_ttl: None,
        });
    }

    fn on_deliver(&mut self, to: VmId, msg: GossipMessage, now: Tick) {
        if !self.alive[to.0 as usize] {
            // addressed to a departed VM; lost on arrival
            self.record_drop(to, msg.msg_id, msg.kind(), now);
            return;
        }
        self.conservation_for(msg.kind()).delivers += 1;
        self.push_trace(|| TraceEvent {
            tick: now,
            kind: EventKind::Deliver,
            node: to.0,
            msg_kind: Some(kind_label(msg.kind())),
            msg_id: Some(msg.msg_id),
            ttl: Some(msg.ttl),
            initial_ttl: Some(msg.initial_ttl),
        });
        let result =
            self.nodes[to.0 as usize].on_receive(&msg, &mut self.rng, &self.scenario.protocol);
        match result {
            Ok(forwards) => {
                for (target, fw) in forwards {
                    self.send(to, target, fw, now, true);
                }
            }
            Err(_) => self.protocol_violations += 1,
        }
    }

    fn on_central_cycle(&mut self, now: Tick) {
        let cycle = now / self.scenario.centralized.t_poll;
        let round = self.round_of(now);
        let per_poll = self.scenario.centralized.messages_per_poll;
        for vm in 0..self.alive.len() {
            if !self.alive[vm] {
                continue;
            }
            for _ in 0..per_poll {
                let msg_id = self.ids.next_id();
                self.counts[round].intra_group.initiated += 1;
                self.conservation.central.sends += 1;
                self.conservation.central.delivers += 1;
                self.push_trace(|| TraceEvent {
                    tick: now,
                    kind: EventKind::Send,
                    node: vm as u32,
                    msg_kind: Some("central"),
                    msg_id: Some(msg_id),
                    ttl: None,
                    initial_ttl: None,
                });
                self.push_trace(|| TraceEvent {
                    tick: now,
                    kind: EventKind::Deliver,
                    node: vm as u32,
                    msg_kind: Some("central"),
                    msg_id: Some(msg_id),
                    ttl: None,
                    initial_ttl: None,
                });
            }
        }
        if cycle + 1 < self.scenario.rounds {
            self.schedule(now + self.scenario.centralized.t_poll, Ev::CentralCycle);
        }
    }

    fn on_churn(&mut self, idx: usize) {
        match self.scenario.churn[idx].action {
            ChurnAction::Leave { vm } => {
                self.alive[vm as usize] = false;
                if self.scenario.scheme != Scheme::Central {
                    self.rebuild_membership_views();
                }
            }
            ChurnAction::Join { region, cluster } => {
                let id = VmId(self.topology.population() as u32);
                let features = cluster_vector(cluster, self.scenario.feature_spec.dims);
                let region = RegionId(region);
                let group = if self.scenario.scheme == Scheme::Flat {
                    *self.topology.groups.keys().next().expect("flat group exists")
                } else {
                    // late joiners attach to the nearest existing group in
                    // their region; groups are never split or founded mid-run
                    self.topology
                        .groups
                        .keys()
                        .filter(|g| g.region == region)
                        .max_by(|a, b| {
                            let sa = crate::grouping::cosine_similarity(
                                &self.topology.centroids[a],
                                &features,
                            )
                            .unwrap_or(-1.0);
                            let sb = crate::grouping::cosine_similarity(
                                &self.topology.centroids[b],
                                &features,
                            )
                            .unwrap_or(-1.0);
                            sa.partial_cmp(&sb).unwrap_or(Ordering::Equal).then(b.cmp(a))
                        })
                        .copied()
                        .expect("join region has at least one group")
                };
                self.topology.attach_vm(
                    VmDescriptor { id, region, features },
                    group,
                    &self.scenario.latency.clone(),
                    &mut self.rng,
                );
                self.alive.push(true);
                let current_round = self.scenario.churn[idx].round;
                self.rounds_fired.push(current_round);
                self.workload.values.push(Workload::init_one(&mut self.rng));
                if self.scenario.scheme != Scheme::Central {
                    self.nodes.push(NodeState::new(
                        id,
                        group,
                        region,
                        self.topology.population(),
                    ));
                    self.rebuild_membership_views();
                    let offset = self.rng.gen_range(0..self.period);
                    if current_round < self.scenario.rounds {
                        self.schedule(current_round * self.period + offset, Ev::Timer(id));
                    }
                }
            }
        }
    }

    fn take_snapshot(&mut self, round: u64) {
        let alive_count = self.alive.iter().filter(|a| **a).count() as u64;
        let total_groups = self
            .topology
            .groups
            .values()
            .filter(|members| members.iter().any(|m| self.alive[m.0 as usize]))
            .count() as u64;
        let total_regions = self
            .topology
            .regions
            .iter()
            .filter(|r| {
                self.topology
                    .vms
                    .iter()
                    .any(|v| v.region == **r && self.alive[v.id.0 as usize])
            })
            .count() as u64;
        let per_vm = self
            .nodes
            .iter()
            .filter(|n| self.alive[n.id.0 as usize])
            .map(|n| VmCoverage {
                vm: n.id.0,
                origins: n.records.len() as u64,
                groups: n.digests.group_digests.len() as u64,
                regions: n.digests.region_digests.len() as u64,
            })
            .collect();
        self.snapshots.push(RoundSnapshot {
            round,
            total_groups,
            total_regions,
            alive: alive_count,
            per_vm,
        });
    }

    fn finish(self) -> RunOutput {
        // central polls are counted in the intra_group tier, so this sum
        // covers every scheme
        let total_messages = self.counts.iter().map(RoundCounts::sent).sum::<u64>();
        let report = MetricsReport {
            scheme: self.scenario.scheme,
            population: self.topology.population() as u64,
            groups: self.topology.groups.len() as u64,
            regions: self.topology.regions.len() as u64,
            rounds: self.scenario.rounds,
            seed: self.scenario.seed,
            total_messages,
            total_dropped: self.counts.iter().map(RoundCounts::dropped).sum(),
            convergence_round: convergence_round(&self.snapshots, self.scenario.scheme),
            overhead_ratio_pct: None,
            per_round: self.counts,
        };
        RunOutput {
            report,
            snapshots: self.snapshots,
            trace: self.trace,
            conservation: self.conservation,
            ttl_violations: self.ttl_violations,
            protocol_violations: self.protocol_violations,
            final_states: self.nodes,
            final_usages: self.workload.values,
            alive: self.alive,
            topology: self.topology,
        }
    }
}

fn kind_label(kind: MessageKind) -> &'static str {
    match kind {
        MessageKind::IntraGroup => "intra_group",
        MessageKind::InterGroup => "inter_group",
        MessageKind::InterCloud => "inter_cloud",
    }
}
