//! Domain types for usage records and digests, plus the merge algebra every
//! gossip exchange relies on.
//!
//! Records merge last-writer-wins by logical stamp; digests merge by sequence
//! number. Both merges are idempotent and associative, so gossip exchanges
//! converge regardless of delivery order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense per-scenario VM identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VmId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionId(pub u16);

/// Group identifier, scoped to the region that owns the group.
///
/// The derived `Ord` makes "lexicographically smallest group" well defined,
/// which the protocol layer uses to pick region leaders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub region: RegionId,
    pub index: u16,
}

/// Simulation tick (logical time).
pub type Tick = u64;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{field} must be in [0, 100], got {value}")]
    PercentOutOfRange { field: &'static str, value: f64 },
    #[error("net_kbps must be finite and non-negative, got {0}")]
    InvalidRate(f64),
}

/// One VM's point-in-time CPU/memory/disk/network utilisation sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub cpu_pct: f64,
    pub mem_pct: f64,
    pub disk_pct: f64,
    pub net_kbps: f64,
}

impl ResourceUsage {
    pub fn new(cpu_pct: f64, mem_pct: f64, disk_pct: f64, net_kbps: f64) -> Result<Self, ModelError> {
        let u = ResourceUsage { cpu_pct, mem_pct, disk_pct, net_kbps };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, value) in [
            ("cpu_pct", self.cpu_pct),
            ("mem_pct", self.mem_pct),
            ("disk_pct", self.disk_pct),
        ] {
            if !(0.0..=100.0).contains(&value) || !value.is_finite() {
                return Err(ModelError::PercentOutOfRange { field, value });
            }
        }
        if !self.net_kbps.is_finite() || self.net_kbps < 0.0 {
            return Err(ModelError::InvalidRate(self.net_kbps));
        }
        Ok(())
    }
}

/// A stamped usage sample attributed to its origin VM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub origin: VmId,
    pub stamp: Tick,
    pub usage: ResourceUsage,
}

/// Per-origin record map: at most one record per origin VM.
///
/// Stamps and record bodies live in parallel dense vectors indexed by `VmId`.
/// The stamp vector holds `stamp + 1` (zero marks an empty slot), so the hot
/// merge scan in the simulator touches eight bytes per origin and decides
/// last-writer-wins with a single integer comparison: strictly-greater covers
/// both "newer stamp" and "slot was empty", and ties keep the held record.
#[derive(Debug, Clone, Default)]
pub struct OriginRecordSet {
    stamps: Vec<u64>,
    bodies: Vec<UsageRecord>,
}

const EMPTY_BODY: UsageRecord = UsageRecord {
    origin: VmId(0),
    stamp: 0,
    usage: ResourceUsage { cpu_pct: 0.0, mem_pct: 0.0, disk_pct: 0.0, net_kbps: 0.0 },
};

impl OriginRecordSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        OriginRecordSet { stamps: vec![0; capacity], bodies: vec![EMPTY_BODY; capacity] }
    }

    fn grow(&mut self, len: usize) {
        self.stamps.resize(len, 0);
        self.bodies.resize(len, EMPTY_BODY);
    }

    pub fn get(&self, origin: VmId) -> Option<&UsageRecord> {
        let idx = origin.0 as usize;
        if *self.stamps.get(idx)? == 0 {
            None
        } else {
            Some(&self.bodies[idx])
        }
    }

    /// Insert `record`, keeping the existing entry if it has a newer or equal
    /// stamp. Returns true if the stored state changed.
    pub fn insert(&mut self, record: UsageRecord) -> bool {
        let idx = record.origin.0 as usize;
        if idx >= self.stamps.len() {
            self.grow(idx + 1);
        }
        if record.stamp + 1 > self.stamps[idx] {
            self.stamps[idx] = record.stamp + 1;
            self.bodies[idx] = record;
            true
        } else {
            false
        }
    }

    /// Last-writer-wins merge: for shared origins the record with the larger
    /// stamp survives; on a stamp tie the record already held wins. Returns
    /// true if any record was added or updated.
    pub fn merge_from(&mut self, other: &OriginRecordSet) -> bool {
        if other.stamps.len() > self.stamps.len() {
            self.grow(other.stamps.len());
        }
        let mut changed = false;
        for (idx, &theirs) in other.stamps.iter().enumerate() {
            if theirs > self.stamps[idx] {
                self.stamps[idx] = theirs;
                self.bodies[idx] = other.bodies[idx];
                changed = true;
            }
        }
        changed
    }

    pub fn iter(&self) -> impl Iterator<Item = &UsageRecord> {
        self.stamps
            .iter()
            .zip(self.bodies.iter())
            .filter(|(stamp, _)| **stamp != 0)
            .map(|(_, body)| body)
    }

    /// Number of origins present.
    pub fn len(&self) -> usize {
        self.stamps.iter().filter(|s| **s != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.iter().all(|s| *s == 0)
    }

    pub fn origins(&self) -> impl Iterator<Item = VmId> + '_ {
        self.iter().map(|r| r.origin)
    }
}

impl PartialEq for OriginRecordSet {
    // trailing empty slots are not observable, so capacity differences and
    // stale bodies under empty stamps must not affect equality
    fn eq(&self, other: &Self) -> bool {
        let mut a = self.iter();
        let mut b = other.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return true,
                (Some(x), Some(y)) if x == y => {}
                _ => return false,
            }
        }
    }
}

/// Convenience merge returning a new set; `a` wins stamp ties.
pub fn merge_usage_records(a: &OriginRecordSet, b: &OriginRecordSet) -> OriginRecordSet {
    let mut out = a.clone();
    out.merge_from(b);
    out
}

/// (sum, min, max) over one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub sum: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricStats {
    pub fn singleton(value: f64) -> Self {
        MetricStats { sum: value, min: value, max: value }
    }

    pub fn absorb(&mut self, value: f64) {
        self.sum += value;
        self.min = self.min.min(value);
        self.max = self.max.max(value);
    }

    pub fn combine(&mut self, other: &MetricStats) {
        self.sum += other.sum;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scope {
    Group(GroupId),
    Region(RegionId),
}

/// Summarised usage for a scope, with a sequence number for freshness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateDigest {
    pub scope: Scope,
    pub seq: u64,
    pub contributing: u64,
    pub cpu: MetricStats,
    pub mem: MetricStats,
    pub disk: MetricStats,
    pub net: MetricStats,
    pub freshest: Tick,
}

/// Summarise the records no older than `staleness_window` ticks.
///
/// Returns `None` when no record is fresh, signalling "nothing to gossip".
pub fn compute_aggregate(
    records: &OriginRecordSet,
    now: Tick,
    staleness_window: Tick,
    scope: Scope,
    seq: u64,
) -> Option<AggregateDigest> {
    debug_assert!(staleness_window >= 1);
    let mut digest: Option<AggregateDigest> = None;
    for rec in records.iter() {
        if now.saturating_sub(rec.stamp) > staleness_window {
            continue;
        }
        match &mut digest {
            None => {
                digest = Some(AggregateDigest {
                    scope,
                    seq,
                    contributing: 1,
                    cpu: MetricStats::singleton(rec.usage.cpu_pct),
                    mem: MetricStats::singleton(rec.usage.mem_pct),
                    disk: MetricStats::singleton(rec.usage.disk_pct),
                    net: MetricStats::singleton(rec.usage.net_kbps),
                    freshest: rec.stamp,
                });
            }
            Some(d) => {
                d.contributing += 1;
                d.cpu.absorb(rec.usage.cpu_pct);
                d.mem.absorb(rec.usage.mem_pct);
                d.disk.absorb(rec.usage.disk_pct);
                d.net.absorb(rec.usage.net_kbps);
                d.freshest = d.freshest.max(rec.stamp);
            }
        }
    }
    digest
}

/// Combine several digests into one covering their union: sum of sums, min of
/// mins, max of maxes, sum of contributing counts.
pub fn combine_digests<'a>(
    parts: impl IntoIterator<Item = &'a AggregateDigest>,
    scope: Scope,
    seq: u64,
) -> Option<AggregateDigest> {
    let mut out: Option<AggregateDigest> = None;
    for part in parts {
        match &mut out {
            None => {
                out = Some(AggregateDigest { scope, seq, ..*part });
            }
            Some(d) => {
                d.contributing += part.contributing;
                d.cpu.combine(&part.cpu);
                d.mem.combine(&part.mem);
                d.disk.combine(&part.disk);
                d.net.combine(&part.net);
                d.freshest = d.freshest.max(part.freshest);
            }
        }
    }
    out
}

/// A node's view of group and region digests, keyed by scope.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DigestSet {
    pub group_digests: BTreeMap<GroupId, AggregateDigest>,
    pub region_digests: BTreeMap<RegionId, AggregateDigest>,
}

impl DigestSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a digest under its scope key; higher seq wins, equal seq keeps
    /// the held entry. Returns true if the set changed.
    pub fn insert(&mut self, digest: AggregateDigest) -> bool {
        match digest.scope {
            Scope::Group(g) => insert_fresher(&mut self.group_digests, g, digest),
            Scope::Region(r) => insert_fresher(&mut self.region_digests, r, digest),
        }
    }

    pub fn merge_from(&mut self, other: &DigestSet) -> bool {
        let mut changed = false;
        for d in other.group_digests.values() {
            changed |= self.insert(*d);
        }
        for d in other.region_digests.values() {
            changed |= self.insert(*d);
        }
        changed
    }

    pub fn is_empty(&self) -> bool {
        self.group_digests.is_empty() && self.region_digests.is_empty()
    }
}

fn insert_fresher<K: Ord>(
    map: &mut BTreeMap<K, AggregateDigest>,
    key: K,
    digest: AggregateDigest,
) -> bool {
    match map.get(&key) {
        Some(held) if held.seq >= digest.seq => false,
        _ => {
            map.insert(key, digest);
            true
        }
    }
}

/// Freshness merge over both scope maps; `a` wins seq ties.
pub fn merge_digest_sets(a: &DigestSet, b: &DigestSet) -> DigestSet {
    let mut out = a.clone();
    out.merge_from(b);
    out
}
