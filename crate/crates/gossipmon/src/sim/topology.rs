//! Topology construction: VM placement, per-region group formation, and the
//! three-class pairwise latency table.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grouping::{assign_groups, FeatureVector};
use crate::model::{GroupId, RegionId, VmId};
use crate::scenario::{ConfigError, Scenario, Scheme};

/// Which latency/loss class a VM pair falls into. Decided by physical
/// placement (region and group), independent of the scheme being simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairClass {
    IntraGroup,
    IntraRegion,
    InterRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub intra_group_ms: [f64; 2],
    pub intra_region_ms: [f64; 2],
    pub inter_region_ms: [f64; 2],
    pub loss_intra: f64,
    pub loss_inter_region: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            intra_group_ms: [0.5, 2.0],
            intra_region_ms: [1.0, 5.0],
            inter_region_ms: [50.0, 150.0],
            loss_intra: 0.01,
            loss_inter_region: 0.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ranges = [
            ("latency.intra_group_ms", self.intra_group_ms),
            ("latency.intra_region_ms", self.intra_region_ms),
            ("latency.inter_region_ms", self.inter_region_ms),
        ];
        for (field, [lo, hi]) in ranges {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(ConfigError::invalid(field, "range must be positive with lo <= hi"));
            }
        }
        let mid = |r: [f64; 2]| (r[0] + r[1]) / 2.0;
        if !(mid(self.intra_group_ms) <= mid(self.intra_region_ms)
            && mid(self.intra_region_ms) <= mid(self.inter_region_ms))
        {
            return Err(ConfigError::invalid(
                "latency",
                "class midpoints must be ordered intra_group <= intra_region <= inter_region",
            ));
        }
        for (field, p) in [
            ("latency.loss_intra", self.loss_intra),
            ("latency.loss_inter_region", self.loss_inter_region),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(ConfigError::invalid(field, "probability must be in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn loss(&self, class: PairClass) -> f64 {
        match class {
            PairClass::InterRegion => self.loss_inter_region,
            _ => self.loss_intra,
        }
    }
}

/// One uniform draw from the class range; the caller memoises it per pair.
pub fn sample_latency(model: &LatencyModel, class: PairClass, rng: &mut impl Rng) -> f64 {
    let [lo, hi] = match class {
        PairClass::IntraGroup => model.intra_group_ms,
        PairClass::IntraRegion => model.intra_region_ms,
        PairClass::InterRegion => model.inter_region_ms,
    };
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

#[derive(Debug, Clone)]
pub struct VmDescriptor {
    pub id: VmId,
    pub region: RegionId,
    pub features: FeatureVector,
}

/// Static placement for one run: VMs, group membership per region, and the
/// symmetric pairwise latency table sampled once at build.
#[derive(Debug, Clone)]
pub struct Topology {
    pub vms: Vec<VmDescriptor>,
    pub regions: Vec<RegionId>,
    pub groups: BTreeMap<GroupId, Vec<VmId>>,
    pub centroids: BTreeMap<GroupId, FeatureVector>,
    group_of: Vec<GroupId>,
    latency: Vec<f64>,
    stride: usize,
}

impl Topology {
    pub fn population(&self) -> usize {
        self.vms.len()
    }

    pub fn group_of(&self, vm: VmId) -> GroupId {
        self.group_of[vm.0 as usize]
    }

    pub fn region_of(&self, vm: VmId) -> RegionId {
        self.vms[vm.0 as usize].region
    }

    pub fn latency(&self, a: VmId, b: VmId) -> f64 {
        self.latency[a.0 as usize * self.stride + b.0 as usize]
    }

    pub fn pair_class(&self, a: VmId, b: VmId) -> PairClass {
        if self.region_of(a) != self.region_of(b) {
            PairClass::InterRegion
        } else if self.group_of(a) == self.group_of(b) {
            PairClass::IntraGroup
        } else {
            PairClass::IntraRegion
        }
    }

    /// Attach a late joiner to `group`, sampling latencies for its new pairs.
    pub fn attach_vm(
        &mut self,
        descriptor: VmDescriptor,
        group: GroupId,
        model: &LatencyModel,
        rng: &mut impl Rng,
    ) {
        let id = descriptor.id;
        assert_eq!(id.0 as usize, self.vms.len(), "joins must extend the dense id space");
        self.vms.push(descriptor);
        self.group_of.push(group);
        self.groups.entry(group).or_default().push(id);

        let old_stride = self.stride;
        let n = self.vms.len();
        let mut latency = vec![0.0; n * n];
        for i in 0..old_stride {
            for j in 0..old_stride {
                latency[i * n + j] = self.latency[i * old_stride + j];
            }
        }
        self.stride = n;
        self.latency = latency;
        for other in 0..n - 1 {
            let class = self.pair_class(VmId(other as u32), id);
            let ms = sample_latency(model, class, rng);
            self.latency[other * n + id.0 as usize] = ms;
            self.latency[id.0 as usize * n + other] = ms;
        }
    }
}

/// Feature vector for cluster `cluster` in a space of `dims` dimensions:
/// one-hot on the application tag the cluster represents.
pub fn cluster_vector(cluster: usize, dims: usize) -> FeatureVector {
    let mut v = vec![0.0; dims];
    v[cluster % dims] = 1.0;
    FeatureVector(v)
}

pub fn build_topology(scenario: &Scenario, rng: &mut impl Rng) -> Result<Topology, ConfigError> {
    let spec = &scenario.feature_spec;
    let mut vms = Vec::with_capacity(scenario.population as usize);
    let mut next_id = 0u32;
    let regions: Vec<RegionId> = (0..scenario.regions.len() as u16).map(RegionId).collect();
    for (r, count) in scenario.regions.iter().enumerate() {
        for local in 0..*count {
            vms.push(VmDescriptor {
                id: VmId(next_id),
                region: RegionId(r as u16),
                features: cluster_vector(local as usize % spec.clusters_per_region, spec.dims),
            });
            next_id += 1;
        }
    }

    let n = vms.len();
    let mut group_of = vec![GroupId { region: RegionId(0), index: 0 }; n];
    let mut groups = BTreeMap::new();
    let mut centroids = BTreeMap::new();

    if scenario.scheme == Scheme::Flat {
        // One flat group spanning every region.
        let flat = GroupId { region: RegionId(0), index: 0 };
        groups.insert(flat, vms.iter().map(|v| v.id).collect::<Vec<_>>());
        centroids.insert(flat, cluster_vector(0, spec.dims));
    } else {
        for region in &regions {
            let members: Vec<(VmId, FeatureVector)> = vms
                .iter()
                .filter(|v| v.region == *region)
                .map(|v| (v.id, v.features.clone()))
                .collect();
            if members.is_empty() {
                return Err(ConfigError::invalid("regions", "every region needs at least one VM"));
            }
            let assignment = assign_groups(&members, scenario.tau)
                .map_err(|e| ConfigError::invalid("feature_spec", e.to_string()))?;
            for (index, group) in assignment.groups.into_iter().enumerate() {
                let gid = GroupId { region: *region, index: index as u16 };
                for vm in &group.members {
                    group_of[vm.0 as usize] = gid;
                }
                groups.insert(gid, group.members);
                centroids.insert(gid, group.centroid);
            }
        }
    }

    let mut topology = Topology {
        vms,
        regions,
        groups,
        centroids,
        group_of,
        latency: vec![0.0; n * n],
        stride: n,
    };
    for i in 0..n {
        for j in i + 1..n {
            let class = topology.pair_class(VmId(i as u32), VmId(j as u32));
            let ms = sample_latency(&scenario.latency, class, rng);
            topology.latency[i * n + j] = ms;
            topology.latency[j * n + i] = ms;
        }
    }
    Ok(topology)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::tests::scenario_with;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn latency_draws_stay_in_class_range() {
        let model = LatencyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let d = sample_latency(&model, PairClass::IntraGroup, &mut rng);
            assert!((0.5..2.0).contains(&d));
            let d = sample_latency(&model, PairClass::InterRegion, &mut rng);
            assert!((50.0..150.0).contains(&d));
        }
    }

    #[test]
    fn identical_vectors_one_region_one_group() {
        let scenario = scenario_with(|s| {
            s.population = 12;
            s.regions = vec![12];
            s.feature_spec.dims = 3;
            s.feature_spec.clusters_per_region = 1;
        });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = build_topology(&scenario, &mut rng).unwrap();
        assert_eq!(t.groups.len(), 1);
        assert_eq!(t.groups.values().next().unwrap().len(), 12);
    }

    #[test]
    fn same_seed_same_latency_table() {
        let scenario = scenario_with(|s| {
            s.population = 20;
            s.regions = vec![10, 10];
        });
        let a = build_topology(&scenario, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_topology(&scenario, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(a.latency(VmId(i), VmId(j)), b.latency(VmId(i), VmId(j)));
            }
        }
        assert!(a.latency(VmId(0), VmId(1)) > 0.0);
        assert_eq!(a.latency(VmId(0), VmId(1)), a.latency(VmId(1), VmId(0)));
    }

    #[test]
    fn two_clusters_per_region_give_four_groups() {
        let scenario = scenario_with(|s| {
            s.population = 60;
            s.regions = vec![30, 30];
            s.feature_spec.dims = 2;
            s.feature_spec.clusters_per_region = 2;
        });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = build_topology(&scenario, &mut rng).unwrap();
        assert_eq!(t.groups.len(), 4);
        assert!(t.groups.values().all(|g| g.len() == 15));
    }

    #[test]
    fn flat_scheme_is_one_group_spanning_regions() {
        let scenario = scenario_with(|s| {
            s.population = 10;
            s.regions = vec![5, 5];
            s.scheme = Scheme::Flat;
        });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = build_topology(&scenario, &mut rng).unwrap();
        assert_eq!(t.groups.len(), 1);
        // physical classes still follow regions
        assert_eq!(t.pair_class(VmId(0), VmId(9)), PairClass::InterRegion);
        assert_eq!(t.pair_class(VmId(0), VmId(1)), PairClass::IntraGroup);
    }
}
