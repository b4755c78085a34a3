//! Group formation from application feature vectors.
//!
//! VMs running similar software end up in the same group: each VM carries a
//! feature vector describing its primary applications, and greedy threshold
//! clustering on cosine similarity partitions the VMs. The procedure is
//! deterministic in input order, so a scenario always produces the same
//! groups.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::VmId;

#[derive(Debug, Error, PartialEq)]
pub enum GroupingError {
    #[error("feature vectors have mismatched dimensionality ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("feature vector must have at least one strictly positive, finite dimension")]
    InvalidVector,
    #[error("cannot assign groups for an empty VM set")]
    EmptyInput,
    #[error("similarity threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
}

/// Ordered application-tag weights; fixed dimensionality per scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn validate(&self) -> Result<(), GroupingError> {
        let ok = !self.0.is_empty()
            && self.0.iter().all(|d| d.is_finite() && *d >= 0.0)
            && self.0.iter().any(|d| *d > 0.0);
        if ok {
            Ok(())
        } else {
            Err(GroupingError::InvalidVector)
        }
    }

    fn norm(&self) -> f64 {
        self.0.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

/// Cosine of the angle between two non-zero vectors: 1 for parallel, 0 for
/// orthogonal.
pub fn cosine_similarity(u: &FeatureVector, v: &FeatureVector) -> Result<f64, GroupingError> {
    if u.0.len() != v.0.len() {
        return Err(GroupingError::DimensionMismatch(u.0.len(), v.0.len()));
    }
    u.validate()?;
    v.validate()?;
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok(dot / (u.norm() * v.norm()))
}

/// One formed group: its members in join order and the running centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub members: Vec<VmId>,
    pub centroid: FeatureVector,
}

/// A partition of the input VM set into groups.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupAssignment {
    pub groups: Vec<Group>,
}

impl GroupAssignment {
    /// Group index holding `vm`, if any.
    pub fn group_of(&self, vm: VmId) -> Option<usize> {
        self.groups.iter().position(|g| g.members.contains(&vm))
    }

    /// Index of the existing group whose centroid is most similar to `vector`.
    /// Used for late joiners, which always attach to the nearest group.
    pub fn nearest_group(&self, vector: &FeatureVector) -> Result<usize, GroupingError> {
        let mut best = Err(GroupingError::EmptyInput);
        let mut best_sim = f64::NEG_INFINITY;
        for (idx, group) in self.groups.iter().enumerate() {
            let sim = cosine_similarity(&group.centroid, vector)?;
            if sim > best_sim {
                best_sim = sim;
                best = Ok(idx);
            }
        }
        best
    }
}

/// Greedy leader clustering in input order: each VM joins the first existing
/// group whose running centroid has similarity >= `tau`, otherwise it founds
/// a new group. Centroids are the arithmetic mean of member vectors, updated
/// on every join.
pub fn assign_groups(
    vms: &[(VmId, FeatureVector)],
    tau: f64,
) -> Result<GroupAssignment, GroupingError> {
    if vms.is_empty() {
        return Err(GroupingError::EmptyInput);
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(GroupingError::InvalidThreshold(tau));
    }
    let dims = vms[0].1 .0.len();
    for (_, v) in vms {
        if v.0.len() != dims {
            return Err(GroupingError::DimensionMismatch(dims, v.0.len()));
        }
        v.validate()?;
    }

    let mut groups: Vec<Group> = Vec::new();
    for (vm, vector) in vms {
        let mut joined = false;
        for group in groups.iter_mut() {
            if cosine_similarity(&group.centroid, vector)? >= tau {
                group.members.push(*vm);
                let n = group.members.len() as f64;
                for (c, x) in group.centroid.0.iter_mut().zip(&vector.0) {
                    // running mean: c' = c + (x - c) / n
                    *c += (x - *c) / n;
                }
                joined = true;
                break;
            }
        }
        if !joined {
            groups.push(Group { members: vec![*vm], centroid: vector.clone() });
        }
    }
    Ok(GroupAssignment { groups })
}
