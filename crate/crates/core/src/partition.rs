//! Part graphs built from the semantic, symmetry and mixture rules.
//!
//! Every rule works on the topology's five-group [`BodyGrouping`]. The
//! default scheme concatenates 5 semantic, 3 symmetry and 2 mixture parts in
//! that order, giving `K = 10`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::skeleton::{BodyGrouping, JointTopology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("topology {0} has no grouping table")]
    NoGrouping(String),
    #[error("scheme must contain at least one part")]
    Empty,
    #[error("part {part}: {message}")]
    InvalidPart { part: String, message: String },
    #[error("semantic parts {0} and {1} overlap")]
    SemanticOverlap(String, String),
    #[error("semantic parts do not cover joint {0}")]
    SemanticCover(usize),
    #[error("mixture part {0} is not a union of two or more semantic groups")]
    NotAUnion(String),
    #[error("K = {requested} is outside 1..={max}")]
    KOutOfRange { requested: usize, max: usize },
    #[error("joint index {index} out of range for {joints} joints")]
    IndexOutOfRange { index: usize, joints: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartTag {
    Semantic,
    Symmetry,
    Mixture,
}

/// A joint subset with the bone edges restricted to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartGraph {
    name: String,
    joint_indices: Vec<usize>,
    /// Row-major `Vᵢ×Vᵢ` 0/1 matrix, zero diagonal.
    local_adjacency: Vec<u8>,
}

impl PartGraph {
    /// Builds a part over `joints`, restricting the topology's bones.
    pub fn new(
        name: impl Into<String>,
        joints: Vec<usize>,
        topology: &JointTopology,
    ) -> Result<Self, PartitionError> {
        let name = name.into();
        let v = topology.joint_count();
        let invalid = |message: String| PartitionError::InvalidPart {
            part: name.clone(),
            message,
        };
        if joints.is_empty() {
            return Err(invalid("no joints".into()));
        }
        let mut seen = BTreeSet::new();
        for &j in &joints {
            if j >= v {
                return Err(invalid(format!("joint {j} outside 0..{v}")));
            }
            if !seen.insert(j) {
                return Err(invalid(format!("joint {j} listed twice")));
            }
        }
        let n = joints.len();
        let mut local_adjacency = vec![0u8; n * n];
        for &(a, b) in topology.edges() {
            let (Some(i), Some(k)) = (
                joints.iter().position(|&j| j == a),
                joints.iter().position(|&j| j == b),
            ) else {
                continue;
            };
            local_adjacency[i * n + k] = 1;
            local_adjacency[k * n + i] = 1;
        }
        Ok(Self {
            name,
            joint_indices: joints,
            local_adjacency,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_indices(&self) -> &[usize] {
        &self.joint_indices
    }

    pub fn len(&self) -> usize {
        self.joint_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joint_indices.is_empty()
    }

    pub fn local_adjacency(&self) -> &[u8] {
        &self.local_adjacency
    }

    pub fn adjacent(&self, i: usize, k: usize) -> bool {
        self.local_adjacency[i * self.len() + k] == 1
    }

    fn joint_set(&self) -> BTreeSet<usize> {
        self.joint_indices.iter().copied().collect()
    }
}

/// Row of the `dump-partitions` listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartDump {
    pub name: String,
    pub tag: PartTag,
    pub joint_indices: Vec<usize>,
    pub joint_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionScheme {
    topology: JointTopology,
    parts: Vec<PartGraph>,
    tags: Vec<PartTag>,
}

impl PartitionScheme {
    /// Validates structural invariants: at least one part, every part built
    /// for this topology, semantic parts pairwise disjoint, and each mixture
    /// part equal to a union of two or more semantic groups.
    pub fn new(
        topology: JointTopology,
        parts: Vec<PartGraph>,
        tags: Vec<PartTag>,
    ) -> Result<Self, PartitionError> {
        if parts.is_empty() {
            return Err(PartitionError::Empty);
        }
        assert_eq!(parts.len(), tags.len(), "one tag per part");
        for p in &parts {
            if let Some(&j) = p.joint_indices.iter().find(|&&j| j >= topology.joint_count()) {
                return Err(PartitionError::IndexOutOfRange {
                    index: j,
                    joints: topology.joint_count(),
                });
            }
            let expected = PartGraph::new(p.name.clone(), p.joint_indices.clone(), &topology)?;
            if expected.local_adjacency != p.local_adjacency {
                return Err(PartitionError::InvalidPart {
                    part: p.name.clone(),
                    message: "local adjacency differs from the bone graph".into(),
                });
            }
        }
        let semantic: Vec<&PartGraph> = parts
            .iter()
            .zip(&tags)
            .filter(|(_, t)| **t == PartTag::Semantic)
            .map(|(p, _)| p)
            .collect();
        for (i, a) in semantic.iter().enumerate() {
            let sa = a.joint_set();
            for b in &semantic[i + 1..] {
                if !sa.is_disjoint(&b.joint_set()) {
                    return Err(PartitionError::SemanticOverlap(a.name.clone(), b.name.clone()));
                }
            }
        }
        if tags.contains(&PartTag::Mixture) {
            let grouping = grouping(&topology)?;
            for (p, _) in parts.iter().zip(&tags).filter(|(_, t)| **t == PartTag::Mixture) {
                if !is_union_of_groups(&p.joint_set(), grouping) {
                    return Err(PartitionError::NotAUnion(p.name.clone()));
                }
            }
        }
        Ok(Self {
            topology,
            parts,
            tags,
        })
    }

    pub fn topology(&self) -> &JointTopology {
        &self.topology
    }

    pub fn parts(&self) -> &[PartGraph] {
        &self.parts
    }

    pub fn tags(&self) -> &[PartTag] {
        &self.tags
    }

    /// Number of parts `K`.
    pub fn k(&self) -> usize {
        self.parts.len()
    }

    pub fn part_names(&self) -> Vec<String> {
        self.parts.iter().map(|p| p.name.clone()).collect()
    }

    /// Checks that the semantic parts cover every joint.
    pub fn check_semantic_cover(&self) -> Result<(), PartitionError> {
        let mut covered = vec![false; self.topology.joint_count()];
        for (p, t) in self.parts.iter().zip(&self.tags) {
            if *t == PartTag::Semantic {
                for &j in &p.joint_indices {
                    covered[j] = true;
                }
            }
        }
        match covered.iter().position(|c| !c) {
            Some(j) => Err(PartitionError::SemanticCover(j)),
            None => Ok(()),
        }
    }

    pub fn dump(&self) -> Vec<PartDump> {
        self.parts
            .iter()
            .zip(&self.tags)
            .map(|(p, &tag)| PartDump {
                name: p.name.clone(),
                tag,
                joint_indices: p.joint_indices.clone(),
                joint_names: p
                    .joint_indices
                    .iter()
                    .map(|&j| self.topology.joint_name(j).to_string())
                    .collect(),
            })
            .collect()
    }
}

fn grouping(topology: &JointTopology) -> Result<&BodyGrouping, PartitionError> {
    topology
        .grouping()
        .ok_or_else(|| PartitionError::NoGrouping(topology.name().to_string()))
}

fn is_union_of_groups(set: &BTreeSet<usize>, grouping: &BodyGrouping) -> bool {
    let mut used = 0;
    let mut covered = BTreeSet::new();
    for (_, g) in grouping.groups() {
        let gs: BTreeSet<usize> = g.iter().copied().collect();
        if gs.is_subset(set) {
            used += 1;
            covered.extend(gs);
        } else if !gs.is_disjoint(set) {
            return false;
        }
    }
    used >= 2 && covered == *set
}

/// Sorted union of the groups selected by `mask` (bit `i` = group `i`).
fn union_of(grouping: &BodyGrouping, mask: u32) -> Vec<usize> {
    let mut set = BTreeSet::new();
    for (i, (_, g)) in grouping.groups().iter().enumerate() {
        if mask & (1 << i) != 0 {
            set.extend(g.iter().copied());
        }
    }
    set.into_iter().collect()
}

const TORSO: u32 = 1;
const ARMS: u32 = 0b00110;
const LEGS: u32 = 0b11000;

/// torso+head, left arm, right arm, left leg, right leg.
pub fn semantic_partition(topology: &JointTopology) -> Result<Vec<PartGraph>, PartitionError> {
    grouping(topology)?
        .groups()
        .iter()
        .map(|(name, g)| PartGraph::new(*name, g.to_vec(), topology))
        .collect()
}

/// both arms, both legs, torso+head.
pub fn symmetry_partition(topology: &JointTopology) -> Result<Vec<PartGraph>, PartitionError> {
    let g = grouping(topology)?;
    [("both_arms", ARMS), ("both_legs", LEGS), ("torso_head_sym", TORSO)]
        .iter()
        .map(|&(name, mask)| PartGraph::new(name, union_of(g, mask), topology))
        .collect()
}

/// upper body (torso+head with both arms) and lower body (torso+head with
/// both legs).
pub fn mixture_partition(topology: &JointTopology) -> Result<Vec<PartGraph>, PartitionError> {
    let g = grouping(topology)?;
    [("upper_body", TORSO | ARMS), ("lower_body", TORSO | LEGS)]
        .iter()
        .map(|&(name, mask)| PartGraph::new(name, union_of(g, mask), topology))
        .collect()
}

fn tagged(topology: &JointTopology) -> Result<Vec<(PartGraph, PartTag)>, PartitionError> {
    let mut out = Vec::new();
    for (parts, tag) in [
        (semantic_partition(topology)?, PartTag::Semantic),
        (symmetry_partition(topology)?, PartTag::Symmetry),
        (mixture_partition(topology)?, PartTag::Mixture),
    ] {
        out.extend(parts.into_iter().map(|p| (p, tag)));
    }
    Ok(out)
}

/// Semantic, then symmetry, then mixture parts (`K = 10`).
pub fn build_default_scheme(topology: &JointTopology) -> Result<PartitionScheme, PartitionError> {
    let (parts, tags) = tagged(topology)?.into_iter().unzip();
    let scheme = PartitionScheme::new(topology.clone(), parts, tags)?;
    scheme.check_semantic_cover()?;
    Ok(scheme)
}

/// Largest `K` accepted by [`build_scheme_with_k`].
pub fn max_parts(topology: &JointTopology) -> Result<usize, PartitionError> {
    Ok(extended_parts(topology)?.len())
}

fn extended_parts(topology: &JointTopology) -> Result<Vec<(PartGraph, PartTag)>, PartitionError> {
    let g = grouping(topology)?;
    let mut parts = tagged(topology)?;
    let mut seen: BTreeSet<Vec<usize>> =
        parts.iter().map(|(p, _)| p.joint_indices.clone()).collect();
    let names = g.groups().map(|(n, _)| n);
    let mut masks: Vec<u32> = (1u32..32).filter(|m| m.count_ones() >= 2).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    for mask in masks {
        let joints = union_of(g, mask);
        if !seen.insert(joints.clone()) {
            continue;
        }
        let name = (0..5)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| names[i])
            .collect::<Vec<_>>()
            .join("+");
        parts.push((PartGraph::new(name, joints, topology)?, PartTag::Mixture));
    }
    Ok(parts)
}

/// Scheme with `k` parts for the K-sweep.
///
/// `k = 1` is a single whole-body part. Otherwise the default order is
/// truncated (`k < 10`) or extended with the remaining unions of two or more
/// groups, smallest first (`k > 10`).
pub fn build_scheme_with_k(
    topology: &JointTopology,
    k: usize,
) -> Result<PartitionScheme, PartitionError> {
    if k == 1 {
        return whole_body_scheme(topology);
    }
    let all = extended_parts(topology)?;
    if k == 0 || k > all.len() {
        return Err(PartitionError::KOutOfRange {
            requested: k,
            max: all.len(),
        });
    }
    let (parts, tags) = all.into_iter().take(k).unzip();
    PartitionScheme::new(topology.clone(), parts, tags)
}

/// One part containing every joint in index order.
pub fn whole_body_scheme(topology: &JointTopology) -> Result<PartitionScheme, PartitionError> {
    let part = PartGraph::new("whole_body", (0..topology.joint_count()).collect(), topology)?;
    let tag = if topology.grouping().is_some() {
        PartTag::Mixture
    } else {
        PartTag::Semantic
    };
    PartitionScheme::new(topology.clone(), vec![part], vec![tag])
}

/// Gathers the part's joint columns of a `d₀×T₀×V` feature map.
pub fn sample_part_features(body: &Tensor, part: &PartGraph) -> Result<Tensor, PartitionError> {
    let (c, t, v) = body.dims3();
    if let Some(&index) = part.joint_indices.iter().find(|&&j| j >= v) {
        return Err(PartitionError::IndexOutOfRange { index, joints: v });
    }
    let mut out = Vec::with_capacity(c * t * part.len());
    for row in body.data().chunks(v) {
        out.extend(part.joint_indices.iter().map(|&j| row[j]));
    }
    Ok(Tensor::new(vec![c, t, part.len()], out))
}
