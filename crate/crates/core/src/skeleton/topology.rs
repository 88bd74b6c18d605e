use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("topology must have at least one joint")]
    NoJoints,
    #[error("expected {expected} joint names, got {found}")]
    NameCount { expected: usize, found: usize },
    #[error("edge ({0}, {1}) references a joint outside the topology")]
    EdgeOutOfRange(usize, usize),
    #[error("self-loop edge on joint {0}")]
    SelfLoop(usize),
    #[error("center joint {0} is outside the topology")]
    CenterOutOfRange(usize),
    #[error("bone graph is not connected (joint {0} unreachable)")]
    Disconnected(usize),
    #[error("grouping is invalid: {0}")]
    Grouping(String),
    #[error("unknown topology {0:?}")]
    Unknown(String),
}

/// The five anatomical joint groups used by the part-graph rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyGrouping {
    pub torso_head: Vec<usize>,
    pub left_arm: Vec<usize>,
    pub right_arm: Vec<usize>,
    pub left_leg: Vec<usize>,
    pub right_leg: Vec<usize>,
}

impl BodyGrouping {
    /// Groups in canonical order: torso+head, left arm, right arm, left leg,
    /// right leg.
    pub fn groups(&self) -> [(&'static str, &[usize]); 5] {
        [
            ("torso_head", &self.torso_head),
            ("left_arm", &self.left_arm),
            ("right_arm", &self.right_arm),
            ("left_leg", &self.left_leg),
            ("right_leg", &self.right_leg),
        ]
    }
}

/// Joint count, bone edges and anchors of one skeleton format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTopology {
    name: String,
    joint_names: Vec<String>,
    edges: Vec<(usize, usize)>,
    center_joint: usize,
    grouping: Option<BodyGrouping>,
    /// Left and right shoulder, used by optional view alignment.
    shoulders: Option<(usize, usize)>,
    rest_pose: Option<Vec<[f64; 3]>>,
}

impl JointTopology {
    pub fn new(
        name: impl Into<String>,
        joint_names: Vec<String>,
        edges: &[(usize, usize)],
        center_joint: usize,
    ) -> Result<Self, TopologyError> {
        let v = joint_names.len();
        if v == 0 {
            return Err(TopologyError::NoJoints);
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= v || b >= v {
                return Err(TopologyError::EdgeOutOfRange(a, b));
            }
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            set.insert((a.min(b), a.max(b)));
        }
        if center_joint >= v {
            return Err(TopologyError::CenterOutOfRange(center_joint));
        }
        let topo = Self {
            name: name.into(),
            joint_names,
            edges: set.into_iter().collect(),
            center_joint,
            grouping: None,
            shoulders: None,
            rest_pose: None,
        };
        let hops = topo.hop_distances();
        if let Some(j) = hops.iter().position(Option::is_none) {
            return Err(TopologyError::Disconnected(j));
        }
        Ok(topo)
    }

    /// Attaches the explicit grouping table the partition rules need.
    pub fn with_grouping(mut self, grouping: BodyGrouping) -> Result<Self, TopologyError> {
        let v = self.joint_count();
        let mut seen = vec![false; v];
        for (name, group) in grouping.groups() {
            if group.is_empty() {
                return Err(TopologyError::Grouping(format!("{name} is empty")));
            }
            for &j in group {
                if j >= v {
                    return Err(TopologyError::Grouping(format!(
                        "{name} references joint {j} outside the topology"
                    )));
                }
                if seen[j] {
                    return Err(TopologyError::Grouping(format!(
                        "joint {j} appears in more than one group"
                    )));
                }
                seen[j] = true;
            }
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(TopologyError::Grouping(format!("joint {j} is not in any group")));
        }
        self.grouping = Some(grouping);
        Ok(self)
    }

    pub fn with_shoulders(mut self, left: usize, right: usize) -> Self {
        assert!(left < self.joint_count() && right < self.joint_count());
        self.shoulders = Some((left, right));
        self
    }

    pub fn with_rest_pose(mut self, pose: Vec<[f64; 3]>) -> Self {
        assert_eq!(pose.len(), self.joint_count());
        self.rest_pose = Some(pose);
        self
    }

    /// Kinect v2 layout used by NTU RGB+D (25 joints, 0-based).
    pub fn ntu25() -> Self {
        const NAMES: [&str; 25] = [
            "spine_base",
            "spine_mid",
            "neck",
            "head",
            "left_shoulder",
            "left_elbow",
            "left_wrist",
            "left_hand",
            "right_shoulder",
            "right_elbow",
            "right_wrist",
            "right_hand",
            "left_hip",
            "left_knee",
            "left_ankle",
            "left_foot",
            "right_hip",
            "right_knee",
            "right_ankle",
            "right_foot",
            "spine_shoulder",
            "left_hand_tip",
            "left_thumb",
            "right_hand_tip",
            "right_thumb",
        ];
        const EDGES: [(usize, usize); 24] = [
            (0, 1),
            (1, 20),
            (2, 20),
            (3, 2),
            (4, 20),
            (5, 4),
            (6, 5),
            (7, 6),
            (8, 20),
            (9, 8),
            (10, 9),
            (11, 10),
            (12, 0),
            (13, 12),
            (14, 13),
            (15, 14),
            (16, 0),
            (17, 16),
            (18, 17),
            (19, 18),
            (21, 22),
            (22, 7),
            (23, 24),
            (24, 11),
        ];
        let pose = vec![
            [0.0, 1.00, 0.0],
            [0.0, 1.25, 0.0],
            [0.0, 1.55, 0.0],
            [0.0, 1.70, 0.0],
            [0.18, 1.42, 0.0],
            [0.22, 1.15, 0.0],
            [0.24, 0.92, 0.0],
            [0.25, 0.85, 0.0],
            [-0.18, 1.42, 0.0],
            [-0.22, 1.15, 0.0],
            [-0.24, 0.92, 0.0],
            [-0.25, 0.85, 0.0],
            [0.10, 0.95, 0.0],
            [0.10, 0.52, 0.0],
            [0.10, 0.10, 0.0],
            [0.10, 0.05, 0.10],
            [-0.10, 0.95, 0.0],
            [-0.10, 0.52, 0.0],
            [-0.10, 0.10, 0.0],
            [-0.10, 0.05, 0.10],
            [0.0, 1.45, 0.0],
            [0.26, 0.78, 0.0],
            [0.22, 0.84, 0.03],
            [-0.26, 0.78, 0.0],
            [-0.22, 0.84, 0.03],
        ];
        Self::new("ntu25", NAMES.iter().map(|s| s.to_string()).collect(), &EDGES, 1)
            .and_then(|t| {
                t.with_grouping(BodyGrouping {
                    torso_head: vec![0, 1, 2, 3, 20],
                    left_arm: vec![4, 5, 6, 7, 21, 22],
                    right_arm: vec![8, 9, 10, 11, 23, 24],
                    left_leg: vec![12, 13, 14, 15],
                    right_leg: vec![16, 17, 18, 19],
                })
            })
            .expect("built-in NTU topology is valid")
            .with_shoulders(4, 8)
            .with_rest_pose(pose)
    }

    /// Kinect v1 layout used by NW-UCLA (20 joints, 0-based).
    pub fn nwucla20() -> Self {
        const NAMES: [&str; 20] = [
            "hip_center",
            "spine",
            "shoulder_center",
            "head",
            "left_shoulder",
            "left_elbow",
            "left_wrist",
            "left_hand",
            "right_shoulder",
            "right_elbow",
            "right_wrist",
            "right_hand",
            "left_hip",
            "left_knee",
            "left_ankle",
            "left_foot",
            "right_hip",
            "right_knee",
            "right_ankle",
            "right_foot",
        ];
        const EDGES: [(usize, usize); 19] = [
            (0, 1),
            (1, 2),
            (2, 3),
            (2, 4),
            (4, 5),
            (5, 6),
            (6, 7),
            (2, 8),
            (8, 9),
            (9, 10),
            (10, 11),
            (0, 12),
            (12, 13),
            (13, 14),
            (14, 15),
            (0, 16),
            (16, 17),
            (17, 18),
            (18, 19),
        ];
        let pose = vec![
            [0.0, 1.00, 0.0],
            [0.0, 1.25, 0.0],
            [0.0, 1.45, 0.0],
            [0.0, 1.65, 0.0],
            [0.18, 1.42, 0.0],
            [0.22, 1.15, 0.0],
            [0.24, 0.92, 0.0],
            [0.25, 0.85, 0.0],
            [-0.18, 1.42, 0.0],
            [-0.22, 1.15, 0.0],
            [-0.24, 0.92, 0.0],
            [-0.25, 0.85, 0.0],
            [0.10, 0.95, 0.0],
            [0.10, 0.52, 0.0],
            [0.10, 0.10, 0.0],
            [0.10, 0.05, 0.10],
            [-0.10, 0.95, 0.0],
            [-0.10, 0.52, 0.0],
            [-0.10, 0.10, 0.0],
            [-0.10, 0.05, 0.10],
        ];
        Self::new("nwucla20", NAMES.iter().map(|s| s.to_string()).collect(), &EDGES, 0)
            .and_then(|t| {
                t.with_grouping(BodyGrouping {
                    torso_head: vec![0, 1, 2, 3],
                    left_arm: vec![4, 5, 6, 7],
                    right_arm: vec![8, 9, 10, 11],
                    left_leg: vec![12, 13, 14, 15],
                    right_leg: vec![16, 17, 18, 19],
                })
            })
            .expect("built-in NW-UCLA topology is valid")
            .with_shoulders(4, 8)
            .with_rest_pose(pose)
    }

    /// Looks up a built-in topology by name (`ntu25` / `nwucla20`).
    pub fn by_name(name: &str) -> Result<Self, TopologyError> {
        match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ntu25" | "ntu" => Ok(Self::ntu25()),
            "nwucla20" | "nwucla" | "ucla" => Ok(Self::nwucla20()),
            _ => Err(TopologyError::Unknown(name.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_name(&self, j: usize) -> &str {
        &self.joint_names[j]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn center_joint(&self) -> usize {
        self.center_joint
    }

    pub fn grouping(&self) -> Option<&BodyGrouping> {
        self.grouping.as_ref()
    }

    pub fn shoulders(&self) -> Option<(usize, usize)> {
        self.shoulders
    }

    pub fn rest_pose(&self) -> Option<&[[f64; 3]]> {
        self.rest_pose.as_deref()
    }

    /// Symmetric 0/1 bone adjacency with zero diagonal, row-major `V×V`.
    pub fn adjacency(&self) -> Vec<f64> {
        let v = self.joint_count();
        let mut a = vec![0.0; v * v];
        for &(i, j) in &self.edges {
            a[i * v + j] = 1.0;
            a[j * v + i] = 1.0;
        }
        a
    }

    /// Bone-graph hop distance of each joint from the center joint.
    pub fn hop_distances(&self) -> Vec<Option<usize>> {
        let v = self.joint_count();
        let mut nbrs = vec![Vec::new(); v];
        for &(i, j) in &self.edges {
            nbrs[i].push(j);
            nbrs[j].push(i);
        }
        let mut dist = vec![None; v];
        dist[self.center_joint] = Some(0);
        let mut queue = VecDeque::from([self.center_joint]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &w in &nbrs[u] {
                if dist[w].is_none() {
                    dist[w] = Some(du + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_satisfy_invariants() {
        for topo in [JointTopology::ntu25(), JointTopology::nwucla20()] {
            let v = topo.joint_count();
            assert!(topo.edges().iter().all(|&(a, b)| a < v && b < v && a != b));
            assert!(topo.center_joint() < v);
            assert!(topo.hop_distances().iter().all(Option::is_some));
            assert_eq!(topo.edges().len(), v - 1, "skeletons are trees");
            let a = topo.adjacency();
            for i in 0..v {
                assert_eq!(a[i * v + i], 0.0);
                for j in 0..v {
                    assert_eq!(a[i * v + j], a[j * v + i]);
                }
            }
        }
        assert_eq!(JointTopology::ntu25().center_joint(), 1);
        assert_eq!(JointTopology::nwucla20().center_joint(), 0);
    }

    #[test]
    fn rejects_bad_topologies() {
        let names = |n: usize| (0..n).map(|i| format!("j{i}")).collect::<Vec<_>>();
        assert_eq!(
            JointTopology::new("t", names(3), &[(0, 3)], 0).unwrap_err(),
            TopologyError::EdgeOutOfRange(0, 3)
        );
        assert_eq!(
            JointTopology::new("t", names(3), &[(1, 1)], 0).unwrap_err(),
            TopologyError::SelfLoop(1)
        );
        assert_eq!(
            JointTopology::new("t", names(3), &[(0, 1)], 0).unwrap_err(),
            TopologyError::Disconnected(2)
        );
        assert_eq!(
            JointTopology::new("t", names(2), &[(0, 1)], 5).unwrap_err(),
            TopologyError::CenterOutOfRange(5)
        );
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let names = vec!["a".into(), "b".into()];
        let t = JointTopology::new("t", names, &[(0, 1), (1, 0)], 0).unwrap();
        assert_eq!(t.edges(), &[(0, 1)]);
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(JointTopology::by_name("NTU-25").unwrap().joint_count(), 25);
        assert_eq!(JointTopology::by_name("nwucla20").unwrap().joint_count(), 20);
        assert!(JointTopology::by_name("coco17").is_err());
    }
}
