//! NW-UCLA per-clip JSON: `{"file_name": .., "skeletons": [T][20][3], "label": n}`.
//!
//! `frames` is accepted as an alias of `skeletons`; `file_name` and `label`
//! are optional.

use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{JointTopology, ParseError, SkeletonSequence};

#[derive(Debug, Serialize, Deserialize)]
struct Clip {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
    #[serde(alias = "frames")]
    skeletons: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u32>,
}

pub fn parse_nwucla_sample<R: Read>(
    reader: R,
    topology: &JointTopology,
    sample_id: Option<&str>,
) -> Result<SkeletonSequence, ParseError> {
    let clip: Clip =
        serde_json::from_reader(reader).map_err(|e| ParseError::InvalidJson(e.to_string()))?;
    let joints = topology.joint_count();
    let t_len = clip.skeletons.len();
    if t_len == 0 {
        return Err(ParseError::NoFrames);
    }
    let mut body = vec![0.0; 3 * t_len * joints];
    for (t, frame) in clip.skeletons.iter().enumerate() {
        if frame.len() != joints {
            return Err(ParseError::FrameJointCount {
                frame: t,
                expected: joints,
                found: frame.len(),
            });
        }
        for (v, joint) in frame.iter().enumerate() {
            if joint.len() != 3 {
                return Err(ParseError::CoordinateArity {
                    frame: t,
                    joint: v,
                    found: joint.len(),
                });
            }
            for (d, &val) in joint.iter().enumerate() {
                body[(d * t_len + t) * joints + v] = val;
            }
        }
    }
    let id = sample_id
        .map(str::to_string)
        .or(clip.file_name)
        .unwrap_or_default();
    let label = clip.label.map(|n| format!("A{n}"));
    SkeletonSequence::new(id, label, 3, t_len, joints, vec![body]).map_err(ParseError::from)
}

pub fn parse_nwucla_str(
    text: &str,
    topology: &JointTopology,
    sample_id: Option<&str>,
) -> Result<SkeletonSequence, ParseError> {
    parse_nwucla_sample(text.as_bytes(), topology, sample_id)
}

/// Serializes the primary body in NW-UCLA clip layout.
pub fn write_nwucla_json(seq: &SkeletonSequence) -> String {
    assert_eq!(seq.dims(), 3, "NW-UCLA clips store 3-D coordinates");
    let skeletons = (0..seq.frames())
        .map(|t| (0..seq.joints()).map(|v| seq.joint(t, v)).collect())
        .collect();
    let label = seq
        .label
        .as_deref()
        .and_then(|l| l.strip_prefix('A'))
        .and_then(|n| n.parse().ok());
    let clip = Clip {
        file_name: Some(seq.sample_id.clone()),
        skeletons,
        label,
    };
    serde_json::to_string(&clip).expect("clip serializes")
}
