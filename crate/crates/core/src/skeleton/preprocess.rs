use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{JointTopology, SkeletonSequence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("target_frames must be at least 1")]
    ZeroTarget,
    #[error("input sequence has no frames")]
    EmptyInput,
    #[error("expected a single-body sequence, found {0} bodies")]
    MultiBody(usize),
    #[error("sequence has {found} joints but topology {topology} has {expected}")]
    JointMismatch {
        topology: String,
        expected: usize,
        found: usize,
    },
    #[error("shoulder alignment requested but topology {0} has no shoulder joints")]
    NoShoulders(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    #[default]
    LoopPad,
    ZeroPad,
    UniformSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_frames: usize,
    pub center: bool,
    pub resample_mode: ResampleMode,
    /// Rotate about the vertical axis so the frame-0 shoulder line lies on x.
    pub align_shoulders: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_frames: 64,
            center: true,
            resample_mode: ResampleMode::LoopPad,
            align_shoulders: false,
        }
    }
}

/// Source frame for every output frame; `None` is a zero frame.
///
/// Longer inputs are subsampled with stride `⌈T_in / target⌉`; any frames
/// still missing (and all missing frames of shorter inputs) are filled
/// according to `mode`.
pub fn frame_index_map(t_in: usize, target: usize, mode: ResampleMode) -> Vec<Option<usize>> {
    assert!(t_in >= 1 && target >= 1);
    let picked: Vec<usize> = if t_in > target {
        let stride = t_in.div_ceil(target);
        (0..t_in).step_by(stride).take(target).collect()
    } else if mode == ResampleMode::UniformSample {
        // nearest-frame upsampling
        (0..target).map(|t| t * t_in / target).collect()
    } else {
        (0..t_in).collect()
    };
    let n = picked.len();
    (0..target)
        .map(|t| {
            if t < n {
                Some(picked[t])
            } else {
                match mode {
                    ResampleMode::ZeroPad => None,
                    ResampleMode::LoopPad | ResampleMode::UniformSample => Some(picked[t % n]),
                }
            }
        })
        .collect()
}

/// Centers, optionally aligns, and resamples a single-body sequence to
/// `cfg.target_frames` frames.
pub fn normalize_sequence(
    seq: &SkeletonSequence,
    topology: &JointTopology,
    cfg: &PreprocessConfig,
) -> Result<SkeletonSequence, PreprocessError> {
    if cfg.target_frames == 0 {
        return Err(PreprocessError::ZeroTarget);
    }
    if seq.frames() == 0 {
        return Err(PreprocessError::EmptyInput);
    }
    if seq.bodies().len() != 1 {
        return Err(PreprocessError::MultiBody(seq.bodies().len()));
    }
    if seq.joints() != topology.joint_count() {
        return Err(PreprocessError::JointMismatch {
            topology: topology.name().to_string(),
            expected: topology.joint_count(),
            found: seq.joints(),
        });
    }
    let (d_len, t_in, v_len) = (seq.dims(), seq.frames(), seq.joints());
    let mut coords = seq.coords().to_vec();
    let idx = |d: usize, t: usize, v: usize| (d * t_in + t) * v_len + v;

    if cfg.center {
        let c = topology.center_joint();
        for d in 0..d_len {
            let origin = coords[idx(d, 0, c)];
            for t in 0..t_in {
                for v in 0..v_len {
                    coords[idx(d, t, v)] -= origin;
                }
            }
        }
    }

    if cfg.align_shoulders && d_len == 3 {
        let (l, r) = topology
            .shoulders()
            .ok_or_else(|| PreprocessError::NoShoulders(topology.name().to_string()))?;
        let dx = coords[idx(0, 0, l)] - coords[idx(0, 0, r)];
        let dz = coords[idx(2, 0, l)] - coords[idx(2, 0, r)];
        if dx != 0.0 || dz != 0.0 {
            // rotate by -atan2(dz, dx) about y
            let theta = dz.atan2(dx);
            let (s, c) = theta.sin_cos();
            for t in 0..t_in {
                for v in 0..v_len {
                    let x = coords[idx(0, t, v)];
                    let z = coords[idx(2, t, v)];
                    coords[idx(0, t, v)] = c * x + s * z;
                    coords[idx(2, t, v)] = -s * x + c * z;
                }
            }
        }
    }

    let target = cfg.target_frames;
    let map = frame_index_map(t_in, target, cfg.resample_mode);
    let mut out = vec![0.0; d_len * target * v_len];
    for d in 0..d_len {
        for (t, src) in map.iter().enumerate() {
            if let Some(s) = *src {
                let dst = (d * target + t) * v_len;
                out[dst..dst + v_len].copy_from_slice(&coords[idx(d, s, 0)..idx(d, s, 0) + v_len]);
            }
        }
    }
    Ok(seq.replace_bodies(target, vec![out]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize) -> SkeletonSequence {
        let v = 25;
        let body = (0..3 * frames * v)
            .map(|i| (i as f64 * 0.37).sin() + 0.5)
            .collect();
        SkeletonSequence::new("s", None, 3, frames, v, vec![body]).unwrap()
    }

    fn cfg(target: usize, center: bool, mode: ResampleMode) -> PreprocessConfig {
        PreprocessConfig {
            target_frames: target,
            center,
            resample_mode: mode,
            align_shoulders: false,
        }
    }

    #[test]
    fn centered_frame_zero_anchor_is_origin() {
        let topo = JointTopology::ntu25();
        let out = normalize_sequence(&seq(40), &topo, &cfg(64, true, ResampleMode::LoopPad)).unwrap();
        for d in 0..3 {
            assert_eq!(out.at(d, 0, topo.center_joint()), 0.0);
        }
    }

    #[test]
    fn identity_when_lengths_match() {
        let topo = JointTopology::ntu25();
        let s = seq(64);
        let out = normalize_sequence(&s, &topo, &cfg(64, false, ResampleMode::LoopPad)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn loop_pad_matches_index_map_oracle() {
        let topo = JointTopology::ntu25();
        let s = seq(32);
        let out = normalize_sequence(&s, &topo, &cfg(64, false, ResampleMode::LoopPad)).unwrap();
        assert_eq!(out.frames(), 64);
        for d in 0..3 {
            for t in 0..64 {
                for v in 0..25 {
                    assert_eq!(out.at(d, t, v), s.at(d, t % 32, v));
                }
            }
        }
    }

    #[test]
    fn zero_pad_fills_with_zeros() {
        let topo = JointTopology::ntu25();
        let out = normalize_sequence(&seq(10), &topo, &cfg(16, false, ResampleMode::ZeroPad)).unwrap();
        assert!((0..3).all(|d| (10..16).all(|t| out.at(d, t, 7) == 0.0)));
        assert_ne!(out.at(0, 9, 7), 0.0);
    }

    #[test]
    fn long_inputs_use_ceil_stride() {
        let map = frame_index_map(200, 64, ResampleMode::UniformSample);
        // stride 4 -> 50 picked frames, the rest loop
        assert_eq!(&map[..3], &[Some(0), Some(4), Some(8)]);
        assert_eq!(map[49], Some(196));
        assert_eq!(map[50], Some(0));
        let exact = frame_index_map(128, 64, ResampleMode::LoopPad);
        assert!(exact.iter().enumerate().all(|(t, s)| *s == Some(2 * t)));
    }

    #[test]
    fn multi_body_is_rejected() {
        let topo = JointTopology::ntu25();
        let b = vec![0.0; 3 * 2 * 25];
        let s = SkeletonSequence::new("s", None, 3, 2, 25, vec![b.clone(), b]).unwrap();
        assert_eq!(
            normalize_sequence(&s, &topo, &PreprocessConfig::default()).unwrap_err(),
            PreprocessError::MultiBody(2)
        );
    }

    #[test]
    fn shoulder_alignment_puts_shoulder_line_on_x() {
        let topo = JointTopology::ntu25();
        let mut c = cfg(8, true, ResampleMode::LoopPad);
        c.align_shoulders = true;
        let out = normalize_sequence(&seq(8), &topo, &c).unwrap();
        let (l, r) = topo.shoulders().unwrap();
        assert!((out.at(2, 0, l) - out.at(2, 0, r)).abs() < 1e-12);
        assert!(out.at(0, 0, l) - out.at(0, 0, r) > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn output_always_has_target_frames(t_in in 1usize..150, target in 1usize..100, mode in 0usize..3) {
                let mode = [ResampleMode::LoopPad, ResampleMode::ZeroPad, ResampleMode::UniformSample][mode];
                let topo = JointTopology::ntu25();
                let out = normalize_sequence(&seq(t_in), &topo, &cfg(target, true, mode)).unwrap();
                prop_assert_eq!(out.frames(), target);
                for d in 0..3 {
                    prop_assert!(out.at(d, 0, topo.center_joint()).abs() < 1e-15);
                }
            }
        }
    }
}
