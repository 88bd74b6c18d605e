//! Skeleton sequences: topologies, raw-format parsers, preprocessing and a
//! synthetic generator.

mod canonical;
mod ntu;
mod nwucla;
mod preprocess;
mod sequence;
mod synth;
mod topology;

use thiserror::Error;

pub use canonical::{
    from_canonical_json, load_dataset, read_manifest, sample_file_name, to_canonical_json,
    write_dataset, CanonicalError, Manifest, SkippedFile, MANIFEST_FILE,
};
pub use ntu::{label_from_sample_id, parse_ntu_skeleton, parse_ntu_skeleton_str, write_ntu_skeleton};
pub use nwucla::{parse_nwucla_sample, parse_nwucla_str, write_nwucla_json};
pub use preprocess::{
    frame_index_map, normalize_sequence, PreprocessConfig, PreprocessError, ResampleMode,
};
pub use sequence::{select_primary_body, SequenceError, SkeletonSequence};
pub use synth::{
    generate_synthetic_dataset, Axis, Motion, MotionComponent, MotionSpec, SynthError, SynthSpec,
};
pub use topology::{BodyGrouping, JointTopology, TopologyError};

/// Errors from the raw NTU and NW-UCLA readers. Line numbers are 1-based.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("missing frame-count header")]
    MissingFrameCount,
    #[error("line {line}: malformed header: {message}")]
    MalformedHeader { line: usize, message: String },
    #[error("line {line}: joint count mismatch: expected {expected}, found {found}")]
    JointCountMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: joint line has fewer than three coordinates")]
    MalformedJointLine { line: usize },
    #[error("line {line}: non-numeric coordinate {token:?}")]
    NonNumeric { line: usize, token: String },
    #[error("line {line}: unexpected end of file")]
    Truncated { line: usize },
    #[error("no bodies found in any frame")]
    NoBodies,
    #[error("read failed: {0}")]
    Io(String),
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("clip has no frames")]
    NoFrames,
    #[error("joint count mismatch at frame {frame}: expected {expected}, found {found}")]
    FrameJointCount {
        frame: usize,
        expected: usize,
        found: usize,
    },
    #[error("frame {frame}, joint {joint}: expected 3 coordinates, found {found}")]
    CoordinateArity {
        frame: usize,
        joint: usize,
        found: usize,
    },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}
