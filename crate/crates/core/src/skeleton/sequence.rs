use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequenceError {
    #[error("spatial dimension must be 2 or 3, got {0}")]
    Dims(usize),
    #[error("sequence must contain at least one frame")]
    NoFrames,
    #[error("sequence must contain at least one joint")]
    NoJoints,
    #[error("sequence must contain at least one body")]
    NoBodies,
    #[error("body {body} has {found} values, expected {expected}")]
    BodyLength {
        body: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite coordinate in body {body} at flat index {index}")]
    NonFinite { body: usize, index: usize },
}

/// Joint coordinates of one clip, stored per body as a `D×T×V` array.
///
/// After [`select_primary_body`] only one body remains; `body_count` keeps
/// the raw number of bodies seen before selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub sample_id: String,
    pub label: Option<String>,
    dims: usize,
    frames: usize,
    joints: usize,
    bodies: Vec<Vec<f64>>,
    body_count: usize,
}

impl SkeletonSequence {
    pub fn new(
        sample_id: impl Into<String>,
        label: Option<String>,
        dims: usize,
        frames: usize,
        joints: usize,
        bodies: Vec<Vec<f64>>,
    ) -> Result<Self, SequenceError> {
        let body_count = bodies.len();
        Self::with_body_count(sample_id, label, dims, frames, joints, bodies, body_count)
    }

    pub fn with_body_count(
        sample_id: impl Into<String>,
        label: Option<String>,
        dims: usize,
        frames: usize,
        joints: usize,
        bodies: Vec<Vec<f64>>,
        body_count: usize,
    ) -> Result<Self, SequenceError> {
        if !(2..=3).contains(&dims) {
            return Err(SequenceError::Dims(dims));
        }
        if frames == 0 {
            return Err(SequenceError::NoFrames);
        }
        if joints == 0 {
            return Err(SequenceError::NoJoints);
        }
        if bodies.is_empty() {
            return Err(SequenceError::NoBodies);
        }
        let expected = dims * frames * joints;
        for (b, body) in bodies.iter().enumerate() {
            if body.len() != expected {
                return Err(SequenceError::BodyLength {
                    body: b,
                    expected,
                    found: body.len(),
                });
            }
            if let Some(index) = body.iter().position(|v| !v.is_finite()) {
                return Err(SequenceError::NonFinite { body: b, index });
            }
        }
        Ok(Self {
            sample_id: sample_id.into(),
            label,
            dims,
            frames,
            joints,
            bodies,
            body_count: body_count.max(1),
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Raw body count recorded at ingestion.
    pub fn body_count(&self) -> usize {
        self.body_count
    }

    /// Bodies currently held (1 after primary-body selection).
    pub fn bodies(&self) -> &[Vec<f64>] {
        &self.bodies
    }

    /// Coordinates of the first held body, `D×T×V` row-major.
    pub fn coords(&self) -> &[f64] {
        &self.bodies[0]
    }

    #[inline]
    pub fn index(&self, d: usize, t: usize, v: usize) -> usize {
        (d * self.frames + t) * self.joints + v
    }

    pub fn at(&self, d: usize, t: usize, v: usize) -> f64 {
        self.bodies[0][self.index(d, t, v)]
    }

    /// Coordinates of joint `v` at frame `t` of the first body.
    pub fn joint(&self, t: usize, v: usize) -> Vec<f64> {
        (0..self.dims).map(|d| self.at(d, t, v)).collect()
    }

    /// Sum of squared frame-to-frame coordinate differences of one body.
    pub fn motion_energy(&self, body: usize) -> f64 {
        let c = &self.bodies[body];
        let mut e = 0.0;
        for d in 0..self.dims {
            for t in 1..self.frames {
                for v in 0..self.joints {
                    let diff = c[self.index(d, t, v)] - c[self.index(d, t - 1, v)];
                    e += diff * diff;
                }
            }
        }
        e
    }

    pub(crate) fn replace_bodies(&self, frames: usize, bodies: Vec<Vec<f64>>) -> Self {
        debug_assert!(bodies.iter().all(|b| b.len() == self.dims * frames * self.joints));
        Self {
            sample_id: self.sample_id.clone(),
            label: self.label.clone(),
            dims: self.dims,
            frames,
            joints: self.joints,
            bodies,
            body_count: self.body_count,
        }
    }
}

/// Keeps the body with the largest motion energy; ties go to the lowest
/// body index.
pub fn select_primary_body(seq: &SkeletonSequence) -> SkeletonSequence {
    if seq.bodies.len() == 1 {
        return seq.clone();
    }
    let mut best = 0;
    let mut best_energy = seq.motion_energy(0);
    for b in 1..seq.bodies.len() {
        let e = seq.motion_energy(b);
        if e > best_energy {
            best = b;
            best_energy = e;
        }
    }
    seq.replace_bodies(seq.frames, vec![seq.bodies[best].clone()])
}
