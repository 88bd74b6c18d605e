//! NTU RGB+D `.skeleton` text format.
//!
//! ```text
//! <frame count>
//! per frame:  <body count>
//!   per body: <body header: bodyID + 9 tracking fields>
//!             <joint count>
//!             per joint: x y z depthX depthY colorX colorY oW oX oY oZ state
//! ```
//!
//! Bodies are identified across frames by their `bodyID`, in order of first
//! appearance. Frames where a body is not tracked hold zeros for it.

use std::io::{BufRead, Write};

use super::{JointTopology, ParseError, SkeletonSequence};

struct Lines<R> {
    reader: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> Lines<R> {
    fn new(reader: R) -> Self {
        Self {
            reader,
            line_no: 0,
            buf: String::new(),
        }
    }

    /// Next non-blank line, trimmed. `None` at end of stream.
    fn next(&mut self) -> Result<Option<&str>, ParseError> {
        loop {
            self.buf.clear();
            let n = self
                .reader
                .read_line(&mut self.buf)
                .map_err(|e| ParseError::Io(e.to_string()))?;
            if n == 0 {
                return Ok(None);
            }
            self.line_no += 1;
            if !self.buf.trim().is_empty() {
                return Ok(Some(self.buf.trim()));
            }
        }
    }

    /// Next non-blank line with its line number.
    fn expect(&mut self) -> Result<(usize, &str), ParseError> {
        let line = self.line_no + 1;
        match self.next()? {
            Some(_) => Ok((self.line_no, self.buf.trim())),
            None => Err(ParseError::Truncated { line }),
        }
    }

    fn expect_count(&mut self, what: &'static str) -> Result<usize, ParseError> {
        let (line, text) = self.expect()?;
        parse_count(text).ok_or_else(|| ParseError::MalformedHeader {
            line,
            message: format!("expected {what}, found {text:?}"),
        })
    }
}

fn parse_count(text: &str) -> Option<usize> {
    let mut fields = text.split_whitespace();
    let first = fields.next()?;
    if fields.next().is_some() {
        return None;
    }
    first.parse().ok()
}

/// Decodes the action label from an NTU sample name such as
/// `S001C002P003R002A013`, yielding `A13`.
pub fn label_from_sample_id(sample_id: &str) -> Option<String> {
    let bytes = sample_id.as_bytes();
    let mut i = 0;
    let mut found = None;
    while i < bytes.len() {
        if bytes[i] == b'A' {
            let digits: String = sample_id[i + 1..]
                .chars()
                .take_while(|c| c.is_ascii_digit())
                .collect();
            if digits.len() == 3 {
                found = digits.parse::<u32>().ok().map(|n| format!("A{n}"));
            }
        }
        i += 1;
    }
    found
}

/// Parses one `.skeleton` stream.
///
/// `sample_id` is usually the file stem; when it carries an `AXXX` field the
/// label is decoded from it.
pub fn parse_ntu_skeleton<R: BufRead>(
    reader: R,
    topology: &JointTopology,
    sample_id: Option<&str>,
) -> Result<SkeletonSequence, ParseError> {
    let joints = topology.joint_count();
    let mut lines = Lines::new(reader);

    let frame_count = match lines.next()? {
        None => return Err(ParseError::MissingFrameCount),
        Some(text) => parse_count(text).ok_or_else(|| ParseError::MalformedHeader {
            line: 1,
            message: format!("expected frame count, found {text:?}"),
        })?,
    };
    if frame_count == 0 {
        return Err(ParseError::MalformedHeader {
            line: lines.line_no,
            message: "frame count is zero".into(),
        });
    }

    // per body id: per frame, Option<[x,y,z] x V>
    let mut body_ids: Vec<String> = Vec::new();
    let mut frames: Vec<Vec<Option<Vec<f64>>>> = Vec::new();

    for t in 0..frame_count {
        let body_count = lines.expect_count("body count")?;
        for _ in 0..body_count {
            let (_, header) = lines.expect()?;
            let id = header
                .split_whitespace()
                .next()
                .expect("non-blank line has a field")
                .to_string();
            let b = match body_ids.iter().position(|x| *x == id) {
                Some(b) => b,
                None => {
                    body_ids.push(id);
                    frames.push(vec![None; frame_count]);
                    body_ids.len() - 1
                }
            };
            let jc = lines.expect_count("joint count")?;
            if jc != joints {
                return Err(ParseError::JointCountMismatch {
                    line: lines.line_no,
                    expected: joints,
                    found: jc,
                });
            }
            let mut coords = Vec::with_capacity(3 * joints);
            for _ in 0..joints {
                let (line, text) = lines.expect()?;
                let mut fields = text.split_whitespace();
                for _ in 0..3 {
                    let tok = fields
                        .next()
                        .ok_or(ParseError::MalformedJointLine { line })?;
                    let val: f64 = tok.parse().map_err(|_| ParseError::NonNumeric {
                        line,
                        token: tok.to_string(),
                    })?;
                    if !val.is_finite() {
                        return Err(ParseError::NonNumeric {
                            line,
                            token: tok.to_string(),
                        });
                    }
                    coords.push(val);
                }
            }
            if frames[b][t].is_some() {
                return Err(ParseError::MalformedHeader {
                    line: lines.line_no,
                    message: format!("body {} appears twice in frame {t}", body_ids[b]),
                });
            }
            frames[b][t] = Some(coords);
        }
    }

    if body_ids.is_empty() {
        return Err(ParseError::NoBodies);
    }

    let bodies = frames
        .into_iter()
        .map(|per_frame| {
            let mut out = vec![0.0; 3 * frame_count * joints];
            for (t, coords) in per_frame.into_iter().enumerate() {
                if let Some(c) = coords {
                    for v in 0..joints {
                        for d in 0..3 {
                            out[(d * frame_count + t) * joints + v] = c[v * 3 + d];
                        }
                    }
                }
            }
            out
        })
        .collect();

    let sample = sample_id.unwrap_or("").to_string();
    let label = label_from_sample_id(&sample);
    SkeletonSequence::new(sample, label, 3, frame_count, joints, bodies).map_err(ParseError::from)
}

/// Convenience wrapper over [`parse_ntu_skeleton`] for in-memory text.
pub fn parse_ntu_skeleton_str(
    text: &str,
    topology: &JointTopology,
    sample_id: Option<&str>,
) -> Result<SkeletonSequence, ParseError> {
    parse_ntu_skeleton(text.as_bytes(), topology, sample_id)
}

/// Writes every held body of a 3-D sequence in `.skeleton` layout. Tracking
/// fields that the sequence does not carry are written as zeros.
pub fn write_ntu_skeleton<W: Write>(seq: &SkeletonSequence, mut out: W) -> std::io::Result<()> {
    assert_eq!(seq.dims(), 3, "NTU format stores 3-D coordinates");
    let (t_len, v_len) = (seq.frames(), seq.joints());
    writeln!(out, "{t_len}")?;
    for t in 0..t_len {
        writeln!(out, "{}", seq.bodies().len())?;
        for (b, body) in seq.bodies().iter().enumerate() {
            writeln!(out, "{} 0 1 2 1 2 0 0 0 2", 72057594037931100u64 + b as u64)?;
            writeln!(out, "{v_len}")?;
            for v in 0..v_len {
                let x = body[t * v_len + v];
                let y = body[(t_len + t) * v_len + v];
                let z = body[(2 * t_len + t) * v_len + v];
                writeln!(out, "{x} {y} {z} 0 0 0 0 0 0 0 0 2")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joint_line(x: f64, y: f64, z: f64) -> String {
        format!("{x} {y} {z} 250.1 180.4 960.2 540.7 0.1 0.2 0.3 0.9 2\n")
    }

    fn file(frames: usize, bodies: usize) -> String {
        let mut s = format!("{frames}\n");
        for t in 0..frames {
            s.push_str(&format!("{bodies}\n"));
            for b in 0..bodies {
                s.push_str(&format!("7205759403792{b} 0 1 1 1 1 0 -0.1 0.2 2\n25\n"));
                for v in 0..25 {
                    s.push_str(&joint_line(v as f64 * 0.1, t as f64, b as f64));
                }
            }
        }
        s
    }

    #[test]
    fn parses_well_formed_two_frame_file() {
        let topo = JointTopology::ntu25();
        let seq = parse_ntu_skeleton_str(&file(2, 1), &topo, Some("S001C001P001R001A007")).unwrap();
        assert_eq!(seq.dims(), 3);
        assert_eq!(seq.frames(), 2);
        assert_eq!(seq.joints(), 25);
        assert_eq!(seq.label.as_deref(), Some("A7"));
        assert_eq!(seq.at(0, 1, 3), 0.30000000000000004);
        assert_eq!(seq.at(1, 1, 3), 1.0);
    }

    #[test]
    fn multi_body_frames_are_retained() {
        let topo = JointTopology::ntu25();
        let seq = parse_ntu_skeleton_str(&file(3, 2), &topo, None).unwrap();
        assert_eq!(seq.body_count(), 2);
        assert_eq!(seq.bodies().len(), 2);
        assert_eq!(seq.bodies()[1][2 * 3 * 25], 1.0);
    }

    #[test]
    fn empty_stream_is_missing_header() {
        let topo = JointTopology::ntu25();
        let err = parse_ntu_skeleton_str("", &topo, None).unwrap_err();
        assert_eq!(err, ParseError::MissingFrameCount);
        assert_eq!(err.to_string(), "missing frame-count header");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let topo = JointTopology::ntu25();
        let good = file(1, 1);

        let bad_count = good.replacen("\n25\n", "\n24\n", 1);
        assert_eq!(
            parse_ntu_skeleton_str(&bad_count, &topo, None).unwrap_err(),
            ParseError::JointCountMismatch {
                line: 4,
                expected: 25,
                found: 24
            }
        );

        let mut lines: Vec<&str> = good.lines().collect();
        lines[6] = "0.2 abc 0 0 0 0 0 0 0 0 0 2";
        let bad_num = lines.join("\n");
        assert_eq!(
            parse_ntu_skeleton_str(&bad_num, &topo, None).unwrap_err(),
            ParseError::NonNumeric {
                line: 7,
                token: "abc".into()
            }
        );

        let truncated: String = good.lines().take(10).collect::<Vec<_>>().join("\n");
        assert_eq!(
            parse_ntu_skeleton_str(&truncated, &topo, None).unwrap_err(),
            ParseError::Truncated { line: 11 }
        );

        assert!(matches!(
            parse_ntu_skeleton_str("two\n", &topo, None).unwrap_err(),
            ParseError::MalformedHeader { line: 1, .. }
        ));
    }

    #[test]
    fn label_decoding() {
        assert_eq!(label_from_sample_id("S017C003P020R002A120").as_deref(), Some("A120"));
        assert_eq!(label_from_sample_id("S001C001P001R001A001.skeleton").as_deref(), Some("A1"));
        assert_eq!(label_from_sample_id("clip_7"), None);
    }

    #[test]
    fn write_then_parse_round_trips_four_frames() {
        let topo = JointTopology::ntu25();
        let body: Vec<f64> = (0..3 * 4 * 25).map(|i| (i as f64 * 0.731).sin() * 1.7).collect();
        let seq = SkeletonSequence::new("S001C001P001R001A042", Some("A42".into()), 3, 4, 25, vec![body])
            .unwrap();
        let mut buf = Vec::new();
        write_ntu_skeleton(&seq, &mut buf).unwrap();
        let back = parse_ntu_skeleton(buf.as_slice(), &topo, Some(&seq.sample_id)).unwrap();
        assert_eq!(back.coords(), seq.coords());
        assert_eq!(back.label, seq.label);
    }
}
