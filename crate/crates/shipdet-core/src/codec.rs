//! The answer grammar: a bidirectional mapping between box lists and the
//! coordinate strings used in instruction records and model outputs.
//!
//! Serialization is strict — normalized coordinates, three decimal places,
//! boxes joined by `"; "`, and the fixed sentence `"No ship is detected."`
//! for an empty list. Parsing is total: any UTF-8 input yields a
//! [`DetectionAnswer`], never an error. The parser extracts every bracketed
//! comma-separated numeric group of arity 4 (horizontal) or 8 (oriented),
//! tolerating surrounding prose, odd whitespace, and arbitrary decimal
//! precision; out-of-range values are clamped and inverted min/max pairs
//! swapped, each with a warning.
//!
//! See the repository README for the grammar written out as EBNF.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{canonicalize_quad, hbb_iou, quad_iou, CoordSpace, HBox, OBox, Point};

/// The fixed empty-detection sentence.
pub const EMPTY_ANSWER: &str = "No ship is detected.";

/// Which kind of target a record or answer carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Hbb,
    Obb,
    Caption,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Hbb => "hbb",
            Task::Obb => "obb",
            Task::Caption => "caption",
        }
    }
}

impl core::fmt::Display for Task {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A parsed or to-be-serialized list of boxes of one geometry kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Boxes {
    Horizontal(Vec<HBox>),
    Oriented(Vec<OBox>),
}

impl Boxes {
    pub fn len(&self) -> usize {
        match self {
            Boxes::Horizontal(v) => v.len(),
            Boxes::Oriented(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Boxes::Horizontal(_) => Task::Hbb,
            Boxes::Oriented(_) => Task::Obb,
        }
    }
}

/// Diagnostics attached to a parse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseWarning {
    /// A numeric group had the wrong number of values for the task.
    ArityMismatch { found: usize },
    /// A numeric group contained a non-finite value; the group was skipped.
    InvalidNumber,
    /// A coordinate outside [0, 1] was clamped.
    RangeClamped,
    /// A min/max coordinate pair arrived inverted and was swapped.
    SwappedMinMax,
    /// An oriented group did not form a simple convex quad; skipped.
    DegenerateBox,
    /// No numeric group was found anywhere in the text.
    NothingMatched,
}

impl core::fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ParseWarning::ArityMismatch { found } => {
                write!(f, "bracketed group with {found} values skipped")
            }
            ParseWarning::InvalidNumber => f.write_str("non-finite value in group"),
            ParseWarning::RangeClamped => f.write_str("coordinate clamped into [0, 1]"),
            ParseWarning::SwappedMinMax => f.write_str("inverted min/max swapped"),
            ParseWarning::DegenerateBox => f.write_str("degenerate box skipped"),
            ParseWarning::NothingMatched => f.write_str("no coordinate group found"),
        }
    }
}

/// Result of parsing an answer string.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionAnswer {
    pub boxes: Boxes,
    pub warnings: Vec<ParseWarning>,
}

/// Serialization failures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecError {
    /// Oriented boxes must be canonical before serialization.
    NonCanonicalBox,
    /// Boxes must be in normalized coordinates.
    NotNormalized,
}

impl core::fmt::Display for CodecError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CodecError::NonCanonicalBox => f.write_str("oriented box is not canonical"),
            CodecError::NotNormalized => f.write_str("box is not in normalized coordinates"),
        }
    }
}

impl core::error::Error for CodecError {}

/// Rounds to the grammar's three-decimal resolution; defined as "format,
/// then read back" so it agrees bit-for-bit with serialize followed by parse.
pub fn quantize3(v: f64) -> f64 {
    format!("{v:.3}").parse::<f64>().expect("fixed-width float")
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// Renders boxes as the canonical answer string.
pub fn serialize_answer(boxes: &Boxes) -> Result<String, CodecError> {
    let mut parts: Vec<String> = Vec::new();
    match boxes {
        Boxes::Horizontal(list) => {
            for b in list {
                if b.space() != CoordSpace::Normalized {
                    return Err(CodecError::NotNormalized);
                }
                let [x0, y0, x1, y1] = b.coords();
                parts.push(format!(
                    "[{}, {}, {}, {}]",
                    fmt3(x0),
                    fmt3(y0),
                    fmt3(x1),
                    fmt3(y1)
                ));
            }
        }
        Boxes::Oriented(list) => {
            for q in list {
                if q.space() != CoordSpace::Normalized {
                    return Err(CodecError::NotNormalized);
                }
                if !q.is_canonical() {
                    return Err(CodecError::NonCanonicalBox);
                }
                let rendered: Vec<String> = q.flat_coords().iter().map(|v| fmt3(*v)).collect();
                parts.push(format!("[{}]", rendered.join(", ")));
            }
        }
    }
    if parts.is_empty() {
        return Ok(String::from(EMPTY_ANSWER));
    }
    Ok(parts.join("; "))
}

/// Parses an answer string. Total over arbitrary UTF-8.
pub fn parse_answer(text: &str, task: Task) -> DetectionAnswer {
    let mut warnings = Vec::new();
    let arity = match task {
        Task::Hbb => 4,
        Task::Obb => 8,
        Task::Caption => {
            return DetectionAnswer {
                boxes: Boxes::Horizontal(Vec::new()),
                warnings,
            }
        }
    };

    let mut hboxes: Vec<HBox> = Vec::new();
    let mut oboxes: Vec<OBox> = Vec::new();
    let mut matched_any = false;

    for values in extract_numeric_groups(text) {
        if values.iter().any(|v| !v.is_finite()) {
            warnings.push(ParseWarning::InvalidNumber);
            continue;
        }
        if values.len() != arity {
            warnings.push(ParseWarning::ArityMismatch {
                found: values.len(),
            });
            continue;
        }
        matched_any = true;
        let clamped: Vec<f64> = values
            .iter()
            .map(|&v| {
                let c = v.clamp(0.0, 1.0);
                if c != v {
                    warnings.push(ParseWarning::RangeClamped);
                }
                c
            })
            .collect();
        match task {
            Task::Hbb => {
                let (mut x0, mut y0, mut x1, mut y1) =
                    (clamped[0], clamped[1], clamped[2], clamped[3]);
                if x0 > x1 {
                    core::mem::swap(&mut x0, &mut x1);
                    warnings.push(ParseWarning::SwappedMinMax);
                }
                if y0 > y1 {
                    core::mem::swap(&mut y0, &mut y1);
                    warnings.push(ParseWarning::SwappedMinMax);
                }
                let b = HBox::new(x0, y0, x1, y1, CoordSpace::Normalized)
                    .expect("clamped, ordered, finite");
                hboxes.push(b);
            }
            Task::Obb => {
                let pts = [
                    Point::new(clamped[0], clamped[1]),
                    Point::new(clamped[2], clamped[3]),
                    Point::new(clamped[4], clamped[5]),
                    Point::new(clamped[6], clamped[7]),
                ];
                match canonicalize_quad(&pts, CoordSpace::Normalized) {
                    Ok(q) => oboxes.push(q),
                    Err(_) => warnings.push(ParseWarning::DegenerateBox),
                }
            }
            Task::Caption => unreachable!(),
        }
    }

    if !matched_any && !text.contains(EMPTY_ANSWER) {
        warnings.push(ParseWarning::NothingMatched);
    }

    DetectionAnswer {
        boxes: match task {
            Task::Hbb => Boxes::Horizontal(hboxes),
            Task::Obb => Boxes::Oriented(oboxes),
            Task::Caption => unreachable!(),
        },
        warnings,
    }
}

// Scans for bracketed segments and tries to read each as a comma-separated
// float list. A '[' nested before the matching ']' restarts the scan at the
// inner bracket, so only innermost groups are considered. Groups that are
// not float lists are ignored entirely.
fn extract_numeric_groups(text: &str) -> Vec<Vec<f64>> {
    let bytes = text.as_bytes();
    let mut groups = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let Some(rel) = bytes[pos..].iter().position(|&b| b == b'[') else {
            break;
        };
        let open = pos + rel;
        let mut next = open + 1;
        let mut close = None;
        while next < bytes.len() {
            match bytes[next] {
                b']' => {
                    close = Some(next);
                    break;
                }
                b'[' => break,
                _ => next += 1,
            }
        }
        match close {
            Some(end) => {
                // '[' and ']' are ASCII, so the slice stays on char bounds
                if let Some(values) = parse_group(&text[open + 1..end]) {
                    groups.push(values);
                }
                pos = end + 1;
            }
            None => {
                // either a nested '[' (rescan from it) or end of input
                pos = next;
            }
        }
    }
    groups
}

fn parse_group(inner: &str) -> Option<Vec<f64>> {
    if inner.trim().is_empty() {
        return None;
    }
    let mut values = Vec::new();
    for token in inner.split(',') {
        values.push(token.trim().parse::<f64>().ok()?);
    }
    Some(values)
}

/// Post-parse quality checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValidationIssue {
    /// Coordinate outside [0, 1] (cannot occur after a clamping parse, but
    /// hand-built answers are checked too).
    OutOfRange { box_index: usize },
    /// Zero-width or zero-height box.
    DegenerateBox { box_index: usize },
    /// Two boxes with IoU above 0.999.
    DuplicateBoxes { first: usize, second: usize },
}

impl core::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ValidationIssue::OutOfRange { box_index } => {
                write!(f, "box {box_index} outside [0, 1]")
            }
            ValidationIssue::DegenerateBox { box_index } => {
                write!(f, "box {box_index} is degenerate")
            }
            ValidationIssue::DuplicateBoxes { first, second } => {
                write!(f, "boxes {first} and {second} duplicate each other")
            }
        }
    }
}

/// Reports range violations, degenerate boxes, and near-duplicate pairs
/// (IoU > 0.999).
pub fn validate_answer(answer: &DetectionAnswer) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    match &answer.boxes {
        Boxes::Horizontal(list) => {
            for (i, b) in list.iter().enumerate() {
                if b.coords().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    issues.push(ValidationIssue::OutOfRange { box_index: i });
                }
                if b.width() == 0.0 || b.height() == 0.0 {
                    issues.push(ValidationIssue::DegenerateBox { box_index: i });
                }
            }
            for i in 0..list.len() {
                for j in i + 1..list.len() {
                    if hbb_iou(&list[i], &list[j]).unwrap_or(0.0) > 0.999 {
                        issues.push(ValidationIssue::DuplicateBoxes { first: i, second: j });
                    }
                }
            }
        }
        Boxes::Oriented(list) => {
            for (i, q) in list.iter().enumerate() {
                if q.flat_coords().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    issues.push(ValidationIssue::OutOfRange { box_index: i });
                }
            }
            for i in 0..list.len() {
                for j in i + 1..list.len() {
                    if quad_iou(&list[i], &list[j]).unwrap_or(0.0) > 0.999 {
                        issues.push(ValidationIssue::DuplicateBoxes { first: i, second: j });
                    }
                }
            }
        }
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::testkit;
    use alloc::string::ToString;
    use alloc::vec;

    fn hbox(x0: f64, y0: f64, x1: f64, y1: f64) -> HBox {
        HBox::new(x0, y0, x1, y1, CoordSpace::Normalized).unwrap()
    }

    #[test]
    fn serialize_single_hbox() {
        let s = serialize_answer(&Boxes::Horizontal(vec![hbox(0.1, 0.2, 0.5, 0.6)])).unwrap();
        assert_eq!(s, "[0.100, 0.200, 0.500, 0.600]");
    }

    #[test]
    fn serialize_empty_is_fixed_sentence() {
        let s = serialize_answer(&Boxes::Horizontal(vec![])).unwrap();
        assert_eq!(s, EMPTY_ANSWER);
    }

    #[test]
    fn serialize_two_boxes_joined() {
        let s = serialize_answer(&Boxes::Horizontal(vec![
            hbox(0.1, 0.2, 0.5, 0.6),
            hbox(0.3, 0.4, 0.7, 0.8),
        ]))
        .unwrap();
        assert_eq!(
            s,
            "[0.100, 0.200, 0.500, 0.600]; [0.300, 0.400, 0.700, 0.800]"
        );
    }

    #[test]
    fn serialize_rejects_raw_quads_and_pixel_boxes() {
        let raw = OBox::raw(
            [
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(1.0, 1.0),
                Point::new(0.0, 1.0),
            ],
            CoordSpace::Normalized,
        );
        assert_eq!(
            serialize_answer(&Boxes::Oriented(vec![raw])),
            Err(CodecError::NonCanonicalBox)
        );
        let px = HBox::new(0.0, 0.0, 5.0, 5.0, CoordSpace::pixel(10, 10)).unwrap();
        assert_eq!(
            serialize_answer(&Boxes::Horizontal(vec![px])),
            Err(CodecError::NotNormalized)
        );
    }

    #[test]
    fn parse_tolerates_prose() {
        let a = parse_answer("Sure! The ships: [0.100, 0.200, 0.500, 0.600]", Task::Hbb);
        assert_eq!(a.boxes, Boxes::Horizontal(vec![hbox(0.1, 0.2, 0.5, 0.6)]));
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn parse_arity_mismatch_warns() {
        let a = parse_answer("[0.1, 0.2, 0.5]", Task::Hbb);
        assert!(a.boxes.is_empty());
        assert!(a
            .warnings
            .contains(&ParseWarning::ArityMismatch { found: 3 }));
    }

    #[test]
    fn parse_clamps_and_swaps() {
        let a = parse_answer("[0.9, 0.2, 0.5, 1.4]", Task::Hbb);
        assert_eq!(a.boxes, Boxes::Horizontal(vec![hbox(0.5, 0.2, 0.9, 1.0)]));
        assert!(a.warnings.contains(&ParseWarning::RangeClamped));
        assert!(a.warnings.contains(&ParseWarning::SwappedMinMax));
    }

    #[test]
    fn parse_empty_sentence_is_clean() {
        let a = parse_answer(EMPTY_ANSWER, Task::Hbb);
        assert!(a.boxes.is_empty());
        assert!(a.warnings.is_empty());
        let b = parse_answer("nothing here at all", Task::Hbb);
        assert!(b.boxes.is_empty());
        assert_eq!(b.warnings, vec![ParseWarning::NothingMatched]);
    }

    #[test]
    fn parse_skips_non_numeric_and_nested_brackets() {
        let a = parse_answer(
            "[note] then [[0.1, 0.2, 0.3, 0.4]] and [inf, 0, 0, 1]",
            Task::Hbb,
        );
        assert_eq!(a.boxes.len(), 1);
        assert!(a.warnings.contains(&ParseWarning::InvalidNumber));
    }

    #[test]
    fn round_trip_exact_at_three_decimals() {
        let mut rng = Rng::new(31);
        for _ in 0..1000 {
            // horizontal
            let n = rng.below(4);
            let mut list = Vec::new();
            for _ in 0..n {
                list.push(testkit::random_normalized_hbox(&mut rng));
            }
            let text = serialize_answer(&Boxes::Horizontal(list.clone())).unwrap();
            let parsed = parse_answer(&text, Task::Hbb);
            let expected: Vec<HBox> = list
                .iter()
                .map(|b| {
                    let [x0, y0, x1, y1] = b.coords();
                    hbox(quantize3(x0), quantize3(y0), quantize3(x1), quantize3(y1))
                })
                .collect();
            assert_eq!(parsed.boxes, Boxes::Horizontal(expected));

            // oriented
            let q = canonicalize_quad(
                &testkit::random_convex_quad(&mut rng),
                CoordSpace::Normalized,
            )
            .unwrap();
            let text = serialize_answer(&Boxes::Oriented(vec![q])).unwrap();
            let parsed = parse_answer(&text, Task::Obb);
            let pts = q
                .vertices()
                .map(|p| Point::new(quantize3(p.x), quantize3(p.y)));
            let expected = canonicalize_quad(&pts, CoordSpace::Normalized).unwrap();
            assert_eq!(parsed.boxes, Boxes::Oriented(vec![expected]));
        }
    }

    #[test]
    fn parser_total_on_random_bytes() {
        let mut rng = Rng::new(99);
        for _ in 0..10_000 {
            let len = rng.below(64);
            let bytes: Vec<u8> = (0..len).map(|_| rng.below(256) as u8).collect();
            let text = alloc::string::String::from_utf8_lossy(&bytes).to_string();
            let _ = parse_answer(&text, Task::Hbb);
            let _ = parse_answer(&text, Task::Obb);
        }
    }

    #[test]
    fn parsed_quads_are_canonical() {
        let a = parse_answer("[0.8, 0.8, 0.2, 0.2, 0.8, 0.2, 0.2, 0.8]", Task::Obb);
        match &a.boxes {
            Boxes::Oriented(list) => {
                assert_eq!(list.len(), 1);
                assert!(list[0].is_canonical());
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn validate_flags_duplicates_and_degenerates() {
        let good = parse_answer("[0.100, 0.200, 0.500, 0.600]", Task::Hbb);
        assert!(validate_answer(&good).is_empty());

        let dup = DetectionAnswer {
            boxes: Boxes::Horizontal(vec![hbox(0.1, 0.1, 0.4, 0.4), hbox(0.1, 0.1, 0.4, 0.4)]),
            warnings: vec![],
        };
        assert_eq!(
            validate_answer(&dup),
            vec![ValidationIssue::DuplicateBoxes { first: 0, second: 1 }]
        );

        let degen = DetectionAnswer {
            boxes: Boxes::Horizontal(vec![hbox(0.3, 0.2, 0.3, 0.6)]),
            warnings: vec![],
        };
        assert_eq!(
            validate_answer(&degen),
            vec![ValidationIssue::DegenerateBox { box_index: 0 }]
        );
    }
}
