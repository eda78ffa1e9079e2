//! Unified labeling: heterogeneous ship-detection annotations in, uniform
//! image-instruction-answer records out.
//!
//! Two source formats are understood: DOTA-style text (one
//! `x1 y1 x2 y2 x3 y3 x4 y4 class difficulty` line per object) and a JSON
//! horizontal-box format (`{"objects": [{"bbox": [x, y, w, h]}, ...]}`).
//! Directory-level conversion, which needs the filesystem, lives in the
//! companion crate; everything here is pure string-to-value work.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::{serialize_answer, Boxes, Task};
use crate::geometry::{
    canonicalize_quad, quad_bounding_hbox, CoordSpace, HBox, OBox, Point,
};
use crate::rng::Rng;

/// Imaging modality of a source dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Optical,
    Sar,
}

/// One annotated object in pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceObject {
    pub quad: [Point; 4],
    pub class_name: String,
    pub difficulty: i32,
}

/// One image's worth of source annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceAnnotation {
    pub image_id: String,
    pub image_size: (u32, u32),
    pub objects: Vec<SourceObject>,
    pub modality: Modality,
    pub source_dataset: String,
}

/// The unit record of the unified instruction dataset. Serialized as one
/// JSON object per line with exactly these keys, in this order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub image: String,
    pub instruction: String,
    pub answer: String,
    pub task: Task,
    pub source_dataset: String,
    pub modality: Modality,
}

/// Counters for a conversion run, with a per-reason breakdown.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConversionStats {
    pub records_emitted: u64,
    pub objects_dropped: u64,
    pub images_skipped: u64,
    pub reasons: BTreeMap<String, u64>,
}

impl ConversionStats {
    pub fn count(&mut self, reason: &str) {
        *self.reasons.entry(reason.to_string()).or_insert(0) += 1;
    }
}

/// A line that could not be read, kept as a diagnostic rather than an error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineDiagnostic {
    pub line_no: usize,
    pub message: String,
}

/// Which class names count as ships. Matching is case-insensitive.
#[derive(Clone, Debug)]
pub struct ClassFilter {
    allowed: Vec<String>,
}

impl Default for ClassFilter {
    fn default() -> Self {
        ClassFilter {
            allowed: alloc::vec![String::from("ship")],
        }
    }
}

impl ClassFilter {
    pub fn new(names: &[&str]) -> Self {
        ClassFilter {
            allowed: names.iter().map(|n| n.to_ascii_lowercase()).collect(),
        }
    }

    pub fn accepts(&self, class_name: &str) -> bool {
        let lower = class_name.to_ascii_lowercase();
        self.allowed.iter().any(|a| *a == lower)
    }
}

/// Objects recovered from one annotation file, plus what was set aside.
#[derive(Clone, Debug, Default)]
pub struct AnnotationParse {
    pub objects: Vec<SourceObject>,
    pub malformed: Vec<LineDiagnostic>,
    pub class_filtered: u64,
}

/// Labeling failures that are not mere per-line diagnostics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelError {
    /// `convert_record` only builds detection records.
    UnsupportedTask(Task),
    /// The JSON annotation file does not match the documented schema.
    MalformedJson(String),
}

impl core::fmt::Display for LabelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LabelError::UnsupportedTask(t) => write!(f, "unsupported task {t}"),
            LabelError::MalformedJson(msg) => write!(f, "malformed JSON annotation: {msg}"),
        }
    }
}

impl core::error::Error for LabelError {}

/// Parses DOTA-style annotation text: optional `imagesource:`/`gsd:` header
/// lines, then one object per line. Malformed lines become diagnostics, not
/// errors; classes outside the filter are counted and skipped.
pub fn parse_dota_annotation(text: &str, filter: &ClassFilter) -> AnnotationParse {
    let mut out = AnnotationParse::default();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let lower = trimmed.to_ascii_lowercase();
        if lower.starts_with("imagesource:") || lower.starts_with("gsd:") {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() != 10 {
            out.malformed.push(LineDiagnostic {
                line_no,
                message: format!("expected 10 fields, found {}", tokens.len()),
            });
            continue;
        }
        let mut coords = [0.0f64; 8];
        let mut bad = false;
        for (i, tok) in tokens[..8].iter().enumerate() {
            match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => coords[i] = v,
                _ => {
                    bad = true;
                    break;
                }
            }
        }
        let difficulty = tokens[9].parse::<i32>();
        if bad || difficulty.is_err() {
            out.malformed.push(LineDiagnostic {
                line_no,
                message: String::from("unparseable numeric field"),
            });
            continue;
        }
        let class_name = tokens[8].to_string();
        if !filter.accepts(&class_name) {
            out.class_filtered += 1;
            continue;
        }
        out.objects.push(SourceObject {
            quad: [
                Point::new(coords[0], coords[1]),
                Point::new(coords[2], coords[3]),
                Point::new(coords[4], coords[5]),
                Point::new(coords[6], coords[7]),
            ],
            class_name,
            difficulty: difficulty.unwrap(),
        });
    }
    out
}

#[derive(Deserialize)]
struct HbbJsonFile {
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
    objects: Vec<HbbJsonObject>,
}

#[derive(Deserialize)]
struct HbbJsonObject {
    bbox: [f64; 4],
    #[serde(default = "default_category")]
    category: String,
    #[serde(default)]
    difficulty: i32,
}

fn default_category() -> String {
    String::from("ship")
}

/// Parses the JSON horizontal-box annotation format:
/// `{"objects": [{"bbox": [x, y, w, h], "category"?, "difficulty"?}, ...],
///   "width"?, "height"?}` with `bbox` in pixels. Returns the declared
/// dimensions (if any) so callers can cross-check them against the image.
pub fn parse_hbb_json_annotation(
    text: &str,
    filter: &ClassFilter,
) -> Result<(AnnotationParse, Option<(u32, u32)>), LabelError> {
    let file: HbbJsonFile =
        serde_json::from_str(text).map_err(|e| LabelError::MalformedJson(e.to_string()))?;
    let mut out = AnnotationParse::default();
    for (idx, obj) in file.objects.into_iter().enumerate() {
        let [x, y, w, h] = obj.bbox;
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            out.malformed.push(LineDiagnostic {
                line_no: idx + 1,
                message: String::from("non-finite bbox value"),
            });
            continue;
        }
        if !filter.accepts(&obj.category) {
            out.class_filtered += 1;
            continue;
        }
        out.objects.push(SourceObject {
            quad: [
                Point::new(x, y),
                Point::new(x + w, y),
                Point::new(x + w, y + h),
                Point::new(x, y + h),
            ],
            class_name: obj.category,
            difficulty: obj.difficulty,
        });
    }
    let dims = match (file.width, file.height) {
        (Some(w), Some(h)) => Some((w, h)),
        _ => None,
    };
    Ok((out, dims))
}

/// The instruction template for a task.
pub fn build_instruction(task: Task) -> &'static str {
    match task {
        Task::Hbb => "Please detect all ships using the horizontal bounding box.",
        Task::Obb => "Please detect all ships using the oriented bounding box.",
        Task::Caption => "Please describe the image.",
    }
}

const HBB_PARAPHRASES: [&str; 3] = [
    "Please detect all ships using the horizontal bounding box.",
    "Locate every ship with a horizontal bounding box.",
    "Find all ships and report horizontal bounding boxes.",
];

const OBB_PARAPHRASES: [&str; 3] = [
    "Please detect all ships using the oriented bounding box.",
    "Locate every ship with an oriented bounding box.",
    "Find all ships and report oriented bounding boxes.",
];

/// Samples an instruction from a small paraphrase pool (the canonical string
/// included). Only useful when augmentation is explicitly wanted; everything
/// else calls [`build_instruction`].
pub fn build_instruction_augmented(task: Task, rng: &mut Rng) -> &'static str {
    match task {
        Task::Hbb => HBB_PARAPHRASES[rng.below(HBB_PARAPHRASES.len())],
        Task::Obb => OBB_PARAPHRASES[rng.below(OBB_PARAPHRASES.len())],
        Task::Caption => build_instruction(task),
    }
}

/// One converted record together with per-object drop accounting.
#[derive(Clone, Debug)]
pub struct RecordBuild {
    pub record: InstructionRecord,
    pub boxes_kept: usize,
    pub objects_dropped: u64,
    pub drop_reasons: Vec<String>,
}

/// Builds the uniform record for one annotated image: canonicalize quads,
/// derive the task geometry, normalize, sort by (y_min, x_min) of the
/// bounding box, and serialize through the answer grammar. Degenerate or
/// out-of-bounds objects are dropped and counted, never fatal.
pub fn convert_record(
    ann: &SourceAnnotation,
    task: Task,
    image_path: &str,
) -> Result<RecordBuild, LabelError> {
    if task == Task::Caption {
        return Err(LabelError::UnsupportedTask(task));
    }
    let (w, h) = ann.image_size;
    let space = CoordSpace::pixel(w, h);

    // (sort key, serialized geometry)
    let mut hboxes: Vec<HBox> = Vec::new();
    let mut oboxes: Vec<OBox> = Vec::new();
    let mut dropped = 0u64;
    let mut drop_reasons = Vec::new();

    for obj in &ann.objects {
        let canon = match canonicalize_quad(&obj.quad, space) {
            Ok(q) => q,
            Err(_) => {
                dropped += 1;
                drop_reasons.push(String::from("degenerate_quad"));
                continue;
            }
        };
        match task {
            Task::Hbb => {
                let bounding = match quad_bounding_hbox(&canon) {
                    Ok(b) => b,
                    Err(_) => {
                        dropped += 1;
                        drop_reasons.push(String::from("degenerate_quad"));
                        continue;
                    }
                };
                match bounding.rescale(CoordSpace::Normalized) {
                    Ok(n) => hboxes.push(n),
                    Err(_) => {
                        dropped += 1;
                        drop_reasons.push(String::from("out_of_bounds"));
                    }
                }
            }
            Task::Obb => match canon.rescale(CoordSpace::Normalized) {
                Ok(n) => oboxes.push(n),
                Err(_) => {
                    dropped += 1;
                    drop_reasons.push(String::from("out_of_bounds"));
                }
            },
            Task::Caption => unreachable!(),
        }
    }

    let sort_key = |b: &HBox| (b.y_min(), b.x_min());
    let boxes = match task {
        Task::Hbb => {
            hboxes.sort_by(|a, b| sort_key(a).partial_cmp(&sort_key(b)).unwrap());
            Boxes::Horizontal(hboxes)
        }
        Task::Obb => {
            oboxes.sort_by(|a, b| {
                let ka = sort_key(&quad_bounding_hbox(a).unwrap());
                let kb = sort_key(&quad_bounding_hbox(b).unwrap());
                ka.partial_cmp(&kb).unwrap()
            });
            Boxes::Oriented(oboxes)
        }
        Task::Caption => unreachable!(),
    };
    let boxes_kept = boxes.len();
    let answer = serialize_answer(&boxes).expect("normalized canonical boxes");

    Ok(RecordBuild {
        record: InstructionRecord {
            id: format!("{}-{}", ann.image_id, task),
            image: image_path.to_string(),
            instruction: build_instruction(task).to_string(),
            answer,
            task,
            source_dataset: ann.source_dataset.clone(),
            modality: ann.modality,
        },
        boxes_kept,
        objects_dropped: dropped,
        drop_reasons,
    })
}

/// Reference axis-aligned pixel boxes for an annotation, used by the
/// round-trip checks: the bounding box of each canonicalized quad.
pub fn reference_pixel_boxes(ann: &SourceAnnotation) -> Vec<HBox> {
    let (w, h) = ann.image_size;
    let space = CoordSpace::pixel(w, h);
    let mut out: Vec<HBox> = ann
        .objects
        .iter()
        .filter_map(|o| canonicalize_quad(&o.quad, space).ok())
        .filter_map(|q| quad_bounding_hbox(&q).ok())
        .collect();
    out.sort_by(|a, b| {
        (a.y_min(), a.x_min())
            .partial_cmp(&(b.y_min(), b.x_min()))
            .unwrap()
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{parse_answer, Boxes as ParsedBoxes};
    use crate::num;

    fn annotation(objects: Vec<SourceObject>, size: (u32, u32)) -> SourceAnnotation {
        SourceAnnotation {
            image_id: String::from("img1"),
            image_size: size,
            objects,
            modality: Modality::Optical,
            source_dataset: String::from("unit"),
        }
    }

    #[test]
    fn dota_line_parses_to_object() {
        let text = "10 10 50 10 50 30 10 30 ship 0";
        let parsed = parse_dota_annotation(text, &ClassFilter::default());
        assert_eq!(parsed.objects.len(), 1);
        assert!(parsed.malformed.is_empty());
        let obj = &parsed.objects[0];
        assert_eq!(obj.quad[0], Point::new(10.0, 10.0));
        assert_eq!(obj.class_name, "ship");
        assert_eq!(obj.difficulty, 0);
    }

    #[test]
    fn dota_short_line_is_malformed() {
        let text = "10 10 50 10 50 30 10 ship 0\n10 10 50 10 50 30 10 30 ship 0";
        let parsed = parse_dota_annotation(text, &ClassFilter::default());
        assert_eq!(parsed.objects.len(), 1);
        assert_eq!(parsed.malformed.len(), 1);
        assert_eq!(parsed.malformed[0].line_no, 1);
    }

    #[test]
    fn dota_non_ship_filtered() {
        let text = "10 10 50 10 50 30 10 30 plane 0";
        let parsed = parse_dota_annotation(text, &ClassFilter::default());
        assert!(parsed.objects.is_empty());
        assert_eq!(parsed.class_filtered, 1);
    }

    #[test]
    fn dota_headers_skipped() {
        let text = "imagesource:GoogleEarth\ngsd:0.5\n10 10 50 10 50 30 10 30 ship 1";
        let parsed = parse_dota_annotation(text, &ClassFilter::default());
        assert_eq!(parsed.objects.len(), 1);
        assert!(parsed.malformed.is_empty());
    }

    #[test]
    fn hbb_json_parses() {
        let text = r#"{"width": 100, "height": 60,
            "objects": [{"bbox": [10, 10, 40, 20]}, {"bbox": [1, 1, 5, 5], "category": "plane"}]}"#;
        let (parsed, dims) = parse_hbb_json_annotation(text, &ClassFilter::default()).unwrap();
        assert_eq!(dims, Some((100, 60)));
        assert_eq!(parsed.objects.len(), 1);
        assert_eq!(parsed.class_filtered, 1);
        assert_eq!(parsed.objects[0].quad[2], Point::new(50.0, 30.0));
    }

    #[test]
    fn hbb_json_rejects_garbage() {
        assert!(matches!(
            parse_hbb_json_annotation("not json", &ClassFilter::default()),
            Err(LabelError::MalformedJson(_))
        ));
    }

    #[test]
    fn instruction_templates() {
        assert_eq!(
            build_instruction(Task::Hbb),
            "Please detect all ships using the horizontal bounding box."
        );
        assert_eq!(
            build_instruction(Task::Obb),
            "Please detect all ships using the oriented bounding box."
        );
        assert_eq!(build_instruction(Task::Hbb), build_instruction(Task::Hbb));
    }

    #[test]
    fn augmented_instruction_pool_contains_canonical() {
        let mut rng = Rng::new(4);
        let mut seen_canonical = false;
        for _ in 0..50 {
            let s = build_instruction_augmented(Task::Hbb, &mut rng);
            if s == build_instruction(Task::Hbb) {
                seen_canonical = true;
            }
        }
        assert!(seen_canonical);
    }

    #[test]
    fn convert_axis_aligned_quad_to_hbb_answer() {
        let ann = annotation(
            alloc::vec![SourceObject {
                quad: [
                    Point::new(10.0, 20.0),
                    Point::new(50.0, 20.0),
                    Point::new(50.0, 60.0),
                    Point::new(10.0, 60.0),
                ],
                class_name: String::from("ship"),
                difficulty: 0,
            }],
            (100, 100),
        );
        let built = convert_record(&ann, Task::Hbb, "img1.pgm").unwrap();
        assert_eq!(built.record.answer, "[0.100, 0.200, 0.500, 0.600]");
        assert_eq!(built.record.id, "img1-hbb");
        assert_eq!(built.objects_dropped, 0);

        let obb = convert_record(&ann, Task::Obb, "img1.pgm").unwrap();
        let parsed = parse_answer(&obb.record.answer, Task::Obb);
        match parsed.boxes {
            ParsedBoxes::Oriented(list) => {
                assert_eq!(list.len(), 1);
                assert!(list[0].is_canonical());
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn convert_empty_image_gets_empty_sentence() {
        let ann = annotation(alloc::vec![], (100, 100));
        let built = convert_record(&ann, Task::Hbb, "img1.pgm").unwrap();
        assert_eq!(built.record.answer, crate::codec::EMPTY_ANSWER);
        assert_eq!(built.boxes_kept, 0);
    }

    #[test]
    fn degenerate_quad_dropped_with_counter() {
        let ann = annotation(
            alloc::vec![
                SourceObject {
                    quad: [
                        Point::new(10.0, 10.0),
                        Point::new(10.0, 10.0),
                        Point::new(20.0, 20.0),
                        Point::new(10.0, 20.0),
                    ],
                    class_name: String::from("ship"),
                    difficulty: 0,
                },
                SourceObject {
                    quad: [
                        Point::new(30.0, 30.0),
                        Point::new(60.0, 30.0),
                        Point::new(60.0, 50.0),
                        Point::new(30.0, 50.0),
                    ],
                    class_name: String::from("ship"),
                    difficulty: 0,
                },
            ],
            (100, 100),
        );
        let built = convert_record(&ann, Task::Hbb, "img1.pgm").unwrap();
        assert_eq!(built.boxes_kept, 1);
        assert_eq!(built.objects_dropped, 1);
        assert_eq!(built.drop_reasons, alloc::vec![String::from("degenerate_quad")]);
    }

    #[test]
    fn caption_task_rejected() {
        let ann = annotation(alloc::vec![], (10, 10));
        assert!(matches!(
            convert_record(&ann, Task::Caption, "x"),
            Err(LabelError::UnsupportedTask(Task::Caption))
        ));
    }

    #[test]
    fn multi_object_answers_sorted_by_position() {
        let mk = |x0: f64, y0: f64| SourceObject {
            quad: [
                Point::new(x0, y0),
                Point::new(x0 + 10.0, y0),
                Point::new(x0 + 10.0, y0 + 10.0),
                Point::new(x0, y0 + 10.0),
            ],
            class_name: String::from("ship"),
            difficulty: 0,
        };
        // deliberately unsorted input
        let ann = annotation(alloc::vec![mk(50.0, 50.0), mk(10.0, 10.0)], (100, 100));
        let built = convert_record(&ann, Task::Hbb, "img1.pgm").unwrap();
        assert_eq!(
            built.record.answer,
            "[0.100, 0.100, 0.200, 0.200]; [0.500, 0.500, 0.600, 0.600]"
        );
    }

    #[test]
    fn emitted_answers_round_trip_to_pixels_within_one_pixel() {
        let mut rng = Rng::new(9);
        for _ in 0..200 {
            let w = 200 + rng.below(800) as u32;
            let h = 200 + rng.below(800) as u32;
            let mut objects = Vec::new();
            for _ in 0..1 + rng.below(4) {
                let x0 = rng.range(0.0, f64::from(w) * 0.7);
                let y0 = rng.range(0.0, f64::from(h) * 0.7);
                let bw = rng.range(5.0, f64::from(w) * 0.25);
                let bh = rng.range(5.0, f64::from(h) * 0.25);
                let (x1, y1) = ((x0 + bw).min(f64::from(w)), (y0 + bh).min(f64::from(h)));
                objects.push(SourceObject {
                    quad: [
                        Point::new(x0, y0),
                        Point::new(x1, y0),
                        Point::new(x1, y1),
                        Point::new(x0, y1),
                    ],
                    class_name: String::from("ship"),
                    difficulty: 0,
                });
            }
            let ann = annotation(objects, (w, h));
            let built = convert_record(&ann, Task::Hbb, "x.pgm").unwrap();
            let parsed = parse_answer(&built.record.answer, Task::Hbb);
            let reference = reference_pixel_boxes(&ann);
            match parsed.boxes {
                ParsedBoxes::Horizontal(recovered) => {
                    assert_eq!(recovered.len(), reference.len());
                    let space = CoordSpace::pixel(w, h);
                    for (rec, want) in recovered.iter().zip(&reference) {
                        let px = rec.rescale(space).unwrap();
                        for (a, b) in px.coords().iter().zip(want.coords()) {
                            // 3-decimal quantization of normalized coords is
                            // at most half a unit in the last place: 0.0005
                            // of the image extent
                            let bound = 0.0005 * f64::from(w.max(h)) + 1e-9;
                            assert!(num::abs(a - b) <= bound, "|{a} - {b}| > {bound}");
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
    }
}
