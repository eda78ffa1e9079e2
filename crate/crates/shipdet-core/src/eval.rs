//! Zero-shot-style detection evaluation: confidence-ranked greedy matching,
//! precision-recall curves, average precision at multiple IoU thresholds,
//! and report formatting.
//!
//! AP is the all-points interpolated variant: the area under the precision
//! envelope (precision at recall r replaced by the maximum precision at any
//! recall >= r), integrated exactly over the recall steps of the sweep. The
//! sweep produces one point per prediction in processing order, which for
//! distinct confidences is the same as sweeping every distinct confidence
//! cutoff; with tied confidences the processing order (input order) defines
//! the curve, keeping "constant scorer" exactly equivalent to
//! "no confidence, ranked by input order".

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::Task;
use crate::fusion::EncoderStandIn;
use crate::geometry::{hbb_iou, quad_iou, CoordSpace, HBox, OBox, EPS_BOUNDS};
use crate::num;
use crate::raster::GrayImage;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvalError {
    /// Mixed box geometries (horizontal vs oriented) in one evaluation.
    GeometryMismatch,
    /// AP is undefined without any ground-truth box.
    NoGroundTruth,
    /// Confidence not finite or outside [0, 1].
    BadConfidence,
    /// IoU threshold outside (0, 1].
    BadThreshold,
    /// Box outside the image when scoring confidence.
    OutOfBounds,
    /// Reports cannot be merged (different tasks or thresholds).
    IncompatibleReports(String),
    /// Summary CSV text did not parse.
    CsvParse(String),
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::GeometryMismatch => f.write_str("mixed box geometries"),
            EvalError::NoGroundTruth => f.write_str("no ground-truth boxes; AP undefined"),
            EvalError::BadConfidence => f.write_str("confidence outside [0, 1]"),
            EvalError::BadThreshold => f.write_str("IoU threshold outside (0, 1]"),
            EvalError::OutOfBounds => f.write_str("box outside image bounds"),
            EvalError::IncompatibleReports(msg) => write!(f, "incompatible reports: {msg}"),
            EvalError::CsvParse(msg) => write!(f, "summary CSV parse error: {msg}"),
        }
    }
}

impl core::error::Error for EvalError {}

/// A box of either geometry, in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum GeomBox {
    Horizontal(HBox),
    Oriented(OBox),
}

impl GeomBox {
    pub fn task(&self) -> Task {
        match self {
            GeomBox::Horizontal(_) => Task::Hbb,
            GeomBox::Oriented(_) => Task::Obb,
        }
    }

    pub fn iou(&self, other: &GeomBox) -> Result<f64, EvalError> {
        match (self, other) {
            (GeomBox::Horizontal(a), GeomBox::Horizontal(b)) => {
                hbb_iou(a, b).map_err(|_| EvalError::GeometryMismatch)
            }
            (GeomBox::Oriented(a), GeomBox::Oriented(b)) => {
                quad_iou(a, b).map_err(|_| EvalError::GeometryMismatch)
            }
            _ => Err(EvalError::GeometryMismatch),
        }
    }

    /// Tightest axis-aligned box (identity for horizontal boxes).
    pub fn bounding_hbox(&self) -> HBox {
        match self {
            GeomBox::Horizontal(b) => *b,
            GeomBox::Oriented(q) => {
                crate::geometry::quad_bounding_hbox(q).expect("canonical quad")
            }
        }
    }
}

/// One scored predicted box on one image.
#[derive(Clone, Debug)]
pub struct Detection {
    pub image_id: String,
    pub bbox: GeomBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(image_id: &str, bbox: GeomBox, confidence: f64) -> Result<Self, EvalError> {
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(EvalError::BadConfidence);
        }
        Ok(Detection {
            image_id: image_id.to_string(),
            bbox,
            confidence,
        })
    }
}

/// Outcome of matching one image's predictions against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// One entry per prediction, in processing order (descending confidence,
    /// ties by input order): the original index, its TP/FP label, and the
    /// matched ground-truth index for TPs.
    pub labels: Vec<MatchLabel>,
    pub num_gt: usize,
    pub false_negatives: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchLabel {
    pub pred_index: usize,
    pub is_tp: bool,
    pub matched_gt: Option<usize>,
}

/// Greedy matching: predictions in descending confidence order each claim
/// the unmatched ground-truth box of highest IoU, and are a true positive
/// when that IoU reaches `tau`. IoU ties go to the lower ground-truth index.
pub fn match_detections(
    preds: &[Detection],
    gts: &[GeomBox],
    tau: f64,
) -> Result<MatchResult, EvalError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(EvalError::BadThreshold);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut gt_taken = alloc::vec![false; gts.len()];
    let mut labels = Vec::with_capacity(preds.len());
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let iou = preds[pi].bbox.iou(gt)?;
            let better = match best {
                None => true,
                Some((_, bi)) => iou > bi,
            };
            if better {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= tau => {
                gt_taken[gi] = true;
                labels.push(MatchLabel {
                    pred_index: pi,
                    is_tp: true,
                    matched_gt: Some(gi),
                });
            }
            _ => labels.push(MatchLabel {
                pred_index: pi,
                is_tp: false,
                matched_gt: None,
            }),
        }
    }
    let false_negatives = gt_taken.iter().filter(|t| !**t).count();
    Ok(MatchResult {
        labels,
        num_gt: gts.len(),
        false_negatives,
    })
}

/// One point of a precision-recall sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub confidence: f64,
    pub tp: u64,
    pub fp: u64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall curve over descending confidence cutoffs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub num_gt: u64,
}

/// Builds the curve from (confidence, is_tp) labels pooled across images.
/// Labels are processed in descending confidence (stable over the given
/// order for ties); every prediction contributes one cumulative point.
pub fn pr_curve(labels: &[(f64, bool)], num_gt: usize) -> Result<PRCurve, EvalError> {
    if num_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        labels[b].0.partial_cmp(&labels[a].0).unwrap().then(a.cmp(&b))
    });
    let mut points = Vec::with_capacity(labels.len());
    let (mut tp, mut fp) = (0u64, 0u64);
    for &i in &order {
        let (conf, is_tp) = labels[i];
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PRPoint {
            confidence: conf,
            tp,
            fp,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / num_gt as f64,
        });
    }
    Ok(PRCurve {
        points,
        num_gt: num_gt as u64,
    })
}

/// All-points interpolated AP: exact area under the precision envelope.
pub fn average_precision(curve: &PRCurve) -> f64 {
    let n = curve.points.len();
    if n == 0 {
        return 0.0;
    }
    // suffix max of precision = envelope value at each sweep point
    let mut envelope = alloc::vec![0.0f64; n];
    let mut running = 0.0f64;
    for i in (0..n).rev() {
        running = running.max(curve.points[i].precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        let r = curve.points[i].recall;
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    ap
}

/// AP at one threshold plus its underlying curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub iou_threshold: f64,
    pub ap: f64,
    pub curve: PRCurve,
}

/// Full evaluation result; the canonical JSON report serializes this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub task: Task,
    pub entries: Vec<ApEntry>,
    pub num_images: usize,
    pub num_detections: usize,
    pub num_ground_truth: usize,
}

/// Evaluates predictions against per-image ground truth at each threshold.
/// Ground truth is a map from image id to its boxes (empty lists are
/// meaningful: images known to contain no ships). Predictions for unknown
/// images count as false positives.
pub fn evaluate(
    preds: &[Detection],
    gts: &BTreeMap<String, Vec<GeomBox>>,
    task: Task,
    thresholds: &[f64],
) -> Result<Vec<ApEntry>, EvalError> {
    let mut taus: Vec<f64> = thresholds.to_vec();
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(EvalError::BadThreshold);
    }
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    taus.dedup();

    for p in preds {
        if p.bbox.task() != task {
            return Err(EvalError::GeometryMismatch);
        }
        if !p.confidence.is_finite() || !(0.0..=1.0).contains(&p.confidence) {
            return Err(EvalError::BadConfidence);
        }
    }
    for boxes in gts.values() {
        if boxes.iter().any(|b| b.task() != task) {
            return Err(EvalError::GeometryMismatch);
        }
    }

    let total_gt: usize = gts.values().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }

    // group predictions by image, preserving input order within an image;
    // iterate images in sorted order for determinism
    let mut grouped: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for p in preds {
        grouped.entry(p.image_id.as_str()).or_default().push(p);
    }

    static EMPTY: Vec<GeomBox> = Vec::new();
    let mut entries = Vec::new();
    for tau in taus {
        let mut labels: Vec<(f64, bool)> = Vec::with_capacity(preds.len());
        for (image_id, image_preds) in &grouped {
            let owned: Vec<Detection> = image_preds.iter().map(|p| (*p).clone()).collect();
            let gt_boxes = gts.get(*image_id).unwrap_or(&EMPTY);
            let matched = match_detections(&owned, gt_boxes, tau)?;
            for label in matched.labels {
                labels.push((owned[label.pred_index].confidence, label.is_tp));
            }
        }
        let curve = pr_curve(&labels, total_gt)?;
        let ap = average_precision(&curve);
        entries.push(ApEntry {
            iou_threshold: tau,
            ap,
            curve,
        });
    }
    Ok(entries)
}

impl EvalReport {
    pub fn new(
        method: &str,
        dataset: &str,
        task: Task,
        entries: Vec<ApEntry>,
        num_images: usize,
        num_detections: usize,
        num_ground_truth: usize,
    ) -> Self {
        EvalReport {
            method: method.to_string(),
            dataset: dataset.to_string(),
            task,
            entries,
            num_images,
            num_detections,
            num_ground_truth,
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.iou_threshold).collect()
    }

    pub fn summary_row(&self) -> ReportRow {
        ReportRow {
            method: self.method.clone(),
            dataset: self.dataset.clone(),
            aps: self.entries.iter().map(|e| e.ap).collect(),
        }
    }
}

/// Pluggable confidence scorers mapping (image, normalized box) to [0, 1].
pub trait ConfidenceScorer {
    fn score(&self, image: &GrayImage, bbox: &HBox) -> f64;
}

/// Scores every box the same; useful to fall back to input-order ranking.
pub struct ConstantScorer(pub f64);

impl ConfidenceScorer for ConstantScorer {
    fn score(&self, _image: &GrayImage, _bbox: &HBox) -> f64 {
        self.0.clamp(0.0, 1.0)
    }
}

/// Reference scorer: pooled crop features from a frozen encoder stand-in,
/// cosine-compared against a fixed "ship" embedding, mapped into [0, 1].
pub struct EmbedScorer {
    encoder: EncoderStandIn,
    reference: Vec<f64>,
}

const SCORER_CROP: u32 = 32;

impl EmbedScorer {
    pub fn new(seed: u64) -> Self {
        let encoder = EncoderStandIn::new(seed, "confidence-encoder", 8, 32);
        let mut rng = Rng::from_label(seed, "ship-embedding");
        let mut reference: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
        let norm = num::sqrt(reference.iter().map(|v| v * v).sum::<f64>());
        reference.iter_mut().for_each(|v| *v /= norm);
        EmbedScorer { encoder, reference }
    }
}

impl ConfidenceScorer for EmbedScorer {
    fn score(&self, image: &GrayImage, bbox: &HBox) -> f64 {
        let px = bbox
            .rescale(CoordSpace::pixel(image.width(), image.height()))
            .unwrap_or(*bbox);
        let x0 = num::floor(px.x_min()).max(0.0) as u32;
        let y0 = num::floor(px.y_min()).max(0.0) as u32;
        let x1 = (num::ceil(px.x_max()) as u32).min(image.width()).max(x0 + 1);
        let y1 = (num::ceil(px.y_max()) as u32).min(image.height()).max(y0 + 1);
        let crop = image.crop(x0, y0, x1, y1).resample_nearest(SCORER_CROP, SCORER_CROP);
        let tokens = self.encoder.encode(&crop);
        let dim = tokens.cols();
        let mut pooled = alloc::vec![0.0f64; dim];
        for r in 0..tokens.rows() {
            for (c, p) in pooled.iter_mut().enumerate() {
                *p += tokens.get(r, c);
            }
        }
        let norm = num::sqrt(pooled.iter().map(|v| v * v).sum::<f64>());
        if norm == 0.0 {
            return 0.5;
        }
        let cosine: f64 = pooled
            .iter()
            .zip(&self.reference)
            .map(|(a, b)| a / norm * b)
            .sum();
        ((cosine + 1.0) / 2.0).clamp(0.0, 1.0)
    }
}

/// Checks bounds, then delegates to the scorer. The box itself is never
/// modified or reordered by scoring.
pub fn score_confidence(
    scorer: &dyn ConfidenceScorer,
    image: &GrayImage,
    bbox: &HBox,
) -> Result<f64, EvalError> {
    if bbox.space() != CoordSpace::Normalized {
        return Err(EvalError::OutOfBounds);
    }
    let [x0, y0, x1, y1] = bbox.coords();
    if x0 < -EPS_BOUNDS || y0 < -EPS_BOUNDS || x1 > 1.0 + EPS_BOUNDS || y1 > 1.0 + EPS_BOUNDS {
        return Err(EvalError::OutOfBounds);
    }
    Ok(scorer.score(image, bbox).clamp(0.0, 1.0))
}

/// One summary line of a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub aps: Vec<f64>,
}

/// Output styles for [`format_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportStyle {
    Table,
    Csv,
    Json,
}

fn percent(ap: f64) -> String {
    format!("{:.2}", ap * 100.0)
}

fn threshold_headers(thresholds: &[f64]) -> Vec<String> {
    thresholds
        .iter()
        .map(|t| format!("AP@{:.0}", t * 100.0))
        .collect()
}

/// Renders summary rows as CSV with a fixed column order:
/// method, dataset, then one AP column per threshold (as percents).
pub fn format_rows_csv(thresholds: &[f64], rows: &[ReportRow]) -> String {
    let mut out = String::from("method,dataset");
    for h in threshold_headers(thresholds) {
        out.push(',');
        out.push_str(&h);
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.method);
        out.push(',');
        out.push_str(&row.dataset);
        for ap in &row.aps {
            out.push(',');
            out.push_str(&percent(*ap));
        }
        out.push('\n');
    }
    out
}

/// Parses the CSV produced by [`format_rows_csv`]. Method and dataset names
/// must not contain commas.
pub fn parse_rows_csv(text: &str) -> Result<(Vec<f64>, Vec<ReportRow>), EvalError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| EvalError::CsvParse(String::from("empty input")))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "method" || cols[1] != "dataset" {
        return Err(EvalError::CsvParse(String::from("unexpected header")));
    }
    let mut thresholds = Vec::new();
    for c in &cols[2..] {
        let t = c
            .strip_prefix("AP@")
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| EvalError::CsvParse(format!("bad column {c}")))?;
        thresholds.push(t / 100.0);
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(EvalError::CsvParse(format!("bad row: {line}")));
        }
        let mut aps = Vec::new();
        for f in &fields[2..] {
            let v = f
                .parse::<f64>()
                .map_err(|_| EvalError::CsvParse(format!("bad AP cell {f}")))?;
            aps.push(v / 100.0);
        }
        rows.push(ReportRow {
            method: fields[0].to_string(),
            dataset: fields[1].to_string(),
            aps,
        });
    }
    Ok((thresholds, rows))
}

/// Renders summary rows as an aligned plain-text table.
pub fn format_rows_table(thresholds: &[f64], rows: &[ReportRow]) -> String {
    let headers = threshold_headers(thresholds);
    let mut widths = alloc::vec!["method".len(), "dataset".len()];
    widths.extend(headers.iter().map(String::len));
    for row in rows {
        widths[0] = widths[0].max(row.method.len());
        widths[1] = widths[1].max(row.dataset.len());
        for (i, ap) in row.aps.iter().enumerate() {
            widths[2 + i] = widths[2 + i].max(percent(*ap).len());
        }
    }
    let mut out = String::new();
    let pad = |s: &str, w: usize| {
        let mut cell = String::from(s);
        while cell.len() < w {
            cell.push(' ');
        }
        cell
    };
    out.push_str(&pad("method", widths[0]));
    out.push_str("  ");
    out.push_str(&pad("dataset", widths[1]));
    for (i, h) in headers.iter().enumerate() {
        out.push_str("  ");
        out.push_str(&pad(h, widths[2 + i]));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&pad(&row.method, widths[0]));
        out.push_str("  ");
        out.push_str(&pad(&row.dataset, widths[1]));
        for (i, ap) in row.aps.iter().enumerate() {
            out.push_str("  ");
            out.push_str(&pad(&percent(*ap), widths[2 + i]));
        }
        out.push('\n');
    }
    out
}

/// Renders one report in the requested style. CSV and table show the
/// summary row; JSON is the canonical full serialization.
pub fn format_report(report: &EvalReport, style: ReportStyle) -> String {
    match style {
        ReportStyle::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportStyle::Csv => {
            format_rows_csv(&report.thresholds(), &[report.summary_row()])
        }
        ReportStyle::Table => {
            format_rows_table(&report.thresholds(), &[report.summary_row()])
        }
    }
}
