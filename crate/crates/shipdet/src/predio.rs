//! Prediction and ground-truth JSONL formats.
//!
//! Prediction line: `{"image_id", "task", "box": [4 or 8 floats,
//! normalized], "confidence"}`. Ground-truth line: `{"image_id", "task",
//! "boxes": [[...], ...]}`. Oriented boxes are 8 flat coordinates and are
//! canonicalized on load.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use shipdet_core::codec::Task;
use shipdet_core::eval::{Detection, GeomBox};
use shipdet_core::geometry::{canonicalize_quad, CoordSpace, HBox, Point};

#[derive(Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_id: String,
    pub task: Task,
    #[serde(rename = "box")]
    pub bbox: Vec<f64>,
    pub confidence: f64,
}

#[derive(Serialize, Deserialize)]
pub struct GroundTruthLine {
    pub image_id: String,
    pub task: Task,
    pub boxes: Vec<Vec<f64>>,
}

fn box_from_coords(coords: &[f64], task: Task) -> Result<GeomBox> {
    match task {
        Task::Hbb => {
            if coords.len() != 4 {
                bail!("horizontal box needs 4 values, found {}", coords.len());
            }
            let b = HBox::new(
                coords[0],
                coords[1],
                coords[2],
                coords[3],
                CoordSpace::Normalized,
            )
            .map_err(|e| anyhow::anyhow!("invalid box: {e}"))?;
            Ok(GeomBox::Horizontal(b))
        }
        Task::Obb => {
            if coords.len() != 8 {
                bail!("oriented box needs 8 values, found {}", coords.len());
            }
            let pts = [
                Point::new(coords[0], coords[1]),
                Point::new(coords[2], coords[3]),
                Point::new(coords[4], coords[5]),
                Point::new(coords[6], coords[7]),
            ];
            let q = canonicalize_quad(&pts, CoordSpace::Normalized)
                .map_err(|e| anyhow::anyhow!("invalid quad: {e}"))?;
            Ok(GeomBox::Oriented(q))
        }
        Task::Caption => bail!("caption records carry no boxes"),
    }
}

fn geombox_coords(bbox: &GeomBox) -> Vec<f64> {
    match bbox {
        GeomBox::Horizontal(b) => b.coords().to_vec(),
        GeomBox::Oriented(q) => q.flat_coords().to_vec(),
    }
}

pub fn load_predictions(path: &Path, task: Task) -> Result<Vec<Detection>> {
    let lines: Vec<PredictionLine> = crate::jsonl::read_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (idx, line) in lines.iter().enumerate() {
        let context = || format!("{}:{}", path.display(), idx + 1);
        if line.task != task {
            bail!("{}: task {} does not match {task}", context(), line.task);
        }
        let bbox = box_from_coords(&line.bbox, task).with_context(context)?;
        let det = Detection::new(&line.image_id, bbox, line.confidence)
            .map_err(|e| anyhow::anyhow!("{}: {e}", context()))?;
        out.push(det);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, detections: &[Detection], task: Task) -> Result<()> {
    let lines: Vec<PredictionLine> = detections
        .iter()
        .map(|d| PredictionLine {
            image_id: d.image_id.clone(),
            task,
            bbox: geombox_coords(&d.bbox),
            confidence: d.confidence,
        })
        .collect();
    crate::jsonl::write_lines(path, &lines)
}

pub fn load_ground_truth(path: &Path, task: Task) -> Result<BTreeMap<String, Vec<GeomBox>>> {
    let lines: Vec<GroundTruthLine> = crate::jsonl::read_lines(path)?;
    let mut out = BTreeMap::new();
    for (idx, line) in lines.iter().enumerate() {
        let context = || format!("{}:{}", path.display(), idx + 1);
        if line.task != task {
            bail!("{}: task {} does not match {task}", context(), line.task);
        }
        if out.contains_key(&line.image_id) {
            bail!("{}: duplicate image id {}", context(), line.image_id);
        }
        let mut boxes = Vec::with_capacity(line.boxes.len());
        for coords in &line.boxes {
            boxes.push(box_from_coords(coords, task).with_context(context)?);
        }
        out.insert(line.image_id.clone(), boxes);
    }
    Ok(out)
}

pub fn write_ground_truth(
    path: &Path,
    gts: &BTreeMap<String, Vec<GeomBox>>,
    task: Task,
) -> Result<()> {
    let lines: Vec<GroundTruthLine> = gts
        .iter()
        .map(|(image_id, boxes)| GroundTruthLine {
            image_id: image_id.clone(),
            task,
            boxes: boxes.iter().map(geombox_coords).collect(),
        })
        .collect();
    crate::jsonl::write_lines(path, &lines)
}
