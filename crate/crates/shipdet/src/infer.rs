//! Batch inference: decode an answer per image, parse it through the answer
//! grammar, and attach confidence scores.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use shipdet_core::codec::{parse_answer, Boxes, Task};
use shipdet_core::eval::{score_confidence, ConfidenceScorer, Detection, GeomBox};
use shipdet_core::fusion::AnswerSource;
use shipdet_core::geometry::quad_bounding_hbox;
use shipdet_core::labeling::build_instruction;
use shipdet_core::raster::{decode_pgm, GrayImage};

#[derive(Debug, Default, Clone)]
pub struct InferStats {
    pub images: usize,
    pub boxes: usize,
    pub parse_warnings: usize,
    pub truncated_answers: usize,
    pub failed_images: usize,
}

/// Lists the `.pgm` images of a directory in sorted order as
/// (image_id, path) pairs.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Runs detection over every image in a directory. Per-image failures are
/// logged to stderr and skipped; the run continues.
pub fn run_inference(
    source: &AnswerSource<'_>,
    images_dir: &Path,
    task: Task,
    scorer: &dyn ConfidenceScorer,
) -> Result<(Vec<Detection>, InferStats)> {
    let instruction = build_instruction(task);
    let mut detections = Vec::new();
    let mut stats = InferStats::default();

    for (image_id, path) in list_images(images_dir)? {
        let image = match fs::read(&path).ok().and_then(|b| decode_pgm(&b).ok()) {
            Some(img) => img,
            None => {
                eprintln!("warning: skipping unreadable image {}", path.display());
                stats.failed_images += 1;
                continue;
            }
        };
        stats.images += 1;
        let decoded = match source.answer(&image_id, &image, instruction) {
            Ok(d) => d,
            Err(e) => {
                eprintln!("warning: decode failed for {image_id}: {e}");
                stats.failed_images += 1;
                continue;
            }
        };
        if decoded.truncated {
            eprintln!("warning: answer for {image_id} hit the length cap");
            stats.truncated_answers += 1;
        }
        let parsed = parse_answer(&decoded.text, task);
        stats.parse_warnings += parsed.warnings.len();
        append_scored(&mut detections, &image_id, &image, parsed.boxes, scorer)?;
    }
    stats.boxes = detections.len();
    Ok((detections, stats))
}

fn append_scored(
    out: &mut Vec<Detection>,
    image_id: &str,
    image: &GrayImage,
    boxes: Boxes,
    scorer: &dyn ConfidenceScorer,
) -> Result<()> {
    match boxes {
        Boxes::Horizontal(list) => {
            for b in list {
                let conf = score_confidence(scorer, image, &b)
                    .map_err(|e| anyhow::anyhow!("scoring {image_id}: {e}"))?;
                out.push(
                    Detection::new(image_id, GeomBox::Horizontal(b), conf)
                        .map_err(|e| anyhow::anyhow!("{image_id}: {e}"))?,
                );
            }
        }
        Boxes::Oriented(list) => {
            for q in list {
                let hbox = quad_bounding_hbox(&q)
                    .map_err(|e| anyhow::anyhow!("{image_id}: {e}"))?;
                let conf = score_confidence(scorer, image, &hbox)
                    .map_err(|e| anyhow::anyhow!("scoring {image_id}: {e}"))?;
                out.push(
                    Detection::new(image_id, GeomBox::Oriented(q), conf)
                        .map_err(|e| anyhow::anyhow!("{image_id}: {e}"))?,
                );
            }
        }
    }
    Ok(())
}
