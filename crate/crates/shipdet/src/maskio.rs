//! Mask output layout: `<out>/<image_id>/<box_index>.pgm` plus a manifest
//! JSONL mapping each prompt box to its mask file.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use shipdet_core::seg::{MaskImage, PromptBox};

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ManifestLine {
    pub image_id: String,
    pub box_index: usize,
    /// Pixel-space prompt rectangle [x0, y0, x1, y1].
    pub bbox: [u32; 4],
    pub mask: String,
}

/// Writes one image's masks and returns their manifest lines.
pub fn write_masks(
    out_dir: &Path,
    image_id: &str,
    prompts: &[PromptBox],
    masks: &[MaskImage],
) -> Result<Vec<ManifestLine>> {
    let image_dir = out_dir.join(image_id);
    fs::create_dir_all(&image_dir).with_context(|| format!("creating {}", image_dir.display()))?;
    let mut lines = Vec::with_capacity(masks.len());
    for (idx, (mask, prompt)) in masks.iter().zip(prompts).enumerate() {
        let rel = format!("{image_id}/{idx}.pgm");
        fs::write(out_dir.join(&rel), mask.to_pgm())?;
        lines.push(ManifestLine {
            image_id: image_id.to_string(),
            box_index: idx,
            bbox: [prompt.x0, prompt.y0, prompt.x1, prompt.y1],
            mask: rel,
        });
    }
    Ok(lines)
}

pub fn read_mask(path: &Path) -> Result<MaskImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    MaskImage::from_pgm(&bytes).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}
