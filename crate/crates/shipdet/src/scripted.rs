//! Scripted-model files: JSONL of instruction-to-answer pairs, optionally
//! pinned to an image id, for exercising the pipeline without training.

use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use shipdet_core::fusion::{ScriptEntry, ScriptedModel};

#[derive(Serialize, Deserialize)]
pub struct ScriptLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub instruction: String,
    pub answer: String,
}

pub fn load_scripted(path: &Path) -> Result<ScriptedModel> {
    let lines: Vec<ScriptLine> = crate::jsonl::read_lines(path)?;
    Ok(ScriptedModel::new(
        lines
            .into_iter()
            .map(|l| ScriptEntry {
                image_id: l.image_id,
                instruction: l.instruction,
                answer: l.answer,
            })
            .collect(),
    ))
}

pub fn write_scripted(path: &Path, entries: &[ScriptEntry]) -> Result<()> {
    let lines: Vec<ScriptLine> = entries
        .iter()
        .map(|e| ScriptLine {
            image_id: e.image_id.clone(),
            instruction: e.instruction.clone(),
            answer: e.answer.clone(),
        })
        .collect();
    crate::jsonl::write_lines(path, &lines)
}
