//! Greedy answer decoding, plus a scripted stand-in model for plumbing
//! tests that need fixed instruction-to-answer behavior without training.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::raster::GrayImage;

use super::model::ToyModel;
use super::tokenizer::EOS;
use super::FusionError;

/// A decoded answer; `truncated` reports hitting the length cap before EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    pub truncated: bool,
}

/// Greedy argmax decoding until EOS or `max_answer_len` tokens. Ties in the
/// argmax resolve to the lowest token id, so decoding is deterministic.
pub fn decode_answer(
    model: &ToyModel,
    image: &GrayImage,
    instruction: &str,
) -> Result<Decoded, FusionError> {
    let mut generated: Vec<usize> = Vec::new();
    let mut truncated = true;
    for _ in 0..model.config.max_answer_len {
        let partial = model.tokenizer.decode(&generated);
        let prepared = model.prepare(image, instruction, Some(&partial))?;
        // logits at the position that predicts the next answer token: the
        // SEP position plus however many tokens we have emitted
        let logits = model.forward_prepared(&prepared);
        let pos = prepared.n_visual + instruction.chars().count() + generated.len();
        let row = logits.row(pos);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (id, v) in row.iter().enumerate() {
            if *v > best_v {
                best_v = *v;
                best = id;
            }
        }
        if best == EOS {
            truncated = false;
            break;
        }
        generated.push(best);
    }
    Ok(Decoded {
        text: model.tokenizer.decode(&generated),
        truncated,
    })
}

/// One scripted instruction-to-answer pair; `image` optionally pins the
/// entry to a single image id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptEntry {
    pub image_id: Option<String>,
    pub instruction: String,
    pub answer: String,
}

/// A lookup-table model: returns the scripted answer for an instruction,
/// preferring entries pinned to the queried image id.
#[derive(Clone, Debug, Default)]
pub struct ScriptedModel {
    pub entries: Vec<ScriptEntry>,
}

impl ScriptedModel {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        ScriptedModel { entries }
    }

    pub fn answer(&self, image_id: &str, instruction: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.instruction == instruction && e.image_id.as_deref() == Some(image_id))
            .or_else(|| {
                self.entries
                    .iter()
                    .find(|e| e.instruction == instruction && e.image_id.is_none())
            })
            .map(|e| e.answer.as_str())
    }
}

/// Unified decoding front: a trained model or a script.
pub enum AnswerSource<'a> {
    Model(&'a ToyModel),
    Scripted(&'a ScriptedModel),
}

impl AnswerSource<'_> {
    /// Produces the answer text for one image. Scripted sources that have
    /// no matching entry yield the empty-answer sentence.
    pub fn answer(
        &self,
        image_id: &str,
        image: &GrayImage,
        instruction: &str,
    ) -> Result<Decoded, FusionError> {
        match self {
            AnswerSource::Model(m) => decode_answer(m, image, instruction),
            AnswerSource::Scripted(s) => Ok(Decoded {
                text: s
                    .answer(image_id, instruction)
                    .unwrap_or(crate::codec::EMPTY_ANSWER)
                    .to_string(),
                truncated: false,
            }),
        }
    }
}
