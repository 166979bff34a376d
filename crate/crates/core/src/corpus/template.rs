use serde::{Deserialize, Serialize};

use super::LipHypRecord;
use crate::error::Result;

/// Fixed instruction text. The singular/plural forms are part of the format.
pub const INSTRUCTION_LINE: &str = "Below is the best-hypotheses transcribed from a speech recognition system. Please try to revise it using the words that are only included in the other-hypothesis, and write the response for the true transcription.";

pub const BEST_LABEL: &str = "Best-hypothesis: ";
pub const OTHERS_LABEL: &str = "Other-hypotheses: ";
pub const RESPONSE_LABEL: &str = "Response: ";
pub const OTHERS_JOINER: &str = ", ";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub record_id: String,
    pub prompt: String,
    pub response: String,
}

impl InstructionSample {
    /// Prompt followed by the training target.
    pub fn full_text(&self) -> String {
        format!("{}{}", self.prompt, self.response)
    }
}

/// Renders the instruction prompt; the target transcript follows
/// `"Response: "` directly.
pub fn render_instruction(record: &LipHypRecord) -> Result<InstructionSample> {
    record.validate()?;
    let best = record.hypotheses.best().text();
    let others: Vec<String> = record.hypotheses.others().iter().map(|h| h.text()).collect();
    let prompt = format!(
        "{INSTRUCTION_LINE}\n\n{BEST_LABEL}{best}\n\n{OTHERS_LABEL}{}\n\n{RESPONSE_LABEL}",
        others.join(OTHERS_JOINER)
    );
    Ok(InstructionSample {
        record_id: record.id.clone(),
        prompt,
        response: record.transcript_text(),
    })
}
