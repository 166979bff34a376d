//! Hypothesis-list records, their instruction rendering, and JSON-lines
//! manifests.

pub mod manifest;
mod template;

pub use manifest::{read_manifest, write_manifest};
pub use template::{render_instruction, InstructionSample, INSTRUCTION_LINE};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asr::HypothesisList;
use crate::audio::Provenance;
use crate::error::{Error, Result};
use crate::lip::RoiFormat;
use crate::text::normalize_tokens;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One hypothesis list with its reference transcription and the audio and
/// lip-motion files it was derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipHypRecord {
    pub id: String,
    pub transcript: Vec<String>,
    pub hypotheses: HypothesisList,
    pub audio_ref: PathBuf,
    pub roi_ref: PathBuf,
    pub roi_format: RoiFormat,
    pub corruption: Provenance,
    pub split: Split,
}

impl LipHypRecord {
    pub fn transcript_text(&self) -> String {
        self.transcript.join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        if self.transcript.is_empty() {
            return Err(Error::Precondition(format!("record {}: empty transcript", self.id)));
        }
        if self.hypotheses.len() < 2 {
            return Err(Error::Precondition(format!(
                "record {}: hypothesis list has {} entries, need at least 2",
                self.id,
                self.hypotheses.len()
            )));
        }
        self.hypotheses.validate()
    }
}

/// Stable content id over the transcript, the hypotheses and the
/// corruption seed.
pub fn record_id(transcript: &[String], hypotheses: &HypothesisList, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(transcript).expect("strings serialise"));
    h.update([0u8]);
    h.update(serde_json::to_vec(hypotheses).expect("hypotheses serialise"));
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Train/test assignment from a hash of the utterance id.
pub fn assign_split(utterance_id: &str, train_ratio: f64) -> Split {
    let digest = Sha256::digest(utterance_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    let u = u64::from_le_bytes(b) as f64 / u64::MAX as f64;
    if u < train_ratio {
        Split::Train
    } else {
        Split::Test
    }
}

/// Builds records, rejecting duplicates and dangling file references.
#[derive(Debug, Default)]
pub struct CorpusBuilder {
    base_dir: Option<PathBuf>,
    seen: HashSet<String>,
}

impl CorpusBuilder {
    /// References are resolved against `base_dir` when given.
    pub fn new(base_dir: Option<PathBuf>) -> Self {
        Self {
            base_dir,
            seen: HashSet::new(),
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build_record(
        &mut self,
        transcript: &[String],
        mut hypotheses: HypothesisList,
        audio_ref: PathBuf,
        roi_ref: PathBuf,
        roi_format: RoiFormat,
        corruption: Provenance,
        split: Split,
    ) -> Result<LipHypRecord> {
        let transcript = normalize_tokens(transcript);
        for h in &mut hypotheses.hypotheses {
            h.tokens = normalize_tokens(&h.tokens);
        }
        for (what, p) in [("audio", &audio_ref), ("roi", &roi_ref)] {
            if !self.resolve(p).exists() {
                return Err(Error::Precondition(format!(
                    "{what} reference {} does not resolve",
                    p.display()
                )));
            }
        }
        let id = record_id(&transcript, &hypotheses, corruption.spec.seed);
        let record = LipHypRecord {
            id,
            transcript,
            hypotheses,
            audio_ref,
            roi_ref,
            roi_format,
            corruption,
            split,
        };
        record.validate()?;
        if !self.seen.insert(record.id.clone()) {
            return Err(Error::DuplicateRecord(record.id));
        }
        Ok(record)
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn touch(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, b"x").unwrap();
        PathBuf::from(name)
    }

    #[test]
    fn build_validates_and_deduplicates() {
        let dir = tempfile::tempdir().unwrap();
        let a = touch(dir.path(), "a.wav");
        let r = touch(dir.path(), "a.roi");
        let t: Vec<String> = vec!["You".into(), "are".into()];
        let mut b = CorpusBuilder::new(Some(dir.path().to_path_buf()));
        let rec = b
            .build_record(&t, hyps(&["you a", "you are"]), a.clone(), r.clone(), RoiFormat::Raw, provenance(1), Split::Train)
            .unwrap();
        assert_eq!(rec.transcript, vec!["you", "are"]);
        let again = b.build_record(&t, hyps(&["you a", "you are"]), a.clone(), r.clone(), RoiFormat::Raw, provenance(1), Split::Train);
        assert!(matches!(again, Err(Error::DuplicateRecord(id)) if id == rec.id));

        let mut fresh = CorpusBuilder::new(Some(dir.path().to_path_buf()));
        let same = fresh
            .build_record(&t, hyps(&["you a", "you are"]), a.clone(), r.clone(), RoiFormat::Raw, provenance(1), Split::Train)
            .unwrap();
        assert_eq!(same.id, rec.id);

        let single = fresh.build_record(&t, hyps(&["you a"]), a.clone(), r.clone(), RoiFormat::Raw, provenance(2), Split::Train);
        assert!(single.is_err());

        let dangling = fresh.build_record(&t, hyps(&["x", "y"]), "missing.wav".into(), r, RoiFormat::Raw, provenance(3), Split::Train);
        assert!(dangling.unwrap_err().to_string().contains("missing.wav"));
    }

    #[test]
    fn split_is_deterministic_and_roughly_proportional() {
        let train = (0..2000)
            .filter(|i| assign_split(&format!("utt{i}"), 0.9) == Split::Train)
            .count();
        assert!((1720..1880).contains(&train), "{train}");
        assert_eq!(assign_split("utt7", 0.9), assign_split("utt7", 0.9));
    }
}
