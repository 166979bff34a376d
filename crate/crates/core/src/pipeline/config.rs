use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::CorruptionRanges;
use crate::error::{Error, Result};
use crate::eval::System;
use crate::lip::LipEncoderConfig;
use crate::lm::ModelConfig;
use crate::toy::ToyConfig;
use crate::train::{Optimizer, TrainConfig};

/// Artifact directories, relative to the pipeline root unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory with `ir/`, `interferer/` and `noise/` WAV subdirectories.
    /// When unset the pools are synthesised from the seed.
    pub pools: Option<PathBuf>,
    pub simulated: PathBuf,
    pub decoded: PathBuf,
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            pools: None,
            simulated: "simulated".into(),
            decoded: "decoded".into(),
            corpus: "corpus".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub n_plus_1: usize,
    /// Confusion strength of the toy front end at 0 dB.
    pub max_strength: f64,
    pub frames_per_token: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 16,
            n_plus_1: 5,
            max_strength: 0.9,
            frames_per_token: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Share of utterances assigned to the training split.
    pub split_ratio: f64,
    /// Share of the training split held out for base LM pretraining. The
    /// adapter trains on the rest, which the base model has never seen.
    pub pretrain_ratio: f64,
    /// Keep at most this many hypotheses per record.
    pub nbest: Option<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            split_ratio: 0.9,
            pretrain_ratio: 0.5,
            nbest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub systems: Vec<String>,
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            systems: System::ALL.iter().map(|s| s.name().to_string()).collect(),
            max_new_tokens: 12,
        }
    }
}

/// Everything a run depends on. Loaded from TOML; unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub toy: ToyConfig,
    pub audio: CorruptionRanges,
    pub decode: DecodeConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    /// Base LM training, all `lm.*` tensors trainable.
    pub pretrain: TrainConfig,
    /// Adapter and lip encoder training on the frozen base.
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            toy: ToyConfig::default(),
            audio: CorruptionRanges::default(),
            decode: DecodeConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig {
                dim: 32,
                layers: 2,
                heads: 4,
                ff_mult: 4,
                max_len: 112,
                prefix_len: 8,
                prompt_layers: 1,
                lip: LipEncoderConfig {
                    roi_size: 16,
                    stem_channels: 8,
                    blocks: 1,
                    tcn_levels: 2,
                    lip_dim: 16,
                    lip_len: 8,
                    ..Default::default()
                },
            },
            pretrain: TrainConfig {
                learning_rate: 3e-3,
                weight_decay: 0.0,
                batch_size: 16,
                epochs: 12,
                optimizer: Optimizer::AdamW,
                ..Default::default()
            },
            // Plain momentum SGD needs a far larger step than the library's
            // 5e-3 to open zero-initialised gates on a small from-scratch
            // model; decay would shrink the lip encoder while it does.
            train: TrainConfig {
                learning_rate: 0.3,
                weight_decay: 0.0,
                epochs: 20,
                batch_size: 16,
                ..Default::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Keys in `text` override the defaults one leaf at a time, so a
    /// partial section keeps the pipeline's values for the keys it omits.
    pub fn from_toml(text: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let overlay: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| err(&e))?;
        merge(&mut merged, overlay);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e| err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.toy.utterances == 0 || self.toy.frames_per_word == 0 || self.toy.roi_size == 0 {
            return bad("toy: utterances, frames_per_word and roi_size must be positive");
        }
        if !(self.toy.word_secs > 0.0) || !(self.toy.frame_rate_hz > 0.0) || self.toy.sample_rate_hz == 0 {
            return bad("toy: word_secs, frame_rate_hz and sample_rate_hz must be positive");
        }
        if !(0.0..=0.5).contains(&self.toy.roi_noise) {
            return bad("toy: roi_noise must lie in [0, 0.5]");
        }
        let (lo, hi) = self.audio.snr_db_background;
        if !(0.0 <= lo && lo <= hi && hi <= 40.0) {
            return bad("audio: snr_db_background must be an ordered range inside [0, 40]");
        }
        let (lo, hi) = self.audio.snr_db_interferer;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("audio: snr_db_interferer must be an ordered finite range");
        }
        if !(0.0..=1.0).contains(&self.audio.p_reverb) || !(0.0..=1.0).contains(&self.audio.p_interferer) {
            return bad("audio: probabilities must lie in [0, 1]");
        }
        if self.decode.n_plus_1 < 2 || self.decode.beam_width < self.decode.n_plus_1 {
            return bad("decode: need n_plus_1 >= 2 and beam_width >= n_plus_1");
        }
        if !(0.0..1.0).contains(&self.decode.max_strength) || self.decode.frames_per_token == 0 {
            return bad("decode: max_strength must lie in [0, 1) and frames_per_token be positive");
        }
        if !(self.corpus.split_ratio > 0.0 && self.corpus.split_ratio < 1.0) {
            return bad("corpus: split_ratio must lie in (0, 1)");
        }
        if !(self.corpus.pretrain_ratio > 0.0 && self.corpus.pretrain_ratio < 1.0) {
            return bad("corpus: pretrain_ratio must lie in (0, 1)");
        }
        if self.corpus.nbest.is_some_and(|n| n < 2) {
            return bad("corpus: nbest must be at least 2");
        }
        if self.eval.max_new_tokens == 0 {
            return bad("eval: max_new_tokens must be positive");
        }
        self.systems()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()
    }

    pub fn systems(&self) -> Result<Vec<System>> {
        if self.eval.systems.is_empty() {
            return Err(Error::Config("eval: no systems requested".into()));
        }
        self.eval
            .systems
            .iter()
            .map(|s| System::parse(s).map_err(|e| Error::Config(e.to_string())))
            .collect()
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(PipelineConfig::from_toml("sede = 3").is_err());
        assert!(PipelineConfig::from_toml("[decode]\nbeam = 3").is_err());
        assert!(PipelineConfig::from_toml("[decode]\nn_plus_1 = 1").is_err());
        assert!(PipelineConfig::from_toml("[corpus]\nsplit_ratio = 1.0").is_err());
        assert!(PipelineConfig::from_toml("[eval]\nsystems = [\"oracle\"]").is_err());
        assert!(PipelineConfig::from_toml("[model.lip]\nroi = 3").is_err());
    }

    #[test]
    fn partial_sections_keep_pipeline_defaults() {
        let d = PipelineConfig::default();
        let cfg = PipelineConfig::from_toml("seed = 7\n[train]\nepochs = 3\n[model.lip]\nlip_len = 5").unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.model.lip.lip_len), (7, 3, 5));
        assert_eq!(cfg.train.learning_rate, d.train.learning_rate);
        assert_eq!(cfg.model.lip.roi_size, d.model.lip.roi_size);
        assert_eq!(cfg.model.dim, d.model.dim);
    }
}
