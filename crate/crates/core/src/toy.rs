//! Synthetic data for running the whole pipeline without external corpora.
//!
//! Sentences follow a fixed `subject verb adjective noun` pattern. Nouns come
//! in pairs that sound alike but differ in lip shape (closed versus open
//! mouth), so only the lip stream can tell them apart. Every other word is
//! confusable with a word from another slot, which context alone can fix.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asr::ConfusionMap;
use crate::audio::{synthetic_ir, AudioClip, Pools};
use crate::error::{Error, Result};
use crate::lip::RoiSequence;

pub const LEXICON_TSV: &str = include_str!("../../../fixtures/toy_lexicon.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Subject,
    Verb,
    Adjective,
    Noun,
}

impl Category {
    pub const ORDER: [Category; 4] = [Category::Subject, Category::Verb, Category::Adjective, Category::Noun];

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "subject" => Category::Subject,
            "verb" => Category::Verb,
            "adjective" => Category::Adjective,
            "noun" => Category::Noun,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexEntry {
    pub word: String,
    pub category: Category,
    /// Mouth openness in `[0, 1]` while the word is spoken.
    pub viseme: f64,
    pub confusable: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub entries: Vec<LexEntry>,
    index: BTreeMap<String, usize>,
}

impl Lexicon {
    /// Parses `word<TAB>category<TAB>viseme<TAB>confusable` lines; `#` starts
    /// a comment.
    pub fn parse(tsv: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in tsv.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::Config(format!("lexicon line {}: {m}", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            let category = Category::parse(f[1]).ok_or_else(|| bad("unknown category"))?;
            let viseme: f64 = f[2].parse().map_err(|_| bad("viseme is not a number"))?;
            if !(0.0..=1.0).contains(&viseme) {
                return Err(bad("viseme outside [0, 1]"));
            }
            entries.push(LexEntry {
                word: f[0].to_string(),
                category,
                viseme,
                confusable: f[3].to_string(),
            });
        }
        let index: BTreeMap<String, usize> = entries.iter().enumerate().map(|(i, e)| (e.word.clone(), i)).collect();
        if index.len() != entries.len() {
            return Err(Error::Config("lexicon has duplicate words".into()));
        }
        for e in &entries {
            if !index.contains_key(&e.confusable) || e.confusable == e.word {
                return Err(Error::Config(format!("{}: bad confusable word {}", e.word, e.confusable)));
            }
        }
        for c in Category::ORDER {
            if !entries.iter().any(|e| e.category == c) {
                return Err(Error::Config(format!("lexicon has no {c:?} words")));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn builtin() -> Self {
        Self::parse(LEXICON_TSV).expect("bundled lexicon is valid")
    }

    pub fn get(&self, word: &str) -> Option<&LexEntry> {
        self.index.get(word).map(|&i| &self.entries[i])
    }

    pub fn words(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.word.clone()).collect()
    }

    pub fn confusions(&self) -> ConfusionMap {
        self.entries
            .iter()
            .map(|e| (e.word.clone(), vec![e.confusable.clone()]))
            .collect()
    }

    fn of(&self, c: Category) -> Vec<&LexEntry> {
        self.entries.iter().filter(|e| e.category == c).collect()
    }

    /// One uniformly drawn word per slot.
    pub fn sample_sentence(&self, rng: &mut impl Rng) -> Vec<String> {
        Category::ORDER
            .iter()
            .map(|&c| {
                let pool = self.of(c);
                pool[rng.gen_range(0..pool.len())].word.clone()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub utterances: usize,
    pub sample_rate_hz: u32,
    pub word_secs: f64,
    pub frame_rate_hz: f64,
    pub frames_per_word: usize,
    pub roi_size: usize,
    /// Uniform pixel noise amplitude on the crops.
    pub roi_noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            utterances: 1000,
            sample_rate_hz: 16_000,
            word_secs: 0.12,
            frame_rate_hz: 25.0,
            frames_per_word: 3,
            roi_size: 16,
            roi_noise: 0.05,
        }
    }
}

fn word_seed(word: &str) -> u64 {
    let d = Sha256::digest(word.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Two-harmonic tone per word with a raised-cosine envelope; pitch and
/// timbre are fixed by the word.
pub fn synth_speech(words: &[String], cfg: &ToyConfig, seed: u64) -> Result<AudioClip> {
    let sr = cfg.sample_rate_hz as f64;
    let n = ((cfg.word_secs * sr) as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * words.len().max(1));
    for w in words {
        let h = word_seed(w);
        let f0 = 110.0 + (h % 200) as f64;
        let f1 = 600.0 + ((h >> 16) % 1800) as f64;
        let amp = 0.25 + 0.05 * rng.gen::<f64>();
        for i in 0..n {
            let t = i as f64 / sr;
            let env = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
            let s = (2.0 * std::f64::consts::PI * f0 * t).sin() + 0.4 * (2.0 * std::f64::consts::PI * f1 * t).sin();
            out.push(amp * env * s);
        }
    }
    if out.is_empty() {
        out.push(0.0);
    }
    AudioClip::new(out, cfg.sample_rate_hz)
}

/// Grayscale mouth crops: a dark ellipse whose height follows each word's
/// viseme, plus uniform pixel noise.
pub fn synth_rois(words: &[String], lex: &Lexicon, cfg: &ToyConfig, seed: u64) -> Result<RoiSequence> {
    let s = cfg.roi_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(words.len() * cfg.frames_per_word);
    let c = (s as f64 - 1.0) / 2.0;
    let rx = 0.35 * s as f64;
    for w in words {
        let e = lex.get(w).ok_or_else(|| Error::OutOfVocabulary(w.clone()))?;
        for _ in 0..cfg.frames_per_word {
            let open = (e.viseme + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
            let ry = 0.5 + open * 0.35 * s as f64;
            let frame = (0..s * s)
                .map(|i| {
                    let (y, x) = ((i / s) as f64 - c, (i % s) as f64 - c);
                    let inside = (x / rx).powi(2) + (y / ry).powi(2) <= 1.0;
                    let base = if inside { 0.15 } else { 0.65 };
                    (base + rng.gen_range(-cfg.roi_noise..=cfg.roi_noise)).clamp(0.0, 1.0)
                })
                .collect();
            frames.push(frame);
        }
    }
    RoiSequence::new(frames, s, s, cfg.frame_rate_hz)
}

/// A small synthetic pool: one room, one competing talker, two noises.
pub fn synth_pools(lex: &Lexicon, cfg: &ToyConfig, seed: u64) -> Result<Pools> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = cfg.sample_rate_hz;
    let mut pools = Pools::default();
    pools.irs.insert("room_small".into(), synthetic_ir(0.15, sr, rng.gen())?);
    pools.irs.insert("room_large".into(), synthetic_ir(0.4, sr, rng.gen())?);
    let talk: Vec<String> = (0..3).flat_map(|_| lex.sample_sentence(&mut rng)).collect();
    pools.interferers.insert("talker".into(), synth_speech(&talk, cfg, rng.gen())?);
    let len = sr as usize;
    let white: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
    pools.noises.insert("white".into(), AudioClip::new(white, sr)?);
    let mut hum = Vec::with_capacity(len);
    let mut lp = 0.0;
    for i in 0..len {
        lp = 0.97 * lp + 0.03 * rng.gen_range(-1.0..1.0);
        hum.push(lp + 0.2 * (2.0 * std::f64::consts::PI * 50.0 * i as f64 / sr as f64).sin());
    }
    pools.noises.insert("hum".into(), AudioClip::new(hum, sr)?);
    Ok(pools)
}

/// Toy acoustic front end: how strongly the recogniser confuses words at a
/// given background SNR. Clean input gives zero.
pub fn confusion_strength(snr_db: Option<f64>, max_strength: f64) -> f64 {
    match snr_db {
        None => 0.0,
        Some(snr) => (max_strength * (1.0 - snr / 40.0)).clamp(0.0, max_strength.min(0.99)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_lexicon_structure() {
        let lex = Lexicon::builtin();
        assert_eq!(lex.entries.len(), 50);
        for e in &lex.entries {
            let partner = lex.get(&e.confusable).unwrap();
            if e.category == Category::Noun {
                assert_eq!(partner.category, Category::Noun);
                assert_eq!(partner.confusable, e.word);
                assert!((e.viseme - partner.viseme).abs() > 0.5);
            } else {
                assert_ne!(partner.category, e.category, "{}", e.word);
            }
        }
    }

    #[test]
    fn parse_rejects_bad_lines() {
        assert!(Lexicon::parse("a\tnoun\t0.5").is_err());
        assert!(Lexicon::parse("a\tthing\t0.5\tb").is_err());
        assert!(Lexicon::parse("a\tnoun\t0.5\tzzz").is_err());
    }

    #[test]
    fn sentences_follow_the_slot_pattern() {
        let lex = Lexicon::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = lex.sample_sentence(&mut rng);
            let cats: Vec<Category> = s.iter().map(|w| lex.get(w).unwrap().category).collect();
            assert_eq!(cats, Category::ORDER);
        }
    }

    #[test]
    fn rois_encode_mouth_openness() {
        let lex = Lexicon::builtin();
        let cfg = ToyConfig::default();
        let dark = |w: &str| {
            let r = synth_rois(&[w.to_string()], &lex, &cfg, 3).unwrap();
            r.frames()[0].iter().filter(|p| **p < 0.4).count()
        };
        assert!(dark("hat") > 2 * dark("bat"));
        let r = synth_rois(&lex.sample_sentence(&mut ChaCha8Rng::seed_from_u64(2)), &lex, &cfg, 4).unwrap();
        assert_eq!(r.len(), 4 * cfg.frames_per_word);
    }

    #[test]
    fn speech_and_pools_are_deterministic() {
        let lex = Lexicon::builtin();
        let cfg = ToyConfig::default();
        let w = vec!["i".to_string(), "see".to_string()];
        assert_eq!(synth_speech(&w, &cfg, 1).unwrap(), synth_speech(&w, &cfg, 1).unwrap());
        let p = synth_pools(&lex, &cfg, 5).unwrap();
        assert_eq!(p.noises.len(), 2);
        assert_eq!(confusion_strength(None, 0.9), 0.0);
        assert!((confusion_strength(Some(20.0), 0.9) - 0.45).abs() < 1e-12);
        assert_eq!(confusion_strength(Some(-5.0), 0.9), 0.9);
    }
}
