//! Toy acoustic front end: emission lattices over a word vocabulary and
//! N-best extraction by CTC prefix beam search.

mod beam;
mod exhaustive;

pub use beam::ctc_prefix_beam_nbest;
pub use exhaustive::{exhaustive_distribution, exhaustive_nbest, EXHAUSTIVE_LIMIT};

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Framewise log-probabilities over `vocab` plus a trailing blank column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionLattice {
    pub vocab: Vec<String>,
    pub frames: Vec<Vec<f64>>,
}

const NORMALISATION_TOL: f64 = 1e-6;

impl EmissionLattice {
    pub fn new(vocab: Vec<String>, frames: Vec<Vec<f64>>) -> Result<Self> {
        let lat = Self { vocab, frames };
        lat.validate()?;
        Ok(lat)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.is_empty() {
            return Err(Error::Precondition("lattice vocabulary is empty".into()));
        }
        if self.frames.is_empty() {
            return Err(Error::Precondition("lattice has no frames".into()));
        }
        let width = self.vocab.len() + 1;
        for (t, row) in self.frames.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Precondition(format!(
                    "frame {t} has {} columns, expected {width}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Precondition(format!("frame {t} has a non-finite entry")));
            }
            let lse = log_sum_exp(row);
            if lse.abs() > NORMALISATION_TOL {
                return Err(Error::Precondition(format!(
                    "frame {t} log-sum-exps to {lse}, expected 0"
                )));
            }
        }
        Ok(())
    }

    pub fn blank(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.vocab[i].clone()).collect()
    }

    /// Rank of each vocabulary id in lexicographic word order, used for
    /// deterministic tie-breaking.
    pub(crate) fn lex_ranks(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.vocab.len()).collect();
        order.sort_by(|&a, &b| self.vocab[a].cmp(&self.vocab[b]));
        let mut rank = vec![0; order.len()];
        for (r, id) in order.into_iter().enumerate() {
            rank[id] = r;
        }
        rank
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// One decoded candidate. `score` is the log of the summed probability of
/// every CTC path collapsing to `tokens`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<String>,
    pub score: f64,
    pub rank: usize,
}

impl Hypothesis {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Distinct hypotheses sorted by descending score. `exhausted` is set when
/// fewer candidates exist than were requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisList {
    pub hypotheses: Vec<Hypothesis>,
    pub exhausted: bool,
}

impl HypothesisList {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }

    pub fn others(&self) -> &[Hypothesis] {
        &self.hypotheses[1..]
    }

    /// Sorted, distinct, ranks consistent, scores non-positive.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, h) in self.hypotheses.iter().enumerate() {
            if h.rank != i {
                return Err(Error::Precondition(format!("hypothesis {i} has rank {}", h.rank)));
            }
            if !(h.score <= 1e-12) {
                return Err(Error::Precondition(format!("hypothesis {i} has score {} > 0", h.score)));
            }
            if !seen.insert(&h.tokens) {
                return Err(Error::Precondition(format!("hypothesis {i} is a duplicate")));
            }
            if i > 0 && h.score > self.hypotheses[i - 1].score {
                return Err(Error::Precondition("hypotheses are not sorted by score".into()));
            }
        }
        Ok(())
    }
}

/// Ranks `(ids, log_prob)` candidates: descending score, ties broken by the
/// lexicographic order of their words. Keeps the first `n`.
pub(crate) fn rank_candidates(
    lattice: &EmissionLattice,
    mut cands: Vec<(Vec<usize>, f64)>,
    n: usize,
) -> HypothesisList {
    let ranks = lattice.lex_ranks();
    cands.retain(|(_, s)| *s > f64::NEG_INFINITY);
    cands.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| lex_cmp(&ranks, &a.0, &b.0))
    });
    let exhausted = cands.len() < n;
    let hypotheses = cands
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(rank, (ids, score))| Hypothesis {
            tokens: lattice.words(&ids),
            score: score.min(0.0),
            rank,
        })
        .collect();
    HypothesisList {
        hypotheses,
        exhausted,
    }
}

pub(crate) fn lex_cmp(ranks: &[usize], a: &[usize], b: &[usize]) -> std::cmp::Ordering {
    a.iter().map(|&i| ranks[i]).cmp(b.iter().map(|&i| ranks[i]))
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse_ctc(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Argmax per frame, collapsed.
pub fn greedy_decode(lattice: &EmissionLattice) -> Vec<String> {
    let path: Vec<usize> = lattice
        .frames
        .iter()
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    lattice.words(&collapse_ctc(&path, lattice.blank()))
}

/// Word → acoustically confusable words.
pub type ConfusionMap = BTreeMap<String, Vec<String>>;

/// Blank mass inside a token frame.
const TOKEN_BLANK: f64 = 0.05;
/// Probability floor given to every non-competing vocabulary entry.
const FLOOR: f64 = 1e-4;
/// Upper bound of the confusion share for a token that is not confused.
const LEAK: f64 = 0.05;

/// Deterministic stand-in for an acoustic model. Each transcript token gets
/// `frames_per_token` frames followed by one blank frame. With probability
/// `confusion_strength` a token is confused: a share `m ~ U(0, 1)` of its
/// non-blank mass moves to a confusable word, so the argmax flips exactly
/// when `m > 0.5`. Unconfused tokens leak at most `LEAK` to the confusable.
pub fn synth_lattice(
    transcript: &[String],
    vocab: &[String],
    confusions: &ConfusionMap,
    confusion_strength: f64,
    frames_per_token: usize,
    seed: u64,
) -> Result<EmissionLattice> {
    if !(0.0..1.0).contains(&confusion_strength) {
        return Err(Error::Precondition(format!(
            "confusion strength {confusion_strength} outside [0, 1)"
        )));
    }
    if frames_per_token == 0 {
        return Err(Error::Precondition("frames_per_token must be at least 1".into()));
    }
    if vocab.is_empty() {
        return Err(Error::Precondition("vocabulary is empty".into()));
    }
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let ids = transcript
        .iter()
        .map(|w| index.get(w.as_str()).copied().ok_or_else(|| Error::OutOfVocabulary(w.clone())))
        .collect::<Result<Vec<_>>>()?;

    let v = vocab.len();
    let blank = v;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(ids.len() * (frames_per_token + 1) + 1);

    let blank_frame = {
        let mut p = vec![FLOOR; v + 1];
        p[blank] = 1.0 - FLOOR * v as f64;
        to_log(p)
    };

    for (&id, word) in ids.iter().zip(transcript) {
        let confused = rng.gen::<f64>() < confusion_strength;
        let u: f64 = rng.gen();
        let pick: f64 = rng.gen();
        let share = if confused { u } else { LEAK * u };
        let mut candidates: Vec<usize> = match confusions.get(word) {
            Some(list) if !list.is_empty() => list
                .iter()
                .map(|w| index.get(w.as_str()).copied().ok_or_else(|| Error::OutOfVocabulary(w.clone())))
                .collect::<Result<_>>()?,
            _ => (0..v).collect(),
        };
        candidates.retain(|&c| c != id);
        let competitor = if candidates.is_empty() {
            None
        } else {
            Some(candidates[((pick * candidates.len() as f64) as usize).min(candidates.len() - 1)])
        };

        let mut p = vec![FLOOR; v + 1];
        p[blank] = TOKEN_BLANK;
        let floors = (v - 1 - usize::from(competitor.is_some())) as f64 * FLOOR;
        let rest = 1.0 - TOKEN_BLANK - floors;
        match competitor {
            Some(c) => {
                p[id] = (1.0 - share) * rest;
                p[c] = share * rest;
            }
            None => p[id] = rest,
        }
        let row = to_log(p);
        for _ in 0..frames_per_token {
            frames.push(row.clone());
        }
        frames.push(blank_frame.clone());
    }
    if frames.is_empty() {
        frames.push(blank_frame);
    }
    EmissionLattice::new(vocab.to_vec(), frames)
}

fn to_log(p: Vec<f64>) -> Vec<f64> {
    p.into_iter().map(f64::ln).collect()
}
