//! Word error rate and the system comparison report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asr::Hypothesis;
use crate::corpus::{render_instruction, LipHypRecord};
use crate::error::{Error, Result};
use crate::lip::{encode_prepared, PreparedRois};
use crate::lm::{generate, token_logprobs, ModelConfig, Tokenizer, BOS, EOS};
use crate::tensor::ParamSet;
use crate::text::{normalize_tokens, words};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.errors() as f64 / self.ref_words as f64
        }
    }

    pub fn add(&mut self, o: &WerCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_words += o.ref_words;
    }
}

/// Minimal unit-cost alignment. Among equal-cost alignments the backtrace
/// prefers a substitution, then an insertion, then a deletion.
pub fn wer_counts<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<WerCounts> {
    if reference.is_empty() {
        return Err(Error::Precondition("reference is empty".into()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    // short utterances stay on the stack
    let mut small = [0usize; 128];
    let mut large = Vec::new();
    let d: &mut [usize] = if (n + 1) * w <= small.len() {
        &mut small[..(n + 1) * w]
    } else {
        large.resize((n + 1) * w, 0);
        &mut large
    };
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = d[(i - 1) * w + j - 1] + usize::from(!same);
            d[i * w + j] = diag.min(d[i * w + j - 1] + 1).min(d[(i - 1) * w + j] + 1);
        }
    }
    let mut c = WerCounts {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                c.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            c.insertions += 1;
            j -= 1;
        } else {
            c.deletions += 1;
            i -= 1;
        }
    }
    Ok(c)
}

/// Index maximising the unweighted mean of the two scores; the earlier
/// index wins ties.
pub fn choose_by_average(lm: &[f64], asr: &[f64]) -> usize {
    assert_eq!(lm.len(), asr.len());
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (a, b)) in lm.iter().zip(asr).enumerate() {
        let s = 0.5 * (a + b);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Mean log-probability per predicted token of `BOS words EOS`.
pub fn lm_mean_logprob(words: &[String], tokenizer: &Tokenizer, lm: &ParamSet, cfg: &ModelConfig) -> Result<f64> {
    let ids: Vec<usize> = std::iter::once(BOS)
        .chain(tokenizer.tokenize(&words.join(" ")))
        .chain([EOS])
        .collect();
    let lp = token_logprobs(&ids, lm, cfg)?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Picks the hypothesis with the best average of per-token LM and ASR
/// scores. List order is rank order, so ties go to the better ASR rank.
pub fn lm_rescore_choose(
    record: &LipHypRecord,
    tokenizer: &Tokenizer,
    lm: &ParamSet,
    cfg: &ModelConfig,
) -> Result<Hypothesis> {
    record.validate()?;
    let hyps = &record.hypotheses.hypotheses;
    let mut lm_scores = Vec::with_capacity(hyps.len());
    let mut asr_scores = Vec::with_capacity(hyps.len());
    for h in hyps {
        lm_scores.push(lm_mean_logprob(&h.tokens, tokenizer, lm, cfg)?);
        asr_scores.push(h.score / h.tokens.len().max(1) as f64);
    }
    Ok(hyps[choose_by_average(&lm_scores, &asr_scores)].clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    OneBest,
    Lm,
    Ger,
    LipGer,
}

impl System {
    pub const ALL: [System; 4] = [System::OneBest, System::Lm, System::Ger, System::LipGer];

    pub fn name(self) -> &'static str {
        match self {
            System::OneBest => "onebest",
            System::Lm => "lm",
            System::Ger => "ger",
            System::LipGer => "lipger",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s || (s == "lm_rescore" && *x == System::Lm))
            .ok_or_else(|| Error::Config(format!("unknown system `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub id: String,
    pub hypothesis: String,
    pub correction: String,
    pub reference: String,
    pub counts: WerCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub system: System,
    pub counts: WerCounts,
    pub wer: f64,
    /// Records that could not be evaluated, such as a missing ROI file.
    pub skipped: Vec<String>,
    pub records: Vec<RecordResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub systems: Vec<SystemResult>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn wer(&self, s: System) -> Option<f64> {
        self.systems.iter().find(|r| r.system == s).map(|r| r.wer)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>6} {:>6} {:>6} {:>6} {:>8}",
            "system", "WER", "S", "D", "I", "N", "skipped"
        );
        for r in &self.systems {
            let c = &r.counts;
            let _ = writeln!(
                out,
                "{:<8} {:>7.2}% {:>6} {:>6} {:>6} {:>6} {:>8}",
                r.system.name(),
                100.0 * r.wer,
                c.substitutions,
                c.deletions,
                c.insertions,
                c.ref_words,
                r.skipped.len()
            );
        }
        out
    }

    pub fn write(&self, json_path: &Path, table_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))?;
        std::fs::write(table_path, self.table()).map_err(|e| Error::io(table_path, e))
    }
}

/// Models and data access for [`evaluate_systems`].
pub struct EvalContext<'a> {
    pub tokenizer: &'a Tokenizer,
    pub model: &'a ModelConfig,
    /// Base LM used for rescoring and for GER.
    pub base: Option<&'a ParamSet>,
    /// Base LM plus adapters and lip encoder.
    pub lipger: Option<&'a ParamSet>,
    pub load_rois: &'a dyn Fn(&LipHypRecord) -> Result<PreparedRois>,
    pub max_new_tokens: usize,
}

/// `None` when the record's crops could not be loaded.
fn correct(record: &LipHypRecord, system: System, ctx: &EvalContext<'_>) -> Result<Option<Vec<String>>> {
    match system {
        System::OneBest => Ok(Some(record.hypotheses.best().tokens.clone())),
        System::Lm => {
            let lm = ctx.base.ok_or_else(|| missing("lm"))?;
            Ok(Some(lm_rescore_choose(record, ctx.tokenizer, lm, ctx.model)?.tokens))
        }
        System::Ger | System::LipGer => {
            let prompt = ctx.tokenizer.encode_prompt(&render_instruction(record)?.prompt);
            let out = if system == System::Ger {
                let lm = ctx.base.ok_or_else(|| missing("ger"))?;
                generate(&prompt, None, lm, ctx.model, ctx.max_new_tokens)?
            } else {
                let p = ctx.lipger.ok_or_else(|| missing("lipger"))?;
                let Ok(rois) = (ctx.load_rois)(record) else {
                    return Ok(None);
                };
                let e = encode_prepared(&rois, p, &ctx.model.lip)?;
                generate(&prompt, Some(&e), p, ctx.model, ctx.max_new_tokens)?
            };
            Ok(Some(words(&ctx.tokenizer.detokenize(&out))))
        }
    }
}

fn missing(system: &str) -> Error {
    Error::Precondition(format!("system `{system}` needs a model checkpoint"))
}

/// Runs each requested system over `records`. ROI load failures for
/// `lipger` skip the record and are listed in the report.
pub fn evaluate_systems(
    records: &[LipHypRecord],
    systems: &[System],
    ctx: &EvalContext<'_>,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(systems.len());
    for &system in systems {
        let mut total = WerCounts::default();
        let mut results = Vec::with_capacity(records.len());
        let mut skipped = Vec::new();
        for r in records {
            let Some(fixed) = correct(r, system, ctx)? else {
                skipped.push(r.id.clone());
                continue;
            };
            let reference = normalize_tokens(&r.transcript);
            let fixed = normalize_tokens(&fixed);
            let counts = wer_counts(&reference, &fixed)?;
            total.add(&counts);
            results.push(RecordResult {
                id: r.id.clone(),
                hypothesis: r.hypotheses.best().text(),
                correction: fixed.join(" "),
                reference: reference.join(" "),
                counts,
            });
        }
        out.push(SystemResult {
            system,
            counts: total,
            wer: total.wer(),
            skipped,
            records: results,
        });
    }
    Ok(EvalReport { systems: out, config })
}
