//! Oracle suites runnable from the command line: beam search against
//! exhaustive enumeration, WER against a plain recursion, and analytic
//! gradients against finite differences.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::asr::{ctc_prefix_beam_nbest, exhaustive_nbest, EmissionLattice};
use crate::error::Result;
use crate::eval::wer_counts;
use crate::lip::{preprocess_rois, LipEncoderConfig, RoiSequence};
use crate::lm::{init_adapter, init_base, is_trainable, loss_graph, ModelConfig, TokenizedSample};
use crate::tensor::gradcheck::{check_gradients, DEFAULT_EPS};
use crate::tensor::{no_grad, Binder, Graph, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Random normalised lattice with `frames` frames over `vocab` words.
pub fn random_lattice(rng: &mut impl Rng, frames: usize, vocab: usize) -> EmissionLattice {
    let words = (0..vocab).map(|i| format!("w{i}")).collect();
    let rows = (0..frames)
        .map(|_| {
            let raw: Vec<f64> = (0..=vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|p| (p / z).ln()).collect()
        })
        .collect();
    EmissionLattice::new(words, rows).expect("normalised rows")
}

/// Over `cases` random lattices (at most 5 frames, 3 words), an unpruned
/// beam must return exactly the exhaustive n-best.
pub fn beam_matches_exhaustive(cases: usize, seed: u64) -> Result<(usize, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..cases {
        let frames = rng.gen_range(1..=5);
        let vocab = rng.gen_range(1..=3);
        let lat = random_lattice(&mut rng, frames, vocab);
        let paths = (vocab + 1).pow(frames as u32);
        let n = rng.gen_range(2..=6);
        let beam = ctc_prefix_beam_nbest(&lat, paths.max(n), n)?;
        let exact = exhaustive_nbest(&lat, n)?;
        let same = beam.hypotheses.len() == exact.hypotheses.len()
            && beam.exhausted == exact.exhausted
            && beam.hypotheses.iter().zip(&exact.hypotheses).all(|(a, b)| {
                a.tokens == b.tokens && ((a.score - b.score).abs() <= 1e-9 * b.score.abs().max(1e-300))
            });
        if !same {
            failures.push(format!("case {case}: frames {frames}, vocab {vocab}, n {n}"));
        }
    }
    Ok((cases, failures))
}

/// Minimum edit distance by recursion over prefix lengths, memoised.
/// Both sequences must be shorter than 16.
pub fn edit_distance_oracle(r: &[u8], h: &[u8]) -> usize {
    const W: usize = 16;
    fn go(r: &[u8], h: &[u8], i: usize, j: usize, memo: &mut [u8; W * W]) -> u8 {
        if memo[i * W + j] != u8::MAX {
            return memo[i * W + j];
        }
        let v = if i == 0 {
            j as u8
        } else if j == 0 {
            i as u8
        } else {
            let sub = go(r, h, i - 1, j - 1, memo) + u8::from(r[i - 1] != h[j - 1]);
            let del = go(r, h, i - 1, j, memo) + 1;
            let ins = go(r, h, i, j - 1, memo) + 1;
            sub.min(del).min(ins)
        };
        memo[i * W + j] = v;
        v
    }
    assert!(r.len() < W && h.len() < W, "oracle supports sequences shorter than {W}");
    let mut memo = [u8::MAX; W * W];
    go(r, h, r.len(), h.len(), &mut memo) as usize
}

/// Every sequence over `vocab` symbols with length in `0..=max_len`.
pub fn all_sequences(vocab: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * vocab as usize);
        for s in &frontier {
            for w in 0..vocab {
                let mut t: Vec<u8> = s.clone();
                t.push(w);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Every pair with a non-empty reference, over a 4-word vocabulary. The
/// error total must equal the oracle and the counts must account for both
/// sequence lengths.
pub fn wer_sweep(max_len: usize) -> Result<(usize, Vec<String>)> {
    const WORDS: [&str; 4] = ["a", "b", "c", "d"];
    let seqs = all_sequences(WORDS.len() as u8, max_len);
    let as_words: Vec<Vec<&str>> = seqs.iter().map(|s| s.iter().map(|&i| WORDS[i as usize]).collect()).collect();
    let mut failures = Vec::new();
    let mut pairs = 0;
    for (ri, r) in seqs.iter().enumerate() {
        if r.is_empty() {
            continue;
        }
        for (hi, h) in seqs.iter().enumerate() {
            pairs += 1;
            let c = wer_counts(&as_words[ri], &as_words[hi])?;
            let matches = c.ref_words - c.substitutions - c.deletions;
            let ok = c.ref_words == r.len()
                && matches + c.substitutions + c.insertions == h.len()
                && c.errors() == edit_distance_oracle(r, h);
            if !ok && failures.len() < 10 {
                failures.push(format!("{:?} vs {:?}", as_words[ri], as_words[hi]));
            }
        }
    }
    Ok((pairs, failures))
}

/// Miniature model used by the gradient check.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        dim: 16,
        layers: 2,
        heads: 2,
        ff_mult: 2,
        max_len: 16,
        prefix_len: 4,
        prompt_layers: 1,
        lip: LipEncoderConfig {
            roi_size: 8,
            stem_channels: 4,
            blocks: 1,
            tcn_levels: 1,
            lip_dim: 8,
            lip_len: 6,
            ..Default::default()
        },
    }
}

/// Worst relative error over every trainable tensor of the miniature model,
/// with gates opened so every path carries gradient.
pub fn gradient_check(seed: u64) -> Result<Vec<(String, f64)>> {
    let cfg = miniature_config();
    let mut p = init_base(&cfg, 12, seed)?;
    p.extend(init_adapter(&cfg, seed + 1)?);
    for l in 0..cfg.layers {
        p.insert(format!("adapter.layer{l}.gate"), Tensor::scalar(0.6));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..4).map(|_| (0..64).map(|_| rng.gen::<f64>()).collect()).collect();
    let rois = preprocess_rois(&RoiSequence::new(frames, 8, 8, 25.0)?, (8, 8))?;
    let sample = TokenizedSample {
        inputs: vec![1, 4, 5, 6, 7],
        targets: vec![4, 5, 6, 7, 2],
        mask: vec![false, false, true, true, true],
    };
    let mut g = Graph::new();
    let mut b = Binder::new(&p, &is_trainable);
    let loss = loss_graph(&mut g, &mut b, &cfg, &sample, Some(&rois), 3.0)?;
    let mut grads = g.backward(loss);
    let analytic: BTreeMap<String, Tensor> = b.collect(&mut grads);
    let checks = check_gradients(&p, &analytic, DEFAULT_EPS, |q| {
        let mut g = Graph::new();
        let mut b = Binder::new(q, &no_grad);
        let l = loss_graph(&mut g, &mut b, &cfg, &sample, Some(&rois), 3.0).expect("same graph as above");
        g.value(l).item()
    });
    Ok(checks.into_iter().map(|c| (c.name, c.rel_err)).collect())
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        timed("beam-vs-exhaustive", || {
            let (n, fails) = beam_matches_exhaustive(200, 0)?;
            Ok((fails.is_empty(), format!("{n} lattices, {} mismatches {fails:?}", fails.len())))
        }),
        timed("wer-oracle", || {
            let (n, fails) = wer_sweep(6)?;
            Ok((fails.is_empty(), format!("{n} pairs, {} mismatches {fails:?}", fails.len())))
        }),
        timed("gradient-check", || {
            let errs = gradient_check(1)?;
            let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
            Ok((worst < 1e-4, format!("{} tensors, worst relative error {worst:.2e}", errs.len())))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_known_values() {
        assert_eq!(edit_distance_oracle(&[0, 1, 2], &[0, 1, 2]), 0);
        assert_eq!(edit_distance_oracle(&[], &[1, 1]), 2);
        assert_eq!(edit_distance_oracle(&[0, 1, 2, 3], &[0, 3, 2, 3, 1]), 2);
        assert_eq!(all_sequences(2, 3).len(), 1 + 2 + 4 + 8);
    }

    #[test]
    fn small_suites_pass() {
        let (_, f) = beam_matches_exhaustive(20, 3).unwrap();
        assert!(f.is_empty(), "{f:?}");
        let (n, f) = wer_sweep(3).unwrap();
        assert_eq!(n, 84 * 85);
        assert!(f.is_empty(), "{f:?}");
    }
}
