use std::collections::BTreeMap;

use super::{lex_cmp, log_add, rank_candidates, EmissionLattice, HypothesisList};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct PrefixScore {
    /// Paths ending in blank.
    blank: f64,
    /// Paths ending in the prefix's last token.
    non_blank: f64,
}

impl PrefixScore {
    const ZERO: Self = Self {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// CTC prefix beam search returning the `n_plus_1` most probable distinct
/// collapsed sequences. Scores are exact sums over all paths of a prefix
/// that survived pruning; with an unpruned beam they equal the exhaustive
/// totals.
pub fn ctc_prefix_beam_nbest(
    lattice: &EmissionLattice,
    beam_width: usize,
    n_plus_1: usize,
) -> Result<HypothesisList> {
    if n_plus_1 < 2 {
        return Err(Error::Precondition(format!("n_plus_1 = {n_plus_1} must be at least 2")));
    }
    if beam_width < n_plus_1 {
        return Err(Error::Precondition(format!(
            "beam width {beam_width} is smaller than n_plus_1 = {n_plus_1}"
        )));
    }
    lattice.validate()?;
    let blank = lattice.blank();
    let ranks = lattice.lex_ranks();

    let mut beam: Vec<(Vec<usize>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];

    for row in &lattice.frames {
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beam {
            let total = score.total();
            let last = prefix.last().copied();

            let entry = next.entry(prefix.clone()).or_insert(PrefixScore::ZERO);
            entry.blank = log_add(entry.blank, total + row[blank]);
            if let Some(l) = last {
                entry.non_blank = log_add(entry.non_blank, score.non_blank + row[l]);
            }

            for (c, &lp) in row.iter().enumerate().take(blank) {
                let mut extended = prefix.clone();
                extended.push(c);
                let from = if Some(c) == last { score.blank } else { total };
                let e = next.entry(extended).or_insert(PrefixScore::ZERO);
                e.non_blank = log_add(e.non_blank, from + lp);
            }
        }
        let mut ranked: Vec<(Vec<usize>, PrefixScore)> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total()
                .partial_cmp(&a.1.total())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| lex_cmp(&ranks, &a.0, &b.0))
        });
        ranked.truncate(beam_width);
        beam = ranked;
    }

    let cands = beam.into_iter().map(|(p, s)| (p, s.total())).collect();
    Ok(rank_candidates(lattice, cands, n_plus_1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::exhaustive_nbest;

    fn lattice(vocab: &[&str], probs: &[&[f64]]) -> EmissionLattice {
        EmissionLattice::new(
            vocab.iter().map(|s| s.to_string()).collect(),
            probs.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_frame_enumerated_example() {
        // paths: aa, a_, _a -> "a" (0.36 + 0.24 + 0.24); __ -> "" (0.16)
        let lat = lattice(&["a"], &[&[0.6, 0.4], &[0.6, 0.4]]);
        let list = ctc_prefix_beam_nbest(&lat, 4, 2).unwrap();
        assert_eq!(list.hypotheses[0].tokens, vec!["a"]);
        assert!((list.hypotheses[0].score.exp() - 0.84).abs() < 1e-12);
        assert!(list.hypotheses[1].tokens.is_empty());
        assert!((list.hypotheses[1].score.exp() - 0.16).abs() < 1e-12);
        assert!(!list.exhausted);
        assert_eq!(list, exhaustive_nbest(&lat, 2).unwrap());
    }

    #[test]
    fn single_frame_ranking_is_token_ranking() {
        let lat = lattice(&["x", "y", "z"], &[&[0.2, 0.5, 0.1, 0.2]]);
        let list = ctc_prefix_beam_nbest(&lat, 8, 4).unwrap();
        let order: Vec<String> = list.hypotheses.iter().map(|h| h.text()).collect();
        // blank and x tie at 0.2: "" sorts before "x"
        assert_eq!(order, vec!["y", "", "x", "z"]);
    }

    #[test]
    fn exhausted_search_space_is_flagged() {
        let lat = lattice(&["a"], &[&[0.6, 0.4]]);
        let list = ctc_prefix_beam_nbest(&lat, 5, 5).unwrap();
        assert_eq!(list.len(), 2);
        assert!(list.exhausted);
    }

    #[test]
    fn argument_preconditions() {
        let lat = lattice(&["a"], &[&[0.6, 0.4]]);
        assert!(ctc_prefix_beam_nbest(&lat, 4, 1).is_err());
        assert!(ctc_prefix_beam_nbest(&lat, 2, 3).is_err());
    }
}
