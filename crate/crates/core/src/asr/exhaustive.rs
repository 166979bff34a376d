use std::collections::HashMap;

use super::{collapse_ctc, log_add, rank_candidates, EmissionLattice, HypothesisList};
use crate::error::{Error, Result};

/// Largest path count the brute-force enumeration accepts.
pub const EXHAUSTIVE_LIMIT: f64 = 1e6;

/// Log-probability of every distinct collapsed sequence, obtained by
/// enumerating all `(|V|+1)^F` frame paths.
pub fn exhaustive_distribution(lattice: &EmissionLattice) -> Result<Vec<(Vec<usize>, f64)>> {
    lattice.validate()?;
    let width = lattice.vocab.len() + 1;
    let frames = lattice.num_frames();
    let size = (width as f64).powi(frames as i32);
    if size > EXHAUSTIVE_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            size,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let blank = lattice.blank();
    let mut totals: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut path = vec![0usize; frames];
    loop {
        let lp: f64 = path
            .iter()
            .enumerate()
            .map(|(t, &s)| lattice.frames[t][s])
            .sum();
        let seq = collapse_ctc(&path, blank);
        let e = totals.entry(seq).or_insert(f64::NEG_INFINITY);
        *e = log_add(*e, lp);

        // odometer increment
        let mut t = frames;
        loop {
            if t == 0 {
                let mut out: Vec<_> = totals.into_iter().collect();
                out.sort_by(|a, b| a.0.cmp(&b.0));
                return Ok(out);
            }
            t -= 1;
            path[t] += 1;
            if path[t] < width {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Brute-force N-best: top `n_plus_1` sequences of the exhaustive
/// distribution, with the same ordering rules as the beam search.
pub fn exhaustive_nbest(lattice: &EmissionLattice, n_plus_1: usize) -> Result<HypothesisList> {
    let dist = exhaustive_distribution(lattice)?;
    Ok(rank_candidates(lattice, dist, n_plus_1))
}
