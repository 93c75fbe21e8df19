use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HeteroGraph;
use crate::{Error, Result};

/// Draws as many distinct ordered non-citation pairs as there are citations.
///
/// A pair `(i, j)` is admissible when `i != j` and neither `i -> j` nor
/// `j -> i` is a citation.
pub fn sample_negative_pairs(graph: &HeteroGraph, seed: u64) -> Result<Vec<(usize, usize)>> {
    let n = graph.num_papers();
    let wanted = graph.citations().len();
    let connected: HashSet<(usize, usize)> = graph.citations().iter().flat_map(|&(s, d)| [(s, d), (d, s)]).collect();
    let total_pairs = n.saturating_mul(n.saturating_sub(1));
    let available = total_pairs - connected.len();
    if available < wanted {
        return Err(Error::InvalidGraph(format!(
            "citation graph too dense: {wanted} negative pairs requested, {available} available"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // rejection sampling degrades when most pairs are taken
    if available < 4 * wanted {
        let mut pool: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && !connected.contains(&(i, j)))
            .collect();
        pool.shuffle(&mut rng);
        pool.truncate(wanted);
        return Ok(pool);
    }

    let mut chosen = HashSet::with_capacity(wanted);
    let mut out = Vec::with_capacity(wanted);
    while out.len() < wanted {
        let pair = (rng.gen_range(0..n), rng.gen_range(0..n));
        if pair.0 != pair.1 && !connected.contains(&pair) && chosen.insert(pair) {
            out.push(pair);
        }
    }
    Ok(out)
}
