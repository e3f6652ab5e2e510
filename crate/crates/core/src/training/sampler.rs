//! Noise-contrastive sampling of positive, hard-inverse and negative examples.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use super::loss::{LossMode, Relation};
use crate::corpus::{Pair, RelationExample};

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("samples_per_anchor must be even and at least 2, got {0}")]
    BadSampleCount(usize),
    #[error("no negative candidates exist for anchor pair {0}")]
    NoNegatives(Pair),
    #[error("anchor index {0} is outside the index")]
    UnknownAnchor(usize),
}

/// Examples grouped by ordered pair, with each pair's reverse resolved.
#[derive(Debug, Clone)]
pub struct PairIndex {
    pairs: Vec<Pair>,
    pair_of: Vec<usize>,
    /// Example indices grouped by pair, contiguous per pair.
    order: Vec<usize>,
    /// `order[offsets[p]..offsets[p + 1]]` are the members of pair `p`.
    offsets: Vec<usize>,
    reverse: Vec<Option<usize>>,
}

impl PairIndex {
    pub fn build(examples: &[RelationExample]) -> Self {
        let mut groups: BTreeMap<Pair, Vec<usize>> = BTreeMap::new();
        for (i, ex) in examples.iter().enumerate() {
            groups.entry(ex.pair()).or_default().push(i);
        }
        let mut pairs = Vec::with_capacity(groups.len());
        let mut pair_of = vec![0; examples.len()];
        let mut order = Vec::with_capacity(examples.len());
        let mut offsets = vec![0];
        for (p, (pair, members)) in groups.into_iter().enumerate() {
            for &i in &members {
                pair_of[i] = p;
            }
            order.extend(members);
            offsets.push(order.len());
            pairs.push(pair);
        }
        let reverse = pairs
            .iter()
            .map(|pair| pairs.binary_search(&pair.reversed()).ok())
            .collect();
        Self {
            pairs,
            pair_of,
            order,
            offsets,
            reverse,
        }
    }

    pub fn len(&self) -> usize {
        self.pair_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_of.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn pair_of(&self, example: usize) -> &Pair {
        &self.pairs[self.pair_of[example]]
    }

    fn members(&self, pair: usize) -> &[usize] {
        &self.order[self.offsets[pair]..self.offsets[pair + 1]]
    }

    pub fn relation(&self, anchor: usize, other: usize) -> Relation {
        let (a, o) = (self.pair_of[anchor], self.pair_of[other]);
        if a == o {
            Relation::Match
        } else if self.reverse[a] == Some(o) {
            Relation::Inverse
        } else {
            Relation::Neither
        }
    }

    /// Fraction of examples whose reversed ordered pair has at least one example.
    pub fn inverse_coverage(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let covered: usize = (0..self.pairs.len())
            .filter(|&p| self.reverse[p].is_some())
            .map(|p| self.members(p).len())
            .sum();
        covered as f64 / self.len() as f64
    }
}

/// One anchor with its sampled comparison examples (indices into the indexed slice).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub inverses: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl PairBatch {
    /// Positives, then inverses, then negatives.
    pub fn samples(&self) -> impl Iterator<Item = usize> + '_ {
        self.positives
            .iter()
            .chain(&self.inverses)
            .chain(&self.negatives)
            .copied()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.inverses.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `quota` draws from `pool`: without replacement when the pool is large
/// enough, with replacement otherwise.
fn draw<R: Rng + ?Sized>(pool: &[usize], quota: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= quota {
        index::sample(rng, pool.len(), quota)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..quota).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Samples `k` comparison examples for `anchor`.
///
/// Half are negatives drawn uniformly from examples of unrelated pairs. The
/// other half are positives, split evenly with hard inverses when the mode is
/// [`LossMode::Inv`] and the anchor's reversed pair has examples. In
/// [`LossMode::Em`] no inverse group is drawn and reversed-pair examples are
/// ordinary negative candidates. An anchor without other examples of its
/// pair is its own positive.
pub fn nce_sample<R: Rng + ?Sized>(
    anchor: usize,
    index: &PairIndex,
    k: usize,
    mode: LossMode,
    rng: &mut R,
) -> Result<PairBatch, SamplerError> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(SamplerError::BadSampleCount(k));
    }
    if anchor >= index.len() {
        return Err(SamplerError::UnknownAnchor(anchor));
    }
    let half = k / 2;
    let pair = index.pair_of[anchor];
    let inverse_pair = match mode {
        LossMode::Inv => index.reverse[pair],
        LossMode::Em => None,
    };

    let mut excluded: Vec<(usize, usize)> = std::iter::once(pair)
        .chain(inverse_pair)
        .map(|p| (index.offsets[p], index.offsets[p + 1]))
        .collect();
    excluded.sort_unstable();
    let n_excluded: usize = excluded.iter().map(|(s, e)| e - s).sum();
    let n_candidates = index.len() - n_excluded;
    if n_candidates == 0 {
        return Err(SamplerError::NoNegatives(index.pairs[pair].clone()));
    }
    // Map a rank among candidates to a position in `order`, skipping the excluded ranges.
    let to_order = |mut rank: usize| {
        for &(start, end) in &excluded {
            if rank >= start {
                rank += end - start;
            }
        }
        index.order[rank]
    };
    let negatives: Vec<usize> = if n_candidates >= half {
        index::sample(rng, n_candidates, half)
            .into_iter()
            .map(to_order)
            .collect()
    } else {
        (0..half)
            .map(|_| to_order(rng.gen_range(0..n_candidates)))
            .collect()
    };

    let mut own: Vec<usize> = index
        .members(pair)
        .iter()
        .copied()
        .filter(|&i| i != anchor)
        .collect();
    if own.is_empty() {
        own.push(anchor);
    }
    let (n_pos, n_inv) = match inverse_pair {
        Some(_) => (half - half / 2, half / 2),
        None => (half, 0),
    };
    let positives = draw(&own, n_pos, rng);
    let inverses = match inverse_pair {
        Some(p) => draw(index.members(p), n_inv, rng),
        None => Vec::new(),
    };

    Ok(PairBatch {
        anchor,
        positives,
        inverses,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_examples, DialogueEntry, Episode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn examples(spec: &[(&str, &str, usize)]) -> Vec<RelationExample> {
        let mut out = Vec::new();
        for &(s, o, n) in spec {
            for i in 0..n {
                let ep = Episode {
                    show_id: "x".into(),
                    episode_id: format!("{s}{o}{i}"),
                    entries: vec![DialogueEntry::new(s, "a"), DialogueEntry::new(o, "b")],
                };
                out.extend(build_examples(&ep));
            }
        }
        out
    }

    #[test]
    fn coverage_counts_examples_with_reverse() {
        assert_eq!(PairIndex::build(&examples(&[("A", "B", 1), ("B", "A", 1)])).inverse_coverage(), 1.0);
        assert_eq!(PairIndex::build(&examples(&[("A", "B", 1), ("C", "D", 1)])).inverse_coverage(), 0.0);
        let idx = PairIndex::build(&examples(&[("A", "B", 3), ("B", "A", 1), ("C", "D", 4)]));
        assert_eq!(idx.inverse_coverage(), 0.5);
    }

    #[test]
    fn relation_lookup() {
        let exs = examples(&[("A", "B", 2), ("B", "A", 1), ("C", "D", 1)]);
        let idx = PairIndex::build(&exs);
        assert_eq!(idx.relation(0, 1), Relation::Match);
        assert_eq!(idx.relation(0, 2), Relation::Inverse);
        assert_eq!(idx.relation(2, 0), Relation::Inverse);
        assert_eq!(idx.relation(0, 3), Relation::Neither);
    }

    #[test]
    fn inverse_split_when_available() {
        let exs = examples(&[("A", "B", 10), ("B", "A", 10), ("C", "D", 10), ("E", "F", 10)]);
        let idx = PairIndex::build(&exs);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = nce_sample(0, &idx, 8, LossMode::Inv, &mut rng).unwrap();
        assert_eq!((b.positives.len(), b.inverses.len(), b.negatives.len()), (2, 2, 4));
        assert!(b.positives.iter().all(|&i| idx.relation(0, i) == Relation::Match && i != 0));
        assert!(b.inverses.iter().all(|&i| idx.relation(0, i) == Relation::Inverse));
        assert!(b.negatives.iter().all(|&i| idx.relation(0, i) == Relation::Neither));

        let em = nce_sample(0, &idx, 8, LossMode::Em, &mut rng).unwrap();
        assert_eq!((em.positives.len(), em.inverses.len(), em.negatives.len()), (4, 0, 4));
    }

    #[test]
    fn no_inverse_means_all_positives() {
        let exs = examples(&[("A", "B", 10), ("C", "D", 10)]);
        let idx = PairIndex::build(&exs);
        let b = nce_sample(3, &idx, 8, LossMode::Inv, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((b.positives.len(), b.inverses.len(), b.negatives.len()), (4, 0, 4));
    }

    #[test]
    fn single_candidate_is_repeated() {
        let exs = examples(&[("A", "B", 2), ("C", "D", 10)]);
        let idx = PairIndex::build(&exs);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let b = nce_sample(0, &idx, 8, LossMode::Inv, &mut rng).unwrap();
            assert_eq!(b.positives, vec![1; 4]);
        }
    }

    #[test]
    fn lone_anchor_is_its_own_positive() {
        let exs = examples(&[("A", "B", 1), ("C", "D", 1)]);
        let idx = PairIndex::build(&exs);
        let b = nce_sample(0, &idx, 4, LossMode::Inv, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(b.positives, vec![0, 0]);
        assert_eq!(b.negatives, vec![1, 1]);
    }

    #[test]
    fn errors() {
        let exs = examples(&[("A", "B", 3), ("B", "A", 3)]);
        let idx = PairIndex::build(&exs);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(
            nce_sample(0, &idx, 8, LossMode::Inv, &mut rng),
            Err(SamplerError::NoNegatives(Pair::new("A", "B")))
        );
        // in EM mode the reversed pair supplies negatives
        assert!(nce_sample(0, &idx, 8, LossMode::Em, &mut rng).is_ok());
        assert_eq!(nce_sample(0, &idx, 7, LossMode::Em, &mut rng), Err(SamplerError::BadSampleCount(7)));
    }

    #[test]
    fn negatives_cover_every_unrelated_example() {
        let exs = examples(&[("A", "B", 2), ("B", "A", 2), ("C", "D", 3), ("D", "E", 2), ("Z", "A", 1)]);
        let idx = PairIndex::build(&exs);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            seen.extend(nce_sample(0, &idx, 8, LossMode::Inv, &mut rng).unwrap().negatives);
        }
        let expected: std::collections::BTreeSet<usize> =
            (0..exs.len()).filter(|&i| idx.relation(0, i) == Relation::Neither).collect();
        assert_eq!(seen, expected);
    }
}
