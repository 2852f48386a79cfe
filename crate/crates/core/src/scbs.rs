//! Positive-pair construction and the pair-similarity loss
//! `-(1/|P|) Σ log σ(s_ij)`, with σ the logistic function applied to the
//! cosine similarity of each pair.
//!
//! Labeled samples pair with a random other member of their class.
//! Unlabeled samples pair with their most cosine-similar other sample in
//! the same batch.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{dot, norm, softplus, Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScbsError {
    #[error("zero-norm feature at row {0}")]
    DegenerateFeature(usize),
    #[error("pseudo-pair mining needs at least 2 samples, got {0}")]
    InsufficientBatch(usize),
    #[error("no positive pairs")]
    EmptyPairs,
    #[error("dimension mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("pair ({0}, {1}) is out of range for {2} rows")]
    OutOfRange(usize, usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairOrigin {
    Labeled,
    Pseudo,
    /// Union of a labeled and a pseudo set over concatenated rows.
    Pooled,
}

/// Rule used by [`pseudo_pairs`] to pick a partner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborRule {
    /// Most similar sample other than the anchor itself.
    #[default]
    NearestOther,
    /// Skip that sample too and take the runner-up (needs N ≥ 3; falls
    /// back to the nearest when only one candidate exists).
    SecondNearestOther,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositivePairSet {
    pub pairs: Vec<(usize, usize)>,
    pub origin: PairOrigin,
}

impl PositivePairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Joins source pairs with target pairs whose rows follow the
    /// `offset` source rows.
    pub fn pool(source: &Self, target: &Self, offset: usize) -> Self {
        let mut pairs = source.pairs.clone();
        pairs.extend(target.pairs.iter().map(|&(i, j)| (i + offset, j + offset)));
        Self {
            pairs,
            origin: PairOrigin::Pooled,
        }
    }
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, ScbsError> {
    if a.len() != b.len() {
        return Err(ScbsError::Shape(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(ScbsError::DegenerateFeature(0));
    }
    if nb == 0.0 {
        return Err(ScbsError::DegenerateFeature(1));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// One uniformly random same-class partner for every sample whose class
/// has at least two members; singletons are skipped.
pub fn labeled_pairs<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> PositivePairSet {
    let mut pairs = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let others: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|&(j, &l)| j != i && l == label)
            .map(|(j, _)| j)
            .collect();
        if !others.is_empty() {
            pairs.push((i, others[rng.random_range(0..others.len())]));
        }
    }
    PositivePairSet {
        pairs,
        origin: PairOrigin::Labeled,
    }
}

/// Nearest-neighbour pseudo-positives by cosine similarity; ties go to the
/// lowest index.
pub fn pseudo_pairs(features: &Tensor, rule: NeighborRule) -> Result<PositivePairSet, ScbsError> {
    let n = features.rows();
    if features.rank() != 2 || n < 2 {
        return Err(ScbsError::InsufficientBatch(if features.rank() == 2 { n } else { 0 }));
    }
    let norms: Vec<f64> = (0..n).map(|i| norm(features.row(i))).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(ScbsError::DegenerateFeature(i));
    }
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let mut best: Option<(usize, f64)> = None;
        let mut second: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| j != i) {
            let s = (dot(features.row(i), features.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            match best {
                Some((_, b)) if s <= b => {
                    if second.is_none_or(|(_, c)| s > c) {
                        second = Some((j, s));
                    }
                }
                _ => {
                    second = best;
                    best = Some((j, s));
                }
            }
        }
        let pick = match rule {
            NeighborRule::NearestOther => best,
            NeighborRule::SecondNearestOther => second.or(best),
        };
        pairs.push((i, pick.expect("n >= 2").0));
    }
    Ok(PositivePairSet {
        pairs,
        origin: PairOrigin::Pseudo,
    })
}

/// Value of the pair-similarity loss on fixed features.
pub fn scbs_loss(features: &Tensor, pairs: &PositivePairSet) -> Result<f64, ScbsError> {
    if pairs.is_empty() {
        return Err(ScbsError::EmptyPairs);
    }
    let n = features.rows();
    let mut total = 0.0;
    for &(i, j) in &pairs.pairs {
        if i >= n || j >= n {
            return Err(ScbsError::OutOfRange(i, j, n));
        }
        let s = cosine_similarity(features.row(i), features.row(j)).map_err(|e| match e {
            ScbsError::DegenerateFeature(0) => ScbsError::DegenerateFeature(i),
            ScbsError::DegenerateFeature(_) => ScbsError::DegenerateFeature(j),
            other => other,
        })?;
        // -log σ(s) = softplus(-s)
        total += softplus(-s);
    }
    Ok(total / pairs.len() as f64)
}

/// Differentiable pair-similarity loss over the rows of `features`.
/// `pairs` must be nonempty.
pub fn scbs_loss_graph(graph: &mut Graph, features: NodeId, pairs: &PositivePairSet) -> NodeId {
    let (anchors, partners): (Vec<usize>, Vec<usize>) = pairs.pairs.iter().copied().unzip();
    let a = graph.gather_rows(features, anchors);
    let b = graph.gather_rows(features, partners);
    let s = graph.cosine(a, b);
    let neg = graph.neg(s);
    let per_pair = graph.softplus(neg);
    graph.mean(per_pair)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(ScbsError::DegenerateFeature(0))
        );
    }

    #[test]
    fn two_same_class_samples_pair_with_each_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = labeled_pairs(&[0, 0], &mut rng);
        assert_eq!(p.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(p.origin, PairOrigin::Labeled);
    }

    #[test]
    fn distinct_classes_give_no_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(labeled_pairs(&[0, 1], &mut rng).is_empty());
    }

    #[test]
    fn seeded_labeled_pairs_are_reproducible() {
        let draw = |seed| labeled_pairs(&[0, 0, 0], &mut ChaCha8Rng::seed_from_u64(seed)).pairs;
        let first = draw(11);
        assert_eq!(first, draw(11));
        // recorded from seed 11
        assert_eq!(first, vec![(0, 1), (1, 0), (2, 1)]);
        for (i, j) in first {
            assert_ne!(i, j);
        }
    }

    #[test]
    fn pseudo_pair_examples() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.9, 0.1], [-1.0, 0.0]]).unwrap();
        let p = pseudo_pairs(&f, NeighborRule::NearestOther).unwrap();
        // brute force: row 0 against every other row
        let sims: Vec<f64> = [1, 2]
            .iter()
            .map(|&j| cosine_similarity(f.row(0), f.row(j)).unwrap())
            .collect();
        assert!(sims[0] > sims[1]);
        assert_eq!(p.pairs[0], (0, 1));

        let two = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 1.0]]).unwrap();
        assert_eq!(pseudo_pairs(&two, NeighborRule::NearestOther).unwrap().pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn duplicate_rows_pair_together_lowest_index_first() {
        let f = Tensor::from_rows(&[[1.0, 1.0], [0.0, 1.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
        let p = pseudo_pairs(&f, NeighborRule::NearestOther).unwrap();
        assert_eq!(p.pairs[0], (0, 2));
        assert_eq!(p.pairs[2], (2, 0));
        assert_eq!(p.pairs[3], (3, 0));
    }

    #[test]
    fn second_nearest_rule_skips_the_best_match() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.9, 0.1], [0.5, 0.5], [-1.0, 0.0]]).unwrap();
        let p = pseudo_pairs(&f, NeighborRule::SecondNearestOther).unwrap();
        assert_eq!(p.pairs[0], (0, 2));
    }

    #[test]
    fn pseudo_pairs_need_two_nonzero_rows() {
        let one = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(
            pseudo_pairs(&one, NeighborRule::NearestOther),
            Err(ScbsError::InsufficientBatch(1))
        );
        let zero = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(
            pseudo_pairs(&zero, NeighborRule::NearestOther),
            Err(ScbsError::DegenerateFeature(1))
        );
    }

    #[test]
    fn loss_examples_match_scalar_softplus() {
        // oracle: ln(1 + e^{-s}) evaluated directly
        let oracle = |s: f64| (1.0 + (-s).exp()).ln();
        let orth = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let both = PositivePairSet {
            pairs: vec![(0, 1), (1, 0)],
            origin: PairOrigin::Pseudo,
        };
        assert!((scbs_loss(&orth, &both).unwrap() - 2f64.ln()).abs() < 1e-15);

        let same = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        let v = scbs_loss(&same, &both).unwrap();
        assert!((v - oracle(1.0)).abs() < 1e-12 && (v - 0.313262).abs() < 1e-6);

        // s = 0.5 and s = -0.5 via 60° and 120° vectors
        let (c, s) = (0.5f64, 0.75f64.sqrt());
        let f = Tensor::from_rows(&[[1.0, 0.0], [c, s], [-c, s]]).unwrap();
        let mixed = PositivePairSet {
            pairs: vec![(0, 1), (0, 2)],
            origin: PairOrigin::Labeled,
        };
        let v = scbs_loss(&f, &mixed).unwrap();
        assert!((v - 0.5 * (oracle(0.5) + oracle(-0.5))).abs() < 1e-12);
        assert!((v - 0.724077).abs() < 1e-6);
    }

    #[test]
    fn empty_pairs_are_an_error() {
        let f = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let none = PositivePairSet {
            pairs: vec![],
            origin: PairOrigin::Labeled,
        };
        assert_eq!(scbs_loss(&f, &none), Err(ScbsError::EmptyPairs));
    }

    #[test]
    fn graph_loss_agrees_with_direct_value() {
        let f = Tensor::from_rows(&[[1.0, 0.3], [0.2, -1.0], [0.5, 0.5]]).unwrap();
        let pairs = pseudo_pairs(&f, NeighborRule::NearestOther).unwrap();
        let mut g = Graph::new();
        let x = g.param(f.clone());
        let loss = scbs_loss_graph(&mut g, x, &pairs);
        let got = g.forward(loss).unwrap().item();
        assert!((got - scbs_loss(&f, &pairs).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn pooling_offsets_target_rows() {
        let s = PositivePairSet {
            pairs: vec![(0, 1)],
            origin: PairOrigin::Labeled,
        };
        let t = PositivePairSet {
            pairs: vec![(0, 2), (1, 0)],
            origin: PairOrigin::Pseudo,
        };
        let p = PositivePairSet::pool(&s, &t, 5);
        assert_eq!(p.pairs, vec![(0, 1), (5, 7), (6, 5)]);
        assert_eq!(p.origin, PairOrigin::Pooled);
    }
}
