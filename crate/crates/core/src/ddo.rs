//! Domain distance optimization: per-domain momentum centroids, inter- and
//! intra-domain distances, and the domain alignment loss
//! `D_inter + exp(-(D_intra_s + D_intra_t)) * w_intra`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{norm, Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DdoError {
    #[error("centroid of an empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    Shape { left: Vec<usize>, right: Vec<usize> },
    #[error("invalid alignment setting: {0}")]
    Config(String),
}

/// Momentum-smoothed global centroid of one domain's features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidTracker {
    centroid: Tensor,
    momentum: f64,
    initialized: bool,
}

impl CentroidTracker {
    /// Zero centroid of width `dim`; `momentum` must lie in `[0, 1)`.
    pub fn new(dim: usize, momentum: f64) -> Result<Self, DdoError> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(DdoError::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            centroid: Tensor::zeros(&[dim]),
            momentum,
            initialized: false,
        })
    }

    pub fn centroid(&self) -> &Tensor {
        &self.centroid
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// `momentum * global + (1 - momentum) * local`, without storing it.
    pub fn blend(&self, local: &Tensor) -> Result<Tensor, DdoError> {
        if local.shape() != self.centroid.shape() {
            return Err(DdoError::Shape {
                left: self.centroid.shape().to_vec(),
                right: local.shape().to_vec(),
            });
        }
        let mu = self.momentum;
        Ok(self.centroid.zip_map(local, |g, l| mu * g + (1.0 - mu) * l))
    }

    pub fn update_global(&mut self, local: &Tensor) -> Result<(), DdoError> {
        self.centroid = self.blend(local)?;
        self.initialized = true;
        Ok(())
    }

    /// Stores an already blended centroid (the detached value from a
    /// training step).
    pub fn set_blended(&mut self, blended: Tensor) -> Result<(), DdoError> {
        if blended.shape() != self.centroid.shape() {
            return Err(DdoError::Shape {
                left: self.centroid.shape().to_vec(),
                right: blended.shape().to_vec(),
            });
        }
        self.centroid = blended;
        self.initialized = true;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainDistances {
    pub d_inter: f64,
    pub d_intra_source: f64,
    pub d_intra_target: f64,
}

/// Mean over the batch axis of an `N × d` feature matrix.
pub fn local_centroid(features: &Tensor) -> Result<Tensor, DdoError> {
    if features.rank() != 2 {
        return Err(DdoError::Shape {
            left: features.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    if features.rows() == 0 {
        return Err(DdoError::EmptyBatch);
    }
    let d = features.cols();
    let mut sum = vec![0.0; d];
    for r in 0..features.rows() {
        for (s, x) in sum.iter_mut().zip(features.row(r)) {
            *s += x;
        }
    }
    let n = features.rows() as f64;
    Ok(Tensor::vector(sum.into_iter().map(|s| s / n).collect()))
}

pub fn inter_domain_distance(c_source: &Tensor, c_target: &Tensor) -> Result<f64, DdoError> {
    if c_source.shape() != c_target.shape() {
        return Err(DdoError::Shape {
            left: c_source.shape().to_vec(),
            right: c_target.shape().to_vec(),
        });
    }
    let diff: Vec<f64> = c_source.data().iter().zip(c_target.data()).map(|(a, b)| a - b).collect();
    Ok(norm(&diff))
}

/// Mean Euclidean distance of each feature row to `centroid`.
pub fn intra_domain_distance(features: &Tensor, centroid: &Tensor) -> Result<f64, DdoError> {
    if features.rank() != 2 || features.cols() != centroid.len() {
        return Err(DdoError::Shape {
            left: features.shape().to_vec(),
            right: centroid.shape().to_vec(),
        });
    }
    if features.rows() == 0 {
        return Err(DdoError::EmptyBatch);
    }
    let total: f64 = (0..features.rows())
        .map(|r| {
            let diff: Vec<f64> = features.row(r).iter().zip(centroid.data()).map(|(a, b)| a - b).collect();
            norm(&diff)
        })
        .sum();
    Ok(total / features.rows() as f64)
}

/// `(total_epochs - epoch) / total_epochs` for a zero-based adaptation
/// epoch, so the last epoch gets exactly `1 / total_epochs`.
pub fn intra_weight(epoch: usize, total_epochs: usize) -> Result<f64, DdoError> {
    if epoch >= total_epochs {
        return Err(DdoError::Config(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    Ok((total_epochs - epoch) as f64 / total_epochs as f64)
}

pub fn domain_alignment_loss(d: &DomainDistances, w_intra: f64) -> f64 {
    d.d_inter + (-(d.d_intra_source + d.d_intra_target)).exp() * w_intra
}

/// Node handles produced by [`alignment_loss_graph`].
#[derive(Clone, Copy, Debug)]
pub struct AlignmentNodes {
    pub loss: NodeId,
    pub centroid_source: NodeId,
    pub centroid_target: NodeId,
    pub d_inter: NodeId,
    pub d_intra_source: NodeId,
    pub d_intra_target: NodeId,
}

/// Differentiable alignment loss for one joint batch.
///
/// Each domain's centroid is `mu * previous_global + (1 - mu) * batch_mean`
/// where the previous global centroid enters as a constant, so gradients
/// reach the batch features only through the batch mean term and through
/// the intra-domain distances.
pub fn alignment_loss_graph(
    graph: &mut Graph,
    source_features: NodeId,
    target_features: NodeId,
    source_tracker: &CentroidTracker,
    target_tracker: &CentroidTracker,
    w_intra: f64,
) -> AlignmentNodes {
    let blended = |graph: &mut Graph, feats: NodeId, tracker: &CentroidTracker| {
        let mu = tracker.momentum();
        let local = graph.mean_rows(feats);
        let fresh = graph.scale(local, 1.0 - mu);
        let prior = graph.constant(tracker.centroid().map(|v| mu * v));
        graph.add(prior, fresh)
    };
    let cs = blended(graph, source_features, source_tracker);
    let ct = blended(graph, target_features, target_tracker);
    let gap = graph.sub(cs, ct);
    let d_inter = graph.l2_norm(gap);
    let intra = |graph: &mut Graph, feats: NodeId, c: NodeId| {
        let centred = graph.sub_row(feats, c);
        let dists = graph.row_norms(centred);
        graph.mean(dists)
    };
    let ds = intra(graph, source_features, cs);
    let dt = intra(graph, target_features, ct);
    let spread = graph.add(ds, dt);
    let neg = graph.neg(spread);
    let decay = graph.exp(neg);
    let weighted = graph.scale(decay, w_intra);
    let loss = graph.add(d_inter, weighted);
    AlignmentNodes {
        loss,
        centroid_source: cs,
        centroid_target: ct,
        d_inter,
        d_intra_source: ds,
        d_intra_target: dt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centroid_of_one_sample_is_itself() {
        let f = Tensor::matrix(1, 3, vec![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(local_centroid(&f).unwrap().data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn centroid_is_the_arithmetic_mean() {
        let f = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(local_centroid(&f).unwrap().data(), &[2.0, 3.0]);
        let swapped = Tensor::from_rows(&[[3.0, 4.0], [1.0, 2.0]]).unwrap();
        assert_eq!(local_centroid(&swapped).unwrap(), local_centroid(&f).unwrap());
    }

    #[test]
    fn empty_batch_has_no_centroid() {
        let f = Tensor::matrix(0, 2, vec![]).unwrap();
        assert_eq!(local_centroid(&f), Err(DdoError::EmptyBatch));
        assert_eq!(
            intra_domain_distance(&f, &Tensor::zeros(&[2])),
            Err(DdoError::EmptyBatch)
        );
    }

    #[test]
    fn first_update_from_zero() {
        let mut t = CentroidTracker::new(2, 0.9).unwrap();
        assert!(!t.is_initialized());
        assert_eq!(t.centroid().data(), &[0.0, 0.0]);
        t.update_global(&Tensor::vector(vec![10.0, 10.0])).unwrap();
        assert!(t.is_initialized());
        for v in t.centroid().data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_momentum_copies_local() {
        let mut t = CentroidTracker::new(2, 0.0).unwrap();
        t.update_global(&Tensor::vector(vec![3.0, -7.0])).unwrap();
        assert_eq!(t.centroid().data(), &[3.0, -7.0]);
    }

    #[test]
    fn tracker_rejects_bad_momentum_and_dims() {
        assert!(CentroidTracker::new(2, 1.0).is_err());
        assert!(CentroidTracker::new(2, -0.1).is_err());
        let mut t = CentroidTracker::new(2, 0.5).unwrap();
        assert!(matches!(
            t.update_global(&Tensor::vector(vec![1.0])),
            Err(DdoError::Shape { .. })
        ));
    }

    #[test]
    fn inter_distance_examples() {
        let a = Tensor::vector(vec![0.0, 0.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(inter_domain_distance(&a, &b).unwrap(), 5.0);
        assert_eq!(inter_domain_distance(&b, &b).unwrap(), 0.0);
        assert!(inter_domain_distance(&a, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn intra_distance_examples() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(intra_domain_distance(&f, &Tensor::zeros(&[2])).unwrap(), 1.0);
        let at = Tensor::from_rows(&[[2.0, 5.0], [2.0, 5.0]]).unwrap();
        assert_eq!(intra_domain_distance(&at, &Tensor::vector(vec![2.0, 5.0])).unwrap(), 0.0);
    }

    #[test]
    fn intra_weight_schedule() {
        assert_eq!(intra_weight(0, 100).unwrap(), 1.0);
        assert_eq!(intra_weight(99, 100).unwrap(), 0.01);
        assert_eq!(intra_weight(50, 100).unwrap(), 0.5);
        assert!(intra_weight(100, 100).is_err());
    }

    #[test]
    fn alignment_loss_examples() {
        let d = DomainDistances {
            d_inter: 2.0,
            d_intra_source: 0.0,
            d_intra_target: 0.0,
        };
        assert_eq!(domain_alignment_loss(&d, 1.0), 3.0);
        assert_eq!(domain_alignment_loss(&d, 0.0), 2.0);
        let spread = DomainDistances {
            d_intra_source: 400.0,
            d_intra_target: 400.0,
            ..d
        };
        assert!((domain_alignment_loss(&spread, 1.0) - 2.0).abs() < 1e-300);
    }
}
