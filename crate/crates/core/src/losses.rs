//! Supervised cross-entropy, adversarial domain BCE, the prediction
//! regularizer and the weighted total objective.
//!
//! The regularizer comes in two forms over the batch-mean prediction `m`:
//! the entropy `H(m)` (default) and `KL(m ‖ prior)`. Under a uniform prior
//! `H(m) = ln 2 - KL(m ‖ uniform)`. A negative weight on the entropy form
//! pushes predictions apart; on the KL form it pushes them together.
//!
//! Each term has a direct evaluator on plain values and a graph builder
//! used during training. The graph builders work from logits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{softplus, Graph, NodeId, Tensor};
use crate::model::NUM_CLASSES;

/// Tolerance for row-stochastic checks.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("label {0} at position {1} is not 0 or 1")]
    Label(f64, usize),
    #[error("row {0} is not a probability distribution")]
    Probability(usize),
    #[error("prior assigns 0 to class {0} while the mean prediction gives it {1}; KL diverges")]
    Divergence(usize, f64),
    #[error("invalid prior {0:?}")]
    Prior(Vec<f64>),
    #[error("loss term {0} is not finite ({1})")]
    NonFinite(&'static str, f64),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty batch")]
    Empty,
}

/// Class prior `P(y)` over real/fake.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorDistribution {
    p: [f64; NUM_CLASSES],
}

impl PriorDistribution {
    pub fn new(p: [f64; NUM_CLASSES]) -> Result<Self, LossError> {
        let total: f64 = p.iter().sum();
        if p.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(LossError::Prior(p.to_vec()));
        }
        Ok(Self { p })
    }

    pub fn uniform() -> Self {
        Self { p: [0.5, 0.5] }
    }

    pub fn probs(&self) -> &[f64; NUM_CLASSES] {
        &self.p
    }
}

impl Default for PriorDistribution {
    fn default() -> Self {
        Self::uniform()
    }
}

/// Loss weights `η1..η4` for alignment, pair similarity, adversarial and
/// prior terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta1: 0.1,
            eta2: 1.0,
            eta3: 1.0,
            eta4: -1.0,
        }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self {
        eta1: 0.0,
        eta2: 0.0,
        eta3: 0.0,
        eta4: 0.0,
    };
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_ce: f64,
    pub l_dal: f64,
    pub l_scbs: f64,
    pub l_adv: f64,
    pub r: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_dal: f64,
    pub l_scbs: f64,
    pub l_adv: f64,
    pub r: f64,
    pub total: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
}

pub fn total_loss(parts: LossParts, w: LossWeights) -> Result<LossBreakdown, LossError> {
    for (name, v) in [
        ("l_ce", parts.l_ce),
        ("l_dal", parts.l_dal),
        ("l_scbs", parts.l_scbs),
        ("l_adv", parts.l_adv),
        ("r", parts.r),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name, v));
        }
    }
    let total = parts.l_ce
        + w.eta1 * parts.l_dal
        + w.eta2 * parts.l_scbs
        + w.eta3 * parts.l_adv
        + w.eta4 * parts.r;
    Ok(LossBreakdown {
        l_ce: parts.l_ce,
        l_dal: parts.l_dal,
        l_scbs: parts.l_scbs,
        l_adv: parts.l_adv,
        r: parts.r,
        total,
        eta1: w.eta1,
        eta2: w.eta2,
        eta3: w.eta3,
        eta4: w.eta4,
    })
}

fn check_binary(labels: &[f64]) -> Result<(), LossError> {
    match labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        Some(i) => Err(LossError::Label(labels[i], i)),
        None => Ok(()),
    }
}

/// Mean BCE of `sigmoid(logit)` against 0/1 domain labels, computed as
/// `softplus(z) - y z`.
pub fn adversarial_domain_loss(logits: &[f64], domain_labels: &[f64]) -> Result<f64, LossError> {
    if logits.len() != domain_labels.len() {
        return Err(LossError::Length(logits.len(), domain_labels.len()));
    }
    if logits.is_empty() {
        return Err(LossError::Empty);
    }
    check_binary(domain_labels)?;
    let total: f64 = logits
        .iter()
        .zip(domain_labels)
        .map(|(&z, &y)| softplus(z) - y * z)
        .sum();
    Ok(total / logits.len() as f64)
}

fn check_stochastic(probs: &Tensor) -> Result<(), LossError> {
    if probs.rank() != 2 || probs.cols() != NUM_CLASSES {
        return Err(LossError::Length(probs.cols(), NUM_CLASSES));
    }
    if probs.rows() == 0 {
        return Err(LossError::Empty);
    }
    for r in 0..probs.rows() {
        let row = probs.row(r);
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (row.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL
        {
            return Err(LossError::Probability(r));
        }
    }
    Ok(())
}

/// Mean of `-ln p_i[label_i]`.
pub fn supervised_ce_loss(probs: &Tensor, labels: &[usize]) -> Result<f64, LossError> {
    check_stochastic(probs)?;
    if probs.rows() != labels.len() {
        return Err(LossError::Length(probs.rows(), labels.len()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= NUM_CLASSES {
            return Err(LossError::Label(y as f64, i));
        }
        total -= probs.row(i)[y].ln();
    }
    Ok(total / labels.len() as f64)
}

/// `KL(mean prediction ‖ prior)` with `0 ln 0 = 0`.
pub fn kl_regularizer(probs: &Tensor, prior: &PriorDistribution) -> Result<f64, LossError> {
    check_stochastic(probs)?;
    let n = probs.rows() as f64;
    let mut kl = 0.0;
    for c in 0..NUM_CLASSES {
        let mean = (0..probs.rows()).map(|r| probs.row(r)[c]).sum::<f64>() / n;
        let q = prior.p[c];
        if mean == 0.0 {
            continue;
        }
        if q == 0.0 {
            return Err(LossError::Divergence(c, mean));
        }
        kl += mean * (mean / q).ln();
    }
    Ok(kl)
}

/// Entropy (nats) of the mean prediction, with `0 ln 0 = 0`.
pub fn entropy_regularizer(probs: &Tensor) -> Result<f64, LossError> {
    check_stochastic(probs)?;
    let n = probs.rows() as f64;
    let mut h = 0.0;
    for c in 0..NUM_CLASSES {
        let mean = (0..probs.rows()).map(|r| probs.row(r)[c]).sum::<f64>() / n;
        if mean > 0.0 {
            h -= mean * mean.ln();
        }
    }
    Ok(h)
}

/// Which quantity of the batch-mean prediction the regularizer measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    /// `H(mean prediction)`; does not use the prior.
    #[default]
    Entropy,
    /// `KL(mean prediction ‖ prior)`.
    Kl,
}

/// Regularizer value on plain probabilities.
pub fn regularizer(form: Regularizer, probs: &Tensor, prior: &PriorDistribution) -> Result<f64, LossError> {
    match form {
        Regularizer::Entropy => entropy_regularizer(probs),
        Regularizer::Kl => kl_regularizer(probs, prior),
    }
}

/// Mean cross-entropy of `B × 2` logits against class labels.
pub fn ce_loss_graph(graph: &mut Graph, logits: NodeId, labels: &[usize]) -> NodeId {
    let mut onehot = Tensor::zeros(&[labels.len(), NUM_CLASSES]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * NUM_CLASSES + y] = -1.0 / labels.len() as f64;
    }
    let lsm = graph.log_softmax(logits);
    let w = graph.constant(onehot);
    let picked = graph.mul(lsm, w);
    graph.sum(picked)
}

/// Mean BCE of `B × 1` (or `B`) logits against 0/1 labels.
pub fn bce_loss_graph(graph: &mut Graph, logits: NodeId, labels: &Tensor) -> NodeId {
    let y = graph.constant(labels.clone());
    let sp = graph.softplus(logits);
    let yz = graph.mul(y, logits);
    let per = graph.sub(sp, yz);
    graph.mean(per)
}

/// `KL(mean softmax(logits) ‖ prior)`. Softmax outputs are strictly
/// positive, so the logarithms stay finite.
pub fn kl_loss_graph(graph: &mut Graph, logits: NodeId, prior: &PriorDistribution) -> NodeId {
    let p = graph.softmax(logits);
    let mean = graph.mean_rows(p);
    let log_mean = graph.log(mean);
    // log of a zero prior entry would be -inf; such priors only make sense
    // when the matching mean is zero, which softmax never produces
    let log_prior = graph.constant(Tensor::vector(prior.p.iter().map(|q| q.ln()).collect()));
    let ratio = graph.sub(log_mean, log_prior);
    graph.dot(mean, ratio)
}

/// `H(mean softmax(logits))`.
pub fn entropy_loss_graph(graph: &mut Graph, logits: NodeId) -> NodeId {
    let p = graph.softmax(logits);
    let mean = graph.mean_rows(p);
    let log_mean = graph.log(mean);
    let plogp = graph.dot(mean, log_mean);
    graph.neg(plogp)
}

pub fn regularizer_graph(graph: &mut Graph, form: Regularizer, logits: NodeId, prior: &PriorDistribution) -> NodeId {
    match form {
        Regularizer::Entropy => entropy_loss_graph(graph, logits),
        Regularizer::Kl => kl_loss_graph(graph, logits, prior),
    }
}
