//! Training protocol and reporting: supervised source pretraining, joint
//! adaptation on the weighted objective, evaluation, ablations, the
//! target-fraction sweep and embedding export.
//!
//! Adaptation only ever receives an [`UnlabeledSet`] for the target
//! domain. Target ground truth enters through [`EvalSets`], which is read
//! by evaluation alone.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::data::{
    batch_split, generate_benchmark, load_dataset, sample_joint_batch, DataError, Dataset, JointBatch, JointSampler,
    LabeledSet, UnlabeledSet,
};
use crate::ddo::{
    alignment_loss_graph, AlignmentNodes, inter_domain_distance, intra_domain_distance, intra_weight, local_centroid, CentroidTracker,
    DdoError, DomainDistances,
};
use crate::diffcore::{Graph, GraphError, NodeId, Tensor};
use crate::losses::{
    bce_loss_graph, ce_loss_graph, regularizer_graph, total_loss, LossBreakdown, LossError, LossParts, LossWeights,
    PriorDistribution, Regularizer,
};
use crate::model::{fnv1a, grad_reverse, BoundModel, Model, ModelError};
use crate::optim::Sgd;
use crate::scbs::{labeled_pairs, pseudo_pairs, scbs_loss_graph, NeighborRule, PositivePairSet, ScbsError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("AUC undefined: {positives} fake and {negatives} real samples")]
    AucUndefined { positives: usize, negatives: usize },
    #[error("non-finite loss at adaptation epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ddo(#[from] DdoError),
    #[error(transparent)]
    Scbs(#[from] ScbsError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("I/O on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Independent RNG stream for one purpose of one run.
pub fn stream_seed(seed: u64, tag: &str) -> u64 {
    fnv1a(format!("{seed}/{tag}").as_bytes())
}

fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tag))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adapt,
}

/// One per-epoch line of the metrics stream.
///
/// Record `k` describes the model after `k` epochs of its phase, so each
/// phase opens with an epoch-0 record of the starting model that has no
/// batches and zero losses. Losses are means over the epoch's batches. Distances are recomputed on
/// full-dataset features about the full-dataset feature means;
/// `tracker_d_inter` is the distance between the two global centroids as
/// they stand at the end of an adaptation epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub batches: usize,
    pub losses: LossBreakdown,
    pub acc_source: f64,
    pub auc_source: f64,
    pub acc_target: f64,
    pub auc_target: f64,
    pub d_inter: f64,
    pub d_intra_source: f64,
    pub d_intra_target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracker_d_inter: Option<f64>,
    /// Batches whose pair-similarity term was skipped.
    pub scbs_skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// Labeled data used only for reporting.
#[derive(Clone, Copy, Debug)]
pub struct EvalSets<'a> {
    pub source: &'a LabeledSet,
    pub target: &'a LabeledSet,
}

impl<'a> EvalSets<'a> {
    pub fn of(ds: &'a Dataset) -> Self {
        Self {
            source: &ds.source,
            target: &ds.target,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub acc: f64,
    pub auc: f64,
}

/// Probability that a random fake (label 1) scores above a random real
/// (label 0), ties counting one half. Rank-based, `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64, HarnessError> {
    if scores.len() != labels.len() {
        return Err(HarnessError::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(HarnessError::AucUndefined { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled midranks keep everything integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u64;
        let pos_in_block = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += twice_mid * pos_in_block;
        i = j;
    }
    let p = positives as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * negatives as u64) as f64)
}

/// Accuracy under argmax and AUC of the fake-class probability.
pub fn evaluate(model: &Model, set: &LabeledSet) -> Result<EvalResult, HarnessError> {
    let probs = model.predict(&set.x)?;
    let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.row(i)[1]).collect();
    let correct = (0..probs.rows())
        .filter(|&i| {
            let p = probs.row(i);
            usize::from(p[1] > p[0]) == set.labels[i]
        })
        .count();
    Ok(EvalResult {
        acc: correct as f64 / set.len() as f64,
        auc: auc(&scores, &set.labels)?,
    })
}

/// Entropy (nats) of the mean predicted class distribution over `x`.
pub fn mean_prediction_entropy(model: &Model, x: &Tensor) -> Result<f64, HarnessError> {
    let probs = model.predict(x)?;
    let mean = local_centroid(&probs)?;
    Ok(-mean.data().iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
}

/// Full-dataset distances about the given centroids, or about the
/// feature means when `centroids` is `None`.
pub fn dataset_distances(
    model: &Model,
    source_x: &Tensor,
    target_x: &Tensor,
    centroids: Option<(&Tensor, &Tensor)>,
) -> Result<DomainDistances, HarnessError> {
    let fs = model.encode(source_x)?;
    let ft = model.encode(target_x)?;
    let (cs, ct) = match centroids {
        Some((a, b)) => (a.clone(), b.clone()),
        None => (local_centroid(&fs)?, local_centroid(&ft)?),
    };
    Ok(DomainDistances {
        d_inter: inter_domain_distance(&cs, &ct)?,
        d_intra_source: intra_domain_distance(&fs, &cs)?,
        d_intra_target: intra_domain_distance(&ft, &ct)?,
    })
}

/// Loads `data_path` or generates the configured benchmark.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let records = match &cfg.data_path {
        Some(p) => load_dataset(p)?.records,
        None => generate_benchmark(&cfg.benchmark)?,
    };
    Ok(Dataset::from_records(&records)?)
}

fn check_model(model: &Model, ds_dim: usize) -> Result<(), HarnessError> {
    if model.input_dim() != ds_dim {
        return Err(HarnessError::Config(format!(
            "checkpoint expects {} input features, dataset has {ds_dim}",
            model.input_dim()
        )));
    }
    Ok(())
}

/// Seeded initialization for a run.
pub fn init_model(cfg: &ExperimentConfig, input_dim: usize) -> Result<Model, HarnessError> {
    Ok(Model::init(&cfg.model_spec(input_dim), stream_seed(cfg.seed, "init"))?)
}

#[allow(clippy::too_many_arguments)]
fn report(
    phase: Phase,
    epoch: usize,
    batches: usize,
    losses: LossBreakdown,
    model: &Model,
    source_x: &Tensor,
    target_x: &Tensor,
    centroids: Option<(&Tensor, &Tensor)>,
    eval: Option<EvalSets<'_>>,
    scbs_skipped: usize,
    wall: Option<f64>,
) -> Result<MetricsRecord, HarnessError> {
    let d = dataset_distances(model, source_x, target_x, None)?;
    let tracker_d_inter = centroids.map(|(a, b)| inter_domain_distance(a, b)).transpose()?;
    let (s, t) = match eval {
        Some(e) => (evaluate(model, e.source)?, evaluate(model, e.target)?),
        None => {
            let nan = EvalResult {
                acc: f64::NAN,
                auc: f64::NAN,
            };
            (nan, nan)
        }
    };
    Ok(MetricsRecord {
        phase,
        epoch,
        batches,
        losses,
        acc_source: s.acc,
        auc_source: s.auc,
        acc_target: t.acc,
        auc_target: t.auc,
        d_inter: d.d_inter,
        d_intra_source: d.d_intra_source,
        d_intra_target: d.d_intra_target,
        tracker_d_inter,
        scbs_skipped,
        wall_time: wall,
    })
}

fn apply_grads(model: &mut Model, opt: &mut Sgd, graph: &mut Graph, ids: &[NodeId], loss: NodeId) -> Result<(), HarnessError> {
    let grads = graph.backward(loss)?;
    let g: Vec<&Tensor> = ids.iter().map(|id| grads.get(*id).expect("every parameter has a gradient")).collect();
    opt.step(model.params_mut(), &g);
    Ok(())
}

fn mean_breakdown(sum: &LossBreakdown, n: usize, w: LossWeights) -> LossBreakdown {
    let k = n.max(1) as f64;
    LossBreakdown {
        l_ce: sum.l_ce / k,
        l_dal: sum.l_dal / k,
        l_scbs: sum.l_scbs / k,
        l_adv: sum.l_adv / k,
        r: sum.r / k,
        total: sum.total / k,
        eta1: w.eta1,
        eta2: w.eta2,
        eta3: w.eta3,
        eta4: w.eta4,
    }
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.l_ce += b.l_ce;
    acc.l_dal += b.l_dal;
    acc.l_scbs += b.l_scbs;
    acc.l_adv += b.l_adv;
    acc.r += b.r;
    acc.total += b.total;
}

/// Model and per-epoch records of one training phase.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
}

/// Supervised cross-entropy training on the source domain.
///
/// `target_x` only feeds the reported distances.
pub fn pretrain(
    cfg: &ExperimentConfig,
    start: Model,
    source: &LabeledSet,
    target_x: &Tensor,
    eval: Option<EvalSets<'_>>,
) -> Result<TrainOutcome, HarnessError> {
    check_model(&start, source.x.cols())?;
    if source.is_empty() {
        return Err(HarnessError::Config("empty source domain".into()));
    }
    let clock = Instant::now();
    let mut model = start;
    let mut opt = Sgd::new(cfg.optimizer);
    let mut rng = stream(cfg.seed, "pretrain");
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut records = Vec::with_capacity(cfg.pretrain_epochs + 1);
    let zero = mean_breakdown(&LossBreakdown::default(), 0, LossWeights::ZERO);
    let wall = cfg.log_wall_time.then(|| clock.elapsed().as_secs_f64());
    records.push(report(Phase::Pretrain, 0, 0, zero, &model, &source.x, target_x, None, eval, 0, wall)?);
    for epoch in 0..cfg.pretrain_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        for rows in order.chunks(cfg.pretrain_batch) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let x = g.constant(source.x.select_rows(rows));
            let labels: Vec<usize> = rows.iter().map(|&r| source.labels[r]).collect();
            let f = bound.encode(&mut g, x);
            let logits = bound.class_logits(&mut g, f);
            let ce = ce_loss_graph(&mut g, logits, &labels);
            let value = g.forward(ce)?.item();
            if !value.is_finite() {
                return Err(HarnessError::Loss(LossError::NonFinite("l_ce", value)));
            }
            sum.l_ce += value;
            sum.total += value;
            batches += 1;
            apply_grads(&mut model, &mut opt, &mut g, &bound.param_ids(), ce)?;
        }
        let losses = mean_breakdown(&sum, batches, LossWeights::ZERO);
        let wall = cfg.log_wall_time.then(|| clock.elapsed().as_secs_f64());
        records.push(report(Phase::Pretrain, epoch + 1, batches, losses, &model, &source.x, target_x, None, eval, 0, wall)?);
    }
    Ok(TrainOutcome { model, records })
}

/// Which terms the adaptation step builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Every term is evaluated and reported; terms with zero weight are
    /// left out of the differentiated total.
    Full,
    /// Source cross-entropy only, on the same joint batches.
    CeOnly,
}

/// Settings of the weighted objective for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub etas: LossWeights,
    pub w_intra: f64,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub prior: PriorDistribution,
    pub neighbor_rule: NeighborRule,
}

/// Node handles of every objective term built by [`build_objective`].
#[derive(Clone, Debug)]
pub struct ObjectiveNodes {
    pub source_features: NodeId,
    pub target_features: NodeId,
    pub ce: NodeId,
    pub alignment: AlignmentNodes,
    /// `None` when pseudo-pairs could not be mined (fewer than two target
    /// rows or a zero feature).
    pub scbs: Option<NodeId>,
    pub adv: NodeId,
    pub reg: NodeId,
    /// Sum of the terms with nonzero weight.
    pub total: NodeId,
}

/// Builds the full weighted objective for one joint batch on `graph`.
///
/// Pair mining reads the current target features, so the graph's
/// parameters must already hold their values.
pub fn build_objective<R: Rng + ?Sized>(
    g: &mut Graph,
    bound: &BoundModel,
    batch: &JointBatch,
    spec: &ObjectiveSpec,
    trackers: (&CentroidTracker, &CentroidTracker),
    pair_rng: &mut R,
) -> Result<ObjectiveNodes, HarnessError> {
    let xs = g.constant(batch.source_x.clone());
    let xt = g.constant(batch.target_x.clone());
    let fs = bound.encode(g, xs);
    let ft = bound.encode(g, xt);
    let logits_s = bound.class_logits(g, fs);
    let ce = ce_loss_graph(g, logits_s, &batch.source_labels);
    let alignment = alignment_loss_graph(g, fs, ft, trackers.0, trackers.1, spec.w_intra);

    let source_pairs = labeled_pairs(&batch.source_labels, pair_rng);
    let target_feats = g.forward(ft)?.clone();
    let b_s = batch.source_labels.len();
    let f_all = g.concat_rows(fs, ft);
    let scbs = match pseudo_pairs(&target_feats, spec.neighbor_rule) {
        Ok(target_pairs) => {
            let pooled = PositivePairSet::pool(&source_pairs, &target_pairs, b_s);
            Some(scbs_loss_graph(g, f_all, &pooled))
        }
        Err(e @ (ScbsError::InsufficientBatch(_) | ScbsError::DegenerateFeature(_))) => {
            log::debug!("pair-similarity term skipped: {e}");
            None
        }
        Err(e) => return Err(e.into()),
    };

    let reversed = grad_reverse(g, f_all, spec.lambda)?;
    let dom_logits = bound.domain_logit(g, reversed);
    let n_t = batch.target_x.rows();
    let mut dom_labels = vec![0.0; b_s];
    dom_labels.extend(std::iter::repeat_n(1.0, n_t));
    let adv = bce_loss_graph(g, dom_logits, &Tensor::new(vec![b_s + n_t, 1], dom_labels)?);

    let logits_all = bound.class_logits(g, f_all);
    let reg = regularizer_graph(g, spec.regularizer, logits_all, &spec.prior);

    let w = spec.etas;
    let mut total = ce;
    for (node, eta) in [
        (Some(alignment.loss), w.eta1),
        (scbs, w.eta2),
        (Some(adv), w.eta3),
        (Some(reg), w.eta4),
    ] {
        if let Some(node) = node {
            if eta != 0.0 {
                let weighted = g.scale(node, eta);
                total = g.add(total, weighted);
            }
        }
    }
    Ok(ObjectiveNodes {
        source_features: fs,
        target_features: ft,
        ce,
        alignment,
        scbs,
        adv,
        reg,
        total,
    })
}

struct StepOutput {
    breakdown: LossBreakdown,
    centroids: Option<(Tensor, Tensor)>,
    scbs_skipped: bool,
}

fn adapt_step(
    spec: &ObjectiveSpec,
    objective: Objective,
    trackers: &(CentroidTracker, CentroidTracker),
    model: &mut Model,
    opt: &mut Sgd,
    batch: &JointBatch,
    pair_rng: &mut ChaCha8Rng,
) -> Result<StepOutput, HarnessError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let ids = bound.param_ids();

    if objective == Objective::CeOnly {
        let xs = g.constant(batch.source_x.clone());
        let fs = bound.encode(&mut g, xs);
        let logits_s = bound.class_logits(&mut g, fs);
        let ce = ce_loss_graph(&mut g, logits_s, &batch.source_labels);
        let l_ce = g.forward(ce)?.item();
        let breakdown = total_loss(
            LossParts {
                l_ce,
                ..LossParts::default()
            },
            LossWeights::ZERO,
        )?;
        apply_grads(model, opt, &mut g, &ids, ce)?;
        return Ok(StepOutput {
            breakdown,
            centroids: None,
            scbs_skipped: false,
        });
    }

    let nodes = build_objective(&mut g, &bound, batch, spec, (&trackers.0, &trackers.1), pair_rng)?;
    let mut value = |id: NodeId| -> Result<f64, HarnessError> { Ok(g.forward(id)?.item()) };
    let parts = LossParts {
        l_ce: value(nodes.ce)?,
        l_dal: value(nodes.alignment.loss)?,
        l_scbs: match nodes.scbs {
            Some(id) => value(id)?,
            None => 0.0,
        },
        l_adv: value(nodes.adv)?,
        r: value(nodes.reg)?,
    };
    let breakdown = total_loss(parts, spec.etas)?;
    let cs = g.forward(nodes.alignment.centroid_source)?.clone();
    let ct = g.forward(nodes.alignment.centroid_target)?.clone();
    apply_grads(model, opt, &mut g, &ids, nodes.total)?;
    Ok(StepOutput {
        breakdown,
        centroids: Some((cs, ct)),
        scbs_skipped: nodes.scbs.is_none(),
    })
}

/// Adaptation result: final model, per-epoch records and trackers.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub trackers: (CentroidTracker, CentroidTracker),
}

/// Joint training on labeled source and unlabeled target batches.
pub fn adapt(
    cfg: &ExperimentConfig,
    start: Model,
    source: &LabeledSet,
    target: &UnlabeledSet,
    eval: Option<EvalSets<'_>>,
    objective: Objective,
) -> Result<AdaptOutcome, HarnessError> {
    check_model(&start, source.x.cols())?;
    cfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let clock = Instant::now();
    let plan = batch_split(source.len(), target.len(), cfg.total_batch)?;
    let mut sampler = JointSampler::new(source.len(), target.len(), plan)?;
    let mut batch_rng = stream(cfg.seed, "adapt-batches");
    let mut pair_rng = stream(cfg.seed, "adapt-pairs");
    let dim = start.feature_dim();
    let mut trackers = (CentroidTracker::new(dim, cfg.mu)?, CentroidTracker::new(dim, cfg.mu)?);
    let mut model = start;
    let mut opt = Sgd::new(cfg.optimizer);
    let weights = if objective == Objective::CeOnly {
        LossWeights::ZERO
    } else {
        cfg.etas
    };
    let mut records = Vec::with_capacity(cfg.adapt_epochs + 1);
    let zero = mean_breakdown(&LossBreakdown::default(), 0, weights);
    let wall = cfg.log_wall_time.then(|| clock.elapsed().as_secs_f64());
    records.push(report(
        Phase::Adapt,
        0,
        0,
        zero,
        &model,
        &source.x,
        &target.x,
        None,
        eval,
        0,
        wall,
    )?);
    for epoch in 0..cfg.adapt_epochs {
        let w_intra = intra_weight(epoch, cfg.adapt_epochs)?;
        let lambda = cfg.lambda.value(epoch, cfg.adapt_epochs);
        sampler.start_epoch(&mut batch_rng);
        let mut sum = LossBreakdown::default();
        let (mut batches, mut skipped) = (0, 0);
        while let Some(batch) = sample_joint_batch(source, target, &mut sampler) {
            let spec = ObjectiveSpec {
                etas: cfg.etas,
                w_intra,
                lambda,
                regularizer: cfg.regularizer,
                prior: cfg.prior.clone(),
                neighbor_rule: cfg.neighbor_rule,
            };
            let out = adapt_step(&spec, objective, &trackers, &mut model, &mut opt, &batch, &mut pair_rng)?;
            if !out.breakdown.total.is_finite() {
                return Err(HarnessError::Diverged { epoch });
            }
            if let Some((cs, ct)) = out.centroids {
                trackers.0.set_blended(cs)?;
                trackers.1.set_blended(ct)?;
            }
            accumulate(&mut sum, &out.breakdown);
            batches += 1;
            skipped += usize::from(out.scbs_skipped);
        }
        let losses = mean_breakdown(&sum, batches, weights);
        let wall = cfg.log_wall_time.then(|| clock.elapsed().as_secs_f64());
        let centroids = (objective == Objective::Full).then(|| (trackers.0.centroid(), trackers.1.centroid()));
        records.push(report(
            Phase::Adapt,
            epoch + 1,
            batches,
            losses,
            &model,
            &source.x,
            &target.x,
            centroids,
            eval,
            skipped,
            wall,
        )?);
    }
    Ok(AdaptOutcome {
        model,
        records,
        trackers,
    })
}

/// Pretrain-then-adapt on one dataset.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub pretrained: Model,
    pub adapted: Model,
    pub pretrain_records: Vec<MetricsRecord>,
    pub adapt_records: Vec<MetricsRecord>,
}

pub fn pretrain_run(cfg: &ExperimentConfig, ds: &Dataset) -> Result<TrainOutcome, HarnessError> {
    let init = init_model(cfg, ds.feature_dim)?;
    pretrain(cfg, init, &ds.source, &ds.target.x, Some(EvalSets::of(ds)))
}

pub fn adapt_run(
    cfg: &ExperimentConfig,
    start: &Model,
    ds: &Dataset,
    objective: Objective,
) -> Result<AdaptOutcome, HarnessError> {
    adapt(
        cfg,
        start.clone(),
        &ds.source,
        &ds.target.without_labels(),
        Some(EvalSets::of(ds)),
        objective,
    )
}

pub fn full_run(cfg: &ExperimentConfig, ds: &Dataset, objective: Objective) -> Result<RunOutcome, HarnessError> {
    let pre = pretrain_run(cfg, ds)?;
    let ad = adapt_run(cfg, &pre.model, ds, objective)?;
    Ok(RunOutcome {
        pretrained: pre.model,
        adapted: ad.model,
        pretrain_records: pre.records,
        adapt_records: ad.records,
    })
}

/// Tolerance (accuracy points) for the ablation ordering check.
pub const ABLATION_TOLERANCE_POINTS: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub acc_target: f64,
    pub auc_target: f64,
    pub acc_source: f64,
    pub auc_source: f64,
    /// Target accuracy minus the full variant's, in points.
    pub delta_points: f64,
    pub pretrain_checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// The full variant is within tolerance of every other row.
    pub fn full_is_best(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.delta_points <= ABLATION_TOLERANCE_POINTS)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# full must reach every variant's target accuracy within {ABLATION_TOLERANCE_POINTS} points\n\
             variant,acc_target,auc_target,acc_source,auc_source,delta_points,pretrain_checkpoint\n"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:+.2},{}\n",
                r.variant, r.acc_target, r.auc_target, r.acc_source, r.auc_source, r.delta_points, r.pretrain_checkpoint
            ));
        }
        s
    }
}

/// Variants of the ablation: `(name, etas)`.
pub fn ablation_variants(etas: LossWeights) -> Vec<(&'static str, LossWeights)> {
    vec![
        ("full", etas),
        ("-ddo", LossWeights { eta1: 0.0, ..etas }),
        ("-scbs", LossWeights { eta2: 0.0, ..etas }),
        ("-adc", LossWeights { eta3: 0.0, ..etas }),
    ]
}

/// Runs the full objective and each single-term removal from one shared
/// pretrained checkpoint.
pub fn run_ablation(cfg: &ExperimentConfig, ds: &Dataset, pretrained: &Model) -> Result<AblationTable, HarnessError> {
    let hash = format!("{:016x}", pretrained.fingerprint());
    let mut rows = Vec::new();
    for (name, etas) in ablation_variants(cfg.etas) {
        let variant_cfg = ExperimentConfig { etas, ..cfg.clone() };
        let out = adapt_run(&variant_cfg, pretrained, ds, Objective::Full)?;
        let last = out.records.last().ok_or_else(|| HarnessError::Config("adapt_epochs is 0".into()))?;
        rows.push(AblationRow {
            variant: name.to_string(),
            acc_target: last.acc_target,
            auc_target: last.auc_target,
            acc_source: last.acc_source,
            auc_source: last.auc_source,
            delta_points: 0.0,
            pretrain_checkpoint: hash.clone(),
        });
    }
    let full = rows[0].acc_target;
    for r in &mut rows {
        r.delta_points = 100.0 * (r.acc_target - full);
    }
    Ok(AblationTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub n_target_used: usize,
    pub acc_target: f64,
    pub auc_target: f64,
}

/// Adapts on seeded random subsets of the target domain. Accuracy is
/// always measured on the whole target domain.
pub fn data_efficiency_sweep(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    pretrained: &Model,
    fractions: &[f64],
) -> Result<Vec<SweepRow>, HarnessError> {
    let mut rows = Vec::new();
    for &fraction in fractions {
        let mut rng = stream(cfg.seed, &format!("subsample/{fraction}"));
        let sub = ds.subsample_target(fraction, &mut rng)?;
        let out = adapt(
            cfg,
            pretrained.clone(),
            &sub.source,
            &sub.target.without_labels(),
            Some(EvalSets::of(ds)),
            Objective::Full,
        )?;
        let last = out.records.last().ok_or_else(|| HarnessError::Config("adapt_epochs is 0".into()))?;
        rows.push(SweepRow {
            fraction,
            n_target_used: sub.target.len(),
            acc_target: last.acc_target,
            auc_target: last.auc_target,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("fraction,n_target_used,acc_target,auc_target\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.4},{:.4}\n", r.fraction, r.n_target_used, r.acc_target, r.auc_target));
    }
    s
}

/// Writes `id,domain,true_label,f0..` rows of encoder features.
pub fn dump_embeddings(model: &Model, ds: &Dataset, path: &Path) -> Result<usize, HarnessError> {
    check_model(model, ds.feature_dim)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let k = model.feature_dim();
    let mut header = vec!["id".to_string(), "domain".into(), "true_label".into()];
    header.extend((0..k).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    let mut n = 0;
    for (domain, set) in [("source", &ds.source), ("target", &ds.target)] {
        let feats = model.encode(&set.x)?;
        for (i, id) in set.ids.iter().enumerate() {
            let label = if set.labels[i] == 1 { "fake" } else { "real" };
            let mut row = vec![id.clone(), domain.to_string(), label.to_string()];
            row.extend(feats.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| io_err(path, e))?;
            n += 1;
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(n)
}

/// One JSON object per line.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| io_err(path, e))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io_err(path, e)))
        .collect()
}

/// Summary CSV: the last record of each phase.
pub fn write_summary(path: &Path, records: &[MetricsRecord]) -> Result<(), HarnessError> {
    let mut out = Vec::new();
    writeln!(
        out,
        "phase,epochs,l_total,acc_source,auc_source,acc_target,auc_target,d_inter,d_intra_source,d_intra_target"
    )
    .map_err(|e| io_err(path, e))?;
    for phase in [Phase::Pretrain, Phase::Adapt] {
        let of_phase: Vec<&MetricsRecord> = records.iter().filter(|r| r.phase == phase).collect();
        if let Some(r) = of_phase.last() {
            let name = if phase == Phase::Pretrain { "pretrain" } else { "adapt" };
            writeln!(
                out,
                "{name},{},{:.6},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6}",
                of_phase.len(),
                r.losses.total,
                r.acc_source,
                r.auc_source,
                r.acc_target,
                r.auc_target,
                r.d_inter,
                r.d_intra_source,
                r.d_intra_target
            )
            .map_err(|e| io_err(path, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}
