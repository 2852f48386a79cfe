//! Built-in verification suite run by `owgds selftest`: gradient checks of
//! every objective term on random instances, plus closed-form oracles for
//! the centroid tracker, the optimizer, AUC and batch splitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{batch_split, JointBatch};
use crate::ddo::{intra_weight, CentroidTracker};
use crate::diffcore::{central_difference, finite_diff_check, Graph, GraphError, NodeId, Tensor};
use crate::harness::{auc, build_objective, HarnessError, ObjectiveNodes, ObjectiveSpec};
use crate::losses::{LossWeights, PriorDistribution, Regularizer};
use crate::model::{Model, ModelSpec};
use crate::optim::{Sgd, SgdConfig};
use crate::scbs::NeighborRule;

/// Objective term selected for a gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Ce,
    Alignment,
    PairSimilarity,
    /// Adversarial domain loss through gradient reversal.
    Adversarial,
    Entropy,
    Kl,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Ce,
        Term::Alignment,
        Term::PairSimilarity,
        Term::Adversarial,
        Term::Entropy,
        Term::Kl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Ce => "l_ce",
            Term::Alignment => "l_dal",
            Term::PairSimilarity => "l_scbs",
            Term::Adversarial => "l_adv",
            Term::Entropy => "r_entropy",
            Term::Kl => "r_kl",
        }
    }
}

/// A random small model, joint batch and objective graph.
pub struct GradInstance {
    pub graph: Graph,
    pub nodes: ObjectiveNodes,
    pub encoder_ids: Vec<NodeId>,
    pub domain_ids: Vec<NodeId>,
    pub param_ids: Vec<NodeId>,
    pub lambda: f64,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

/// Feature width ≤ 8 and joint batch ≤ 16, everything drawn from `seed`.
pub fn grad_instance(seed: u64, regularizer: Regularizer) -> Result<GradInstance, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.random_range(2..=6);
    let feature_dim = rng.random_range(2..=8);
    let spec = ModelSpec::new(
        input_dim,
        vec![rng.random_range(3..=6)],
        feature_dim,
        vec![rng.random_range(2..=5)],
    );
    let model = Model::init(&spec, rng.random())?;
    let b_s = rng.random_range(2..=6);
    let b_t = rng.random_range(2..=16 - b_s);
    let batch = JointBatch {
        source_x: normal_matrix(&mut rng, b_s, input_dim),
        source_labels: (0..b_s).map(|_| rng.random_range(0..2)).collect(),
        source_ids: (0..b_s).map(|i| format!("s{i}")).collect(),
        target_x: normal_matrix(&mut rng, b_t, input_dim),
        target_ids: (0..b_t).map(|i| format!("t{i}")).collect(),
    };
    let mu = rng.random_range(0.0..0.95);
    let mut trackers = (
        CentroidTracker::new(feature_dim, mu)?,
        CentroidTracker::new(feature_dim, mu)?,
    );
    trackers.0.update_global(&Tensor::vector(
        (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect(),
    ))?;
    trackers.1.update_global(&Tensor::vector(
        (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect(),
    ))?;
    let p_real = rng.random_range(0.2..0.8);
    let lambda = rng.random_range(0.25..1.5);
    let objective = ObjectiveSpec {
        etas: LossWeights::default(),
        w_intra: rng.random_range(0.05..=1.0),
        lambda,
        regularizer,
        prior: PriorDistribution::new([p_real, 1.0 - p_real])?,
        neighbor_rule: NeighborRule::NearestOther,
    };
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let nodes = build_objective(
        &mut graph,
        &bound,
        &batch,
        &objective,
        (&trackers.0, &trackers.1),
        &mut rng,
    )?;
    Ok(GradInstance {
        graph,
        nodes,
        encoder_ids: bound.encoder_ids(),
        domain_ids: bound.domain_ids(),
        param_ids: bound.param_ids(),
        lambda,
    })
}

fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, c)| (a - c).abs() / c.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Largest relative error between analytic and central-difference
/// gradients of `term` over all model parameters, or `None` when the
/// instance sits near a non-smooth point and is excluded.
///
/// For the adversarial term the encoder's analytic gradient must equal
/// `-λ` times the numeric one (the reversal), while the domain classifier
/// gradient must match it directly.
pub fn term_gradient_error(inst: &mut GradInstance, term: Term, step: f64) -> Result<Option<f64>, HarnessError> {
    let loss = match term {
        Term::Ce => inst.nodes.ce,
        Term::Alignment => inst.nodes.alignment.loss,
        Term::PairSimilarity => match inst.nodes.scbs {
            Some(n) => n,
            None => return Ok(None),
        },
        Term::Adversarial => inst.nodes.adv,
        Term::Entropy | Term::Kl => inst.nodes.reg,
    };
    if term != Term::Adversarial {
        return match finite_diff_check(&mut inst.graph, loss, step) {
            Ok(e) => Ok(Some(e)),
            // A feature row at exactly zero norm has no defined cosine.
            Err(GraphError::NonSmooth { .. } | GraphError::Domain { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        };
    }
    match crate::diffcore::reject_kinks_near(&mut inst.graph, loss, step * crate::diffcore::KINK_MARGIN_FACTOR) {
        Ok(()) => {}
        Err(GraphError::NonSmooth { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let grads = inst.graph.backward(loss)?;
    let mut worst: f64 = 0.0;
    for &id in &inst.param_ids {
        let numeric = central_difference(&mut inst.graph, loss, id, step)?;
        let analytic = grads.get(id).expect("parameter gradient");
        let expected = if inst.encoder_ids.contains(&id) {
            numeric.map(|v| -inst.lambda * v)
        } else {
            numeric
        };
        worst = worst.max(max_rel_err(analytic, &expected));
    }
    Ok(Some(worst))
}

/// Gradient check of `term` over `count` smooth random instances starting
/// at `first_seed`; returns the worst error seen and the number of
/// excluded instances.
pub fn gradient_suite(term: Term, first_seed: u64, count: usize, step: f64) -> Result<(f64, usize), HarnessError> {
    let reg = if term == Term::Kl { Regularizer::Kl } else { Regularizer::Entropy };
    let (mut worst, mut excluded, mut done) = (0.0f64, 0, 0);
    let mut seed = first_seed;
    while done < count {
        let mut inst = grad_instance(seed, reg)?;
        seed += 1;
        match term_gradient_error(&mut inst, term, step)? {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => excluded += 1,
        }
        if excluded > 10 * count {
            return Err(HarnessError::Config(format!("{}: too many excluded instances", term.name())));
        }
    }
    Ok((worst, excluded))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn brute_force_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += u64::from(si > sj) * 2 + u64::from(si == sj);
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Runs every check; never panics on a failing check.
pub fn run() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for term in Term::ALL {
        let name = format!("gradient {}", term.name());
        out.push(match gradient_suite(term, 1000, 20, 1e-6) {
            Ok((worst, excluded)) => check(
                &name,
                worst <= 1e-4,
                format!("max rel err {worst:.2e} over 20 instances ({excluded} excluded)"),
            ),
            Err(e) => check(&name, false, e.to_string()),
        });
    }

    let mut centroid_ok = true;
    for mu in [0.0, 0.5, 0.9] {
        for k in [1, 5, 20] {
            let c = Tensor::vector(vec![1.5, -2.0, 0.25]);
            let mut t = CentroidTracker::new(3, mu).expect("valid momentum");
            for _ in 0..k {
                t.update_global(&c).expect("same width");
            }
            let f = 1.0 - f64::powi(mu, k);
            centroid_ok &= t
                .centroid()
                .data()
                .iter()
                .zip(c.data())
                .all(|(g, v)| (g - f * v).abs() <= 1e-10);
        }
    }
    out.push(check("centroid closed form", centroid_ok, "mu in {0, .5, .9}, k in {1, 5, 20}".into()));

    let exact = |w: Result<f64, _>, v: f64| w.is_ok_and(|w| w == v);
    let weights_ok = exact(intra_weight(0, 60), 1.0) && exact(intra_weight(59, 60), 1.0 / 60.0);
    out.push(check("intra weight endpoints", weights_ok, "w(0)=1, w(E-1)=1/E".into()));

    let mut theta = Tensor::vector(vec![2.0]);
    let mut opt = Sgd::new(SgdConfig {
        learning_rate: 0.1,
        momentum: 0.9,
        weight_decay: 0.01,
    });
    opt.step(vec![&mut theta], &[&Tensor::vector(vec![6.0])]);
    let sgd_ok = (theta.data()[0] - 1.398).abs() <= 1e-10;
    out.push(check("sgd step", sgd_ok, format!("theta {} (expected 1.398)", theta.data()[0])));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut auc_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(2..=100);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 7.0).collect();
        auc_ok &= auc(&scores, &labels).ok() == Some(brute_force_auc(&scores, &labels));
    }
    out.push(check("auc oracle", auc_ok, "100 tied instances vs pairwise count".into()));

    let split_ok = batch_split(100, 900, 50).map(|p| (p.b_source, p.b_target)).ok() == Some((5, 45))
        && batch_split(1, 10000, 50).map(|p| (p.b_source, p.b_target)).ok() == Some((1, 49));
    out.push(check("batch split", split_ok, "(100, 900, 50) -> (5, 45)".into()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_check_passes() {
        for r in run() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
