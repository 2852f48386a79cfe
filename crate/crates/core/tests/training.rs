use owgds::config::ExperimentConfig;
use owgds::data::{Dataset, Domain, Label, SampleRecord};
use owgds::harness::{
    adapt_run, data_efficiency_sweep, dump_embeddings, init_model, load_data, mean_prediction_entropy, pretrain,
    pretrain_run, EvalSets, MetricsRecord, Objective, Phase,
};
use owgds::losses::LossWeights;
use owgds::model::Model;

fn quick() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&["pretrain_epochs=10", "adapt_epochs=8"]).unwrap();
    cfg
}

fn assert_traces_close(a: &[MetricsRecord], b: &[MetricsRecord], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        for (u, v) in [
            (x.losses.l_ce, y.losses.l_ce),
            (x.losses.total, y.losses.total),
            (x.acc_source, y.acc_source),
            (x.acc_target, y.acc_target),
            (x.auc_target, y.auc_target),
            (x.d_inter, y.d_inter),
            (x.d_intra_target, y.d_intra_target),
        ] {
            assert!((u - v).abs() <= tol, "epoch {}: {u} vs {v}", x.epoch);
        }
    }
}

#[test]
fn zero_weights_reduce_adaptation_to_cross_entropy() {
    let mut cfg = quick();
    cfg.etas = LossWeights::ZERO;
    let ds = load_data(&cfg).unwrap();
    let pre = pretrain_run(&cfg, &ds).unwrap();
    let full = adapt_run(&cfg, &pre.model, &ds, Objective::Full).unwrap();
    let ce = adapt_run(&cfg, &pre.model, &ds, Objective::CeOnly).unwrap();
    assert_traces_close(&full.records, &ce.records, 1e-9);
}

#[test]
fn positive_regularizer_weight_lowers_prediction_entropy() {
    let cfg = ExperimentConfig::default();
    let ds = load_data(&cfg).unwrap();
    let pre = pretrain_run(&cfg, &ds).unwrap();
    let mut flipped = cfg.clone();
    flipped.etas.eta4 = 1.0;
    let base = adapt_run(&cfg, &pre.model, &ds, Objective::Full).unwrap();
    let other = adapt_run(&flipped, &pre.model, &ds, Objective::Full).unwrap();
    let h_base = mean_prediction_entropy(&base.model, &ds.target.x).unwrap();
    let h_flip = mean_prediction_entropy(&other.model, &ds.target.x).unwrap();
    assert!(h_flip < h_base, "{h_flip} vs {h_base}");
}

#[test]
fn full_fraction_sweep_equals_plain_adaptation() {
    let cfg = quick();
    let ds = load_data(&cfg).unwrap();
    let pre = pretrain_run(&cfg, &ds).unwrap();
    let plain = adapt_run(&cfg, &pre.model, &ds, Objective::Full).unwrap();
    let last = plain.records.last().unwrap();
    let rows = data_efficiency_sweep(&cfg, &ds, &pre.model, &[1.0, 0.3]).unwrap();
    assert_eq!((rows[0].acc_target, rows[0].auc_target), (last.acc_target, last.auc_target));
    assert_eq!((rows[0].n_target_used, rows[1].n_target_used), (1800, 540));
}

#[test]
fn zero_epoch_pretraining_returns_the_initial_model() {
    let mut cfg = quick();
    cfg.pretrain_epochs = 0;
    let ds = load_data(&cfg).unwrap();
    let out = pretrain_run(&cfg, &ds).unwrap();
    assert_eq!(out.model, init_model(&cfg, ds.feature_dim).unwrap());
    assert_eq!(out.records.len(), 1);
    assert_eq!((out.records[0].phase, out.records[0].epoch, out.records[0].batches), (Phase::Pretrain, 0, 0));
}

/// One full-batch epoch reports the loss of the model before its single
/// step, which is the plain cross-entropy of the initial predictions.
#[test]
fn first_epoch_loss_is_the_initial_cross_entropy() {
    let mut cfg = quick();
    cfg.pretrain_epochs = 1;
    cfg.pretrain_batch = cfg.benchmark.n_source;
    let ds = load_data(&cfg).unwrap();
    let init = init_model(&cfg, ds.feature_dim).unwrap();
    let probs = init.predict(&ds.source.x).unwrap();
    let direct = -ds
        .source
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs.row(i)[y].ln())
        .sum::<f64>()
        / ds.source.len() as f64;
    let out = pretrain(&cfg, init, &ds.source, &ds.target.x, None).unwrap();
    let recorded = out.records[1].losses.l_ce;
    assert!((recorded - direct).abs() <= 1e-12, "{recorded} vs {direct}");
    assert_eq!(out.records[1].batches, 1);
}

#[test]
fn default_pretraining_loss_is_recorded() {
    let cfg = ExperimentConfig::default();
    let ds = load_data(&cfg).unwrap();
    let out = pretrain_run(&cfg, &ds).unwrap();
    let l = out.records.last().unwrap().losses.l_ce;
    assert!((l - PRETRAIN_FINAL_CE).abs() <= 1e-9, "{l}");
}

// mean batch cross-entropy of the last default pretraining epoch
const PRETRAIN_FINAL_CE: f64 = 0.14515916291413647;

#[test]
fn separable_toy_problem_is_learned() {
    let point = |i: usize, domain: Domain, prefix: &str| {
        let fake = i % 2 == 1;
        let t = (i as f64 * 0.37).sin();
        let x0 = if fake { 1.0 + 0.5 * t.abs() } else { -1.0 - 0.5 * t.abs() };
        SampleRecord {
            id: format!("{prefix}{i}"),
            domain,
            label: Some(if fake { Label::Fake } else { Label::Real }),
            method_id: fake.then(|| if domain == Domain::Source { "a".into() } else { "b".into() }),
            features: vec![x0, t, 0.3 * t * t],
        }
    };
    let mut recs: Vec<SampleRecord> = (0..40).map(|i| point(i, Domain::Source, "s")).collect();
    recs.extend((0..120).map(|i| point(i, Domain::Target, "t")));
    let ds = Dataset::from_records(&recs).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&["pretrain_epochs=30", "input_dim=3"]).unwrap();
    let init = init_model(&cfg, 3).unwrap();
    let out = pretrain(&cfg, init, &ds.source, &ds.target.x, Some(EvalSets::of(&ds))).unwrap();
    let last = out.records.last().unwrap();
    assert!(last.acc_source > 0.95 && last.acc_target > 0.95, "{last:?}");
}

#[test]
fn dumped_embeddings_reencode_from_a_reloaded_checkpoint() {
    let cfg = quick();
    let ds = load_data(&cfg).unwrap();
    let pre = pretrain_run(&cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    pre.model.save(&ckpt).unwrap();
    let emb = dir.path().join("emb.csv");
    let n = dump_embeddings(&pre.model, &ds, &emb).unwrap();
    assert_eq!(n, ds.source.len() + ds.target.len());

    let model = Model::load(&ckpt).unwrap();
    let source = model.encode(&ds.source.x).unwrap();
    let target = model.encode(&ds.target.x).unwrap();
    let mut reader = csv::Reader::from_path(&emb).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(header.len(), 3 + cfg.feature_dim);
    assert_eq!(&header[3], "f0");
    let mut rows = 0;
    for (k, row) in reader.records().enumerate() {
        let row = row.unwrap();
        let (feats, i) = if k < ds.source.len() { (&source, k) } else { (&target, k - ds.source.len()) };
        let expected_domain = if k < ds.source.len() { "source" } else { "target" };
        assert_eq!(&row[1], expected_domain);
        for (j, v) in row.iter().skip(3).enumerate() {
            let v: f64 = v.parse().unwrap();
            assert!((v - feats.row(i)[j]).abs() <= 1e-9);
        }
        rows += 1;
    }
    assert_eq!(rows, n);
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let cfg = quick();
    let ds = load_data(&cfg).unwrap();
    let a = pretrain_run(&cfg, &ds).unwrap();
    let b = pretrain_run(&cfg, &ds).unwrap();
    assert_eq!(a.records, b.records);
    let ad = adapt_run(&cfg, &a.model, &ds, Objective::Full).unwrap();
    let bd = adapt_run(&cfg, &b.model, &ds, Objective::Full).unwrap();
    assert_eq!(ad.records, bd.records);
    let mut other = cfg.clone();
    other.seed += 1;
    let c = pretrain_run(&other, &ds).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn epoch_zero_records_describe_the_starting_model() {
    let cfg = quick();
    let ds = load_data(&cfg).unwrap();
    let pre = pretrain_run(&cfg, &ds).unwrap();
    let ad = adapt_run(&cfg, &pre.model, &ds, Objective::Full).unwrap();
    let end = pre.records.last().unwrap();
    let start = &ad.records[0];
    assert_eq!((start.phase, start.epoch, start.batches), (Phase::Adapt, 0, 0));
    assert_eq!(start.losses.total, 0.0);
    assert_eq!((start.acc_target, start.d_inter), (end.acc_target, end.d_inter));
    assert_eq!(ad.records.len(), cfg.adapt_epochs + 1);
    assert!(ad.records[1..].iter().all(|r| r.batches > 0 && r.tracker_d_inter.is_some()));
    assert!(ad.records.iter().all(|r| r.wall_time.is_none()));
}
