mod common;

use histnet::audio::{segment, AudioSignal};
use histnet::autodiff::Checkpoint;
use histnet::features::{FeatureConfig, FeatureExtractor, FeatureKind, NormStats, normalize};
use histnet::metrics::ConfusionMatrix;
use histnet::models::{ModelConfig, ModelKind, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT};
use histnet::synth::{synthesize, SynthSpec};
use histnet::train::{
    evaluate, load_model, mean_std, metrics_report, read_curves, run_experiment, train, EarlyStopping,
    ExperimentSummary, FailedRun, FeatureSet, HyperParams, Partitions, RunRecord,
};
use histnet::MetricsReport;
use proptest::prelude::*;
use rand::Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        block_channels: [4, 4, 8, 8],
        embed_dim: 8,
        bins: 4,
        ..ModelConfig::default()
    }
}

/// Random 16×16 maps whose class shifts the mean, so there is something to learn.
fn toy_set(seed: u64, n: usize) -> FeatureSet {
    let mut r = common::rng(seed);
    let mut set = FeatureSet::new((16, 16));
    for i in 0..n {
        let label = i % 4;
        set.data.extend((0..256).map(|_| r.random_range(-1.0f32..1.0) + label as f32 * 0.5));
        set.labels.push(label);
        set.ids.push(format!("s{}", i));
    }
    set
}

fn toy_partitions() -> Partitions {
    Partitions {
        train: toy_set(1, 40),
        val: toy_set(2, 12),
        test: toy_set(3, 12),
    }
}

fn quick_hp() -> HyperParams {
    HyperParams {
        lr: 0.01,
        batch: 16,
        epochs: 3,
        patience: 2,
        seeds: vec![0, 1],
        early_stopping: true,
    }
}

#[test]
fn patience_example() {
    let mut stop = EarlyStopping::new(10);
    let losses = [1.0, 0.9, 0.91, 0.91, 0.91, 0.91, 0.91, 0.91, 0.91, 0.91, 0.91, 0.91];
    let mut stopped_at = None;
    for (i, l) in losses.iter().enumerate() {
        stop.observe(i + 1, *l);
        if stop.should_stop() {
            stopped_at = Some(i + 1);
            break;
        }
    }
    assert_eq!(stopped_at, Some(12));
    assert_eq!(stop.best_epoch(), 2);
    // A drop of exactly the tolerance is not an improvement.
    let mut s = EarlyStopping::new(3);
    s.observe(1, 1.0);
    assert!(!s.observe(2, 1.0 - 1e-6));
    assert!(s.observe(3, 1.0 - 2e-6));
}

proptest! {
    #[test]
    fn early_stopping_never_picks_a_later_epoch(losses in prop::collection::vec(0.0f64..2.0, 1..60), patience in 1usize..8) {
        let mut stop = EarlyStopping::new(patience);
        let mut seen = Vec::new();
        for (i, l) in losses.iter().enumerate() {
            stop.observe(i + 1, *l);
            seen.push(*l);
            if stop.should_stop() {
                break;
            }
        }
        let best = stop.best_epoch();
        prop_assert!(best >= 1 && best <= seen.len());
        let min = seen.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(seen[best - 1] <= min + 1e-6 * seen.len() as f64);
        prop_assert!(seen[..best - 1].iter().all(|l| *l > seen[best - 1]));
        if stop.should_stop() {
            prop_assert_eq!(seen.len() - best, patience);
        }
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let d = toy_partitions();
    let a = train(ModelKind::Hltdnn, &tiny_model(), &quick_hp(), 5, &d.train, &d.val).unwrap();
    let b = train(ModelKind::Hltdnn, &tiny_model(), &quick_hp(), 5, &d.train, &d.val).unwrap();
    let bits = |c: &[histnet::train::CurvePoint]| c.iter().map(|p| (p.train_loss.to_bits(), p.val_loss.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.curves), bits(&b.curves));
    assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
    let c = train(ModelKind::Hltdnn, &tiny_model(), &quick_hp(), 6, &d.train, &d.val).unwrap();
    assert_ne!(bits(&a.curves), bits(&c.curves));
}

#[test]
fn best_snapshot_is_restored() {
    let d = toy_partitions();
    let hp = HyperParams { epochs: 12, patience: 3, lr: 0.05, ..quick_hp() };
    let out = train(ModelKind::Tdnn, &tiny_model(), &hp, 0, &d.train, &d.val).unwrap();
    let best = out
        .curves
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .unwrap();
    assert_eq!(out.best_epoch, best.epoch);
    let val = evaluate(&out.model, &d.val, 16).unwrap().loss;
    assert!((val - best.val_loss).abs() < 1e-12, "{} vs {}", val, best.val_loss);
}

#[test]
fn test_set_cannot_influence_training() {
    let d = toy_partitions();
    let mut shuffled = d.clone();
    let mut r = common::rng(99);
    for l in shuffled.test.labels.iter_mut() {
        *l = r.random_range(0..4);
    }
    for v in shuffled.test.data.iter_mut() {
        *v = r.random_range(-5.0..5.0);
    }
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let hp = HyperParams { seeds: vec![3], ..quick_hp() };
    let names: Vec<String> = (0..4).map(|c| format!("c{}", c)).collect();
    run_experiment(ModelKind::Hltdnn, FeatureKind::Stft, &tiny_model(), &hp, &d, &names, a.path()).unwrap();
    run_experiment(ModelKind::Hltdnn, FeatureKind::Stft, &tiny_model(), &hp, &shuffled, &names, b.path()).unwrap();
    for f in ["checkpoint.bin", "curves.csv"] {
        assert_eq!(
            std::fs::read(a.path().join("run_3").join(f)).unwrap(),
            std::fs::read(b.path().join("run_3").join(f)).unwrap()
        );
    }
}

#[test]
fn experiment_layout_and_reload() {
    let d = toy_partitions();
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = ["cargo", "passengership", "tanker", "tug"].iter().map(|s| s.to_string()).collect();
    let summary = run_experiment(ModelKind::Tdnn, FeatureKind::Mfcc, &tiny_model(), &quick_hp(), &d, &names, dir.path()).unwrap();
    assert_eq!(summary.runs.len(), 2);
    for seed in [0, 1] {
        let run = dir.path().join(format!("run_{}", seed));
        let curves_text = std::fs::read_to_string(run.join("curves.csv")).unwrap();
        assert!(curves_text.starts_with("epoch,train_loss,val_loss\n1,"));
        let curves = read_curves(&run.join("curves.csv")).unwrap();
        assert_eq!(curves.len(), summary.runs[seed].epochs_run);
        let metrics: MetricsReport = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(metrics.to_json().unwrap(), summary.runs[seed].test.to_json().unwrap());
        let ckpt = Checkpoint::load(&run.join("checkpoint.bin")).unwrap();
        let model = load_model(ModelKind::Tdnn, &tiny_model(), (16, 16), &ckpt).unwrap();
        let again = metrics_report(&evaluate(&model, &d.test, 5).unwrap(), &d.test.labels, 4).unwrap();
        assert_eq!(again.confusion, metrics.confusion);
        assert!(load_model(ModelKind::Hltdnn, &tiny_model(), (16, 16), &ckpt).is_err());
    }
    let back = ExperimentSummary::read_json(&dir.path().join("summary.json")).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&summary).unwrap());
}

#[test]
fn evaluation_ignores_batch_order_and_size() {
    let d = toy_partitions();
    let out = train(ModelKind::Hltdnn, &tiny_model(), &quick_hp(), 1, &d.train, &d.val).unwrap();
    let base = metrics_report(&evaluate(&out.model, &d.train, 16).unwrap(), &d.train.labels, 4).unwrap();
    let mut order: Vec<usize> = (0..d.train.len()).collect();
    order.reverse();
    let permuted = d.train.subset(&order);
    for batch in [1, 7, 64] {
        let r = metrics_report(&evaluate(&out.model, &permuted, batch).unwrap(), &permuted.labels, 4).unwrap();
        assert_eq!(r.confusion, base.confusion);
        assert_eq!(r.accuracy, base.accuracy);
        assert!((r.overall_fdr - base.overall_fdr).abs() < 1e-9);
    }
}

#[test]
fn constant_predictor_scores_class_prevalence() {
    let d = toy_partitions();
    let mut model = train(ModelKind::Tdnn, &tiny_model(), &HyperParams { epochs: 1, patience: 1, ..quick_hp() }, 0, &d.train, &d.val)
        .unwrap()
        .model;
    model.params.get_mut(CLASSIFIER_WEIGHT).unwrap().data_mut().fill(0.0);
    model.params.get_mut(CLASSIFIER_BIAS).unwrap().data_mut().copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
    let e = evaluate(&model, &d.test, 16).unwrap();
    assert!(e.predictions.iter().all(|p| *p == 2));
    let r = metrics_report(&e, &d.test.labels, 4).unwrap();
    let prevalence = d.test.labels.iter().filter(|l| **l == 2).count() as f64 / d.test.len() as f64;
    assert_eq!(r.accuracy, prevalence);
}

#[test]
fn aggregation_examples() {
    let s = mean_std(&[50.0, 52.0, 54.0]);
    assert_eq!(s.mean, 52.0);
    assert!((s.std - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[0.7, 0.7, 0.7]).std, 0.0);
    assert_eq!(mean_std(&[0.3]).std, 0.0);

    let report = |acc_hits: u64| {
        let cm = ConfusionMatrix::from_counts(vec![vec![acc_hits, 10 - acc_hits], vec![0, 10]]).unwrap();
        MetricsReport::new(cm, None)
    };
    let runs: Vec<RunRecord> = (0..3)
        .map(|i| RunRecord { seed: i, best_epoch: 3, epochs_run: 13, test: report(4 + 2 * i) })
        .collect();
    let failed = vec![FailedRun { seed: 9, error: "non-finite training loss".into() }];
    let summary = ExperimentSummary::from_runs(ModelKind::Hltdnn, FeatureKind::Gfcc, vec!["a".into(), "b".into()], runs, failed);
    assert!((summary.accuracy.mean - 0.8).abs() < 1e-12);
    assert_eq!(summary.confusion, vec![vec![18, 12], vec![0, 30]]);
    assert!(summary.log_fdr.mean.is_nan());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("summary.json");
    summary.write_json(&p).unwrap();
    let back = ExperimentSummary::read_json(&p).unwrap();
    assert_eq!(back.failed, summary.failed);
    assert_eq!(back.runs.len(), 3);
    assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&summary).unwrap());
}

#[test]
fn invalid_inputs_are_rejected() {
    let d = toy_partitions();
    let empty = FeatureSet::new((16, 16));
    assert!(train(ModelKind::Tdnn, &tiny_model(), &quick_hp(), 0, &empty, &d.val).is_err());
    assert!(train(ModelKind::Tdnn, &tiny_model(), &HyperParams { patience: 9, ..quick_hp() }, 0, &d.train, &d.val).is_err());
    assert!(train(ModelKind::Tdnn, &tiny_model(), &HyperParams { lr: 0.0, ..quick_hp() }, 0, &d.train, &d.val).is_err());
    let two = ModelConfig { num_classes: 2, ..tiny_model() };
    assert!(train(ModelKind::Tdnn, &two, &quick_hp(), 0, &d.train, &d.val).is_err());
}

/// 64 synthetic STFT segments, 16 per class, normalized with their own statistics.
fn overfit_set() -> FeatureSet {
    let spec = SynthSpec { n_signals_per_class: 4, signal_duration_s: 12.0, ..SynthSpec::default() };
    let ex = FeatureExtractor::new(FeatureKind::Stft, &FeatureConfig::default()).unwrap();
    let mut feats = Vec::new();
    for class in 0..4 {
        for i in 0..4 {
            let s = AudioSignal::new(format!("c{}_{}", class, i), synthesize(&spec, class, i), 16_000, class).unwrap();
            for g in segment(&s, 3.0).unwrap() {
                feats.push((ex.extract(&g.samples).unwrap(), class, g.id()));
            }
        }
    }
    let stats = NormStats::compute(FeatureKind::Stft, feats.iter().map(|f| &f.0)).unwrap();
    let mut set = FeatureSet::new((48, 48));
    for (f, label, id) in &feats {
        set.push(&normalize(f, &stats).unwrap(), *label, id.clone()).unwrap();
    }
    set
}

#[test]
fn tiny_overfit() {
    let set = overfit_set();
    assert_eq!(set.len(), 64);
    let hp = HyperParams { lr: 0.01, batch: 16, epochs: 200, patience: 10, seeds: vec![0], early_stopping: false };
    let cfg = ModelConfig { block_channels: [8, 8, 16, 16], embed_dim: 32, ..ModelConfig::default() };
    let mut accs = Vec::new();
    for kind in [ModelKind::Hltdnn, ModelKind::Tdnn] {
        let out = train(kind, &cfg, &hp, 0, &set, &set).unwrap();
        let e = evaluate(&out.model, &set, 64).unwrap();
        accs.push(metrics_report(&e, &set.labels, 4).unwrap().accuracy);
        if accs.last() >= Some(&0.95) {
            return;
        }
    }
    panic!("training accuracy {:?}", accs);
}
