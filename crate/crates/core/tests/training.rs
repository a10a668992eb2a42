//! Training-loop contracts on small simulated corpora.

use std::collections::BTreeSet;

use annomap_core::corpus::{preprocess, split_groups, Annotation, Dataset, PreprocessOptions};
use annomap_core::mapper::HeadOutputs;
use annomap_core::net::{
    aggregate_items, aggregate_score, batch_loss_individual, finetune_aggregate, individual_items, individual_score,
    train_aggregate, train_aggregate_epochs, train_individual, Adam, FinetuneMode, HeadSelector, IndividualItem,
    ModelConfig, ModelParams, TrainConfig,
};
use annomap_core::sim::{gen_benchmark, ProfileDistribution, SimConfig};

fn sim(profile: ProfileDistribution, feature_noise_sd: f64) -> SimConfig {
    SimConfig {
        n_samples: 900,
        n_target_samples: 600,
        n_source_annotators: 10,
        n_target_annotators: 8,
        feature_dim: 16,
        feature_noise_sd,
        n_sessions: 10,
        profile,
        ..SimConfig::default()
    }
}

fn identity_profile() -> ProfileDistribution {
    ProfileDistribution {
        scale_mean: 1.0,
        scale_sd: 0.0,
        bias_mean: 0.0,
        bias_sd: 0.0,
        noise_sd: 0.0,
    }
}

struct Split3 {
    data: Dataset,
    train: BTreeSet<String>,
    val: BTreeSet<String>,
}

fn prepared(raw: &Dataset) -> Split3 {
    let data = preprocess(raw, &PreprocessOptions::default()).unwrap();
    let ids = data.train_sample_ids();
    let (train, val) = split_groups(&data, &ids, 0.2, 3).unwrap();
    Split3 { data, train, val }
}

fn model(data: &Dataset, seed: u64, dropout_rate: f64) -> ModelParams {
    ModelParams::init(
        ModelConfig {
            feature_dim: data.feature_dim,
            hidden_width: 16,
            dropout_rate,
            annotator_ids: data.annotator_ids(),
        },
        seed,
    )
    .unwrap()
}

#[test]
fn linear_labels_are_learned_within_50_epochs() {
    let bench = gen_benchmark(&sim(identity_profile(), 0.0)).unwrap();
    let s = prepared(&bench.source);
    let cfg = TrainConfig {
        max_epochs: 50,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let out = train_aggregate(
        &model(&s.data, 0, 0.0),
        &aggregate_items(&s.data, Some(&s.train)),
        &aggregate_items(&s.data, Some(&s.val)),
        &cfg,
    )
    .unwrap();
    assert!(out.history.epochs.len() <= 51);
    assert!(out.history.best_validation.unwrap() >= 0.9, "{:?}", out.history.best_validation);
}

#[test]
fn training_is_deterministic_and_patience_zero_stops_at_first_miss() {
    let bench = gen_benchmark(&sim(ProfileDistribution::default(), 0.5)).unwrap();
    let s = prepared(&bench.source);
    let train = aggregate_items(&s.data, Some(&s.train));
    let val = aggregate_items(&s.data, Some(&s.val));
    let cfg = TrainConfig {
        patience: 0,
        learning_rate: 0.05,
        rng_seed: 9,
        ..TrainConfig::default()
    };
    let init = model(&s.data, 1, 0.2);
    let a = train_aggregate(&init, &train, &val, &cfg).unwrap();
    let b = train_aggregate(&init, &train, &val, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);

    let h = &a.history;
    assert!(h.stopped_early);
    let scores: Vec<f64> = h.epochs.iter().map(|e| e.validation.unwrap()).collect();
    let last = scores.len() - 1;
    assert!(scores[..last].windows(2).all(|w| w[1] > w[0]));
    assert!(scores[last] <= scores[last - 1]);
    assert_eq!(h.best_epoch, last - 1);
    assert_eq!(aggregate_score(&a.params, &val).unwrap(), h.best_validation.unwrap());
}

#[test]
fn head_copy_scales_to_large_head_count() {
    let ids: Vec<String> = (0..1998).map(|i| format!("a{i:04}")).collect();
    let m = ModelParams::init(
        ModelConfig {
            feature_dim: 4,
            hidden_width: 4,
            dropout_rate: 0.2,
            annotator_ids: ids,
        },
        5,
    )
    .unwrap();
    let c = m.init_heads_from_aggregate();
    for d in 0..2 {
        assert_eq!(c.heads[d].len(), 1998);
        assert!(c.heads[d].iter().all(|h| *h == c.aggregate[d]));
    }
    let x = [0.3, -0.2, 0.9, 0.1];
    let all = c.forward(&x, &HeadSelector::AllHeads, None).unwrap();
    let agg = c.forward(&x, &HeadSelector::Aggregate, None).unwrap();
    assert!(all.activation.iter().all(|&v| v == agg.activation[0]));
    assert!(all.valence.iter().all(|&v| v == agg.valence[0]));
}

#[test]
fn one_update_separates_copied_heads() {
    let m = ModelParams::init(
        ModelConfig {
            feature_dim: 3,
            hidden_width: 6,
            dropout_rate: 0.0,
            annotator_ids: vec!["a".into(), "b".into()],
        },
        2,
    )
    .unwrap()
    .init_heads_from_aggregate();
    let xs = [[0.1, 0.5, -0.3], [0.9, -0.4, 0.2], [-0.6, 0.3, 0.8]];
    let mut batch = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        let v = i as f64 * 0.4 - 0.4;
        batch.push(IndividualItem { features: x, head: 0, target: [v, -v] });
        batch.push(IndividualItem { features: x, head: 1, target: [-v, v * v] });
    }
    let out = batch_loss_individual(&m, &batch, None).unwrap();
    let mut p = m.clone();
    Adam::new(&m, 1e-3).step(&mut p, &out.grads);
    for d in 0..2 {
        assert_ne!(p.heads[d][0], p.heads[d][1]);
    }
}

/// Per-annotator validation CCC of a model whose annotator heads all equal
/// its aggregate head.
fn aggregate_as_individual(p: &ModelParams, items: &[IndividualItem<'_>]) -> f64 {
    individual_score(&p.init_heads_from_aggregate(), items).unwrap()
}

#[test]
fn annotator_heads_beat_aggregate_under_strong_biases() {
    let profile = ProfileDistribution {
        scale_mean: 1.0,
        scale_sd: 0.4,
        bias_mean: 0.0,
        bias_sd: 0.5,
        noise_sd: 0.05,
    };
    let bench = gen_benchmark(&sim(profile, 0.3)).unwrap();
    let s = prepared(&bench.source);
    let cfg = TrainConfig {
        max_epochs: 40,
        ..TrainConfig::default()
    };
    let init = model(&s.data, 4, 0.0);
    let agg = train_aggregate(
        &init,
        &aggregate_items(&s.data, Some(&s.train)),
        &aggregate_items(&s.data, Some(&s.val)),
        &cfg,
    )
    .unwrap();
    let warm = train_aggregate_epochs(&init, &aggregate_items(&s.data, Some(&s.train)), &cfg, 5)
        .unwrap()
        .params
        .init_heads_from_aggregate();
    let val = individual_items(&s.data, &warm, Some(&s.val));
    let ind = train_individual(&warm, &individual_items(&s.data, &warm, Some(&s.train)), &val, &cfg).unwrap();
    let ia = individual_score(&ind.params, &val).unwrap();
    let ag = aggregate_as_individual(&agg.params, &val);
    assert!(ia > ag + 0.02, "annotator heads {ia:.3} vs aggregate {ag:.3}");
}

#[test]
fn annotator_without_two_training_items_keeps_its_head() {
    let bench = gen_benchmark(&sim(ProfileDistribution::default(), 0.3)).unwrap();
    let s = prepared(&bench.source);
    let m = model(&s.data, 6, 0.2).init_heads_from_aggregate();
    let lonely = m.head_index("s003").unwrap();
    let mut train = individual_items(&s.data, &m, Some(&s.train));
    let mut seen = false;
    train.retain(|it| {
        if it.head != lonely {
            return true;
        }
        let keep = !seen;
        seen = true;
        keep
    });
    let val = individual_items(&s.data, &m, Some(&s.val));
    let cfg = TrainConfig {
        max_epochs: 3,
        patience: 3,
        ..TrainConfig::default()
    };
    let out = train_individual(&m, &train, &val, &cfg).unwrap();
    assert!(out.history.total_updates() > 0);
    for d in 0..2 {
        assert_eq!(out.params.heads[d][lonely], m.heads[d][lonely]);
        assert_ne!(out.params.heads[d][0], m.heads[d][0]);
    }
}

#[test]
fn one_epoch_finetune_counts_batches() {
    let bench = gen_benchmark(&sim(ProfileDistribution::default(), 0.3)).unwrap();
    let s = prepared(&bench.target);
    let items = aggregate_items(&s.data, None);
    let m = model(&s.data, 7, 0.2);
    let cfg = TrainConfig::default();
    for (n, batches) in [(100, 4), (97, 3), (64, 2), (33, 1)] {
        let out = finetune_aggregate(&m, &items[..n], None, FinetuneMode::OneEpoch, &cfg).unwrap();
        assert_eq!(out.history.epochs.len(), 1);
        assert_eq!(out.history.total_updates(), batches, "n = {n}");
    }
    assert!(finetune_aggregate(&m, &items, None, FinetuneMode::UntilEarlyStop, &cfg).is_err());
}

fn shifted(ds: &Dataset, shift: f64, gain: f64) -> Dataset {
    let ann: Vec<Annotation> = ds
        .annotations()
        .iter()
        .map(|a| Annotation {
            activation: (a.activation * gain + shift).clamp(-1.0, 1.0),
            valence: (a.valence * gain - shift).clamp(-1.0, 1.0),
            ..a.clone()
        })
        .collect();
    Dataset::new(&ds.name, ds.feature_dim, ds.samples().to_vec(), ann).unwrap()
}

#[test]
fn full_finetune_recovers_shifted_target() {
    let bench = gen_benchmark(&sim(ProfileDistribution::default(), 0.3)).unwrap();
    let src = prepared(&bench.source);
    let cfg = TrainConfig {
        max_epochs: 40,
        ..TrainConfig::default()
    };
    let pt = train_aggregate(
        &model(&src.data, 8, 0.2),
        &aggregate_items(&src.data, Some(&src.train)),
        &aggregate_items(&src.data, Some(&src.val)),
        &cfg,
    )
    .unwrap()
    .params;
    // Preprocessing rescales labels to [-1, 1], so shift the scaled target.
    let tgt = prepared(&bench.target);
    let moved = shifted(&tgt.data, 0.4, 0.6);
    let (ft_train, rest) = split_groups(&moved, &moved.train_sample_ids(), 0.4, 1).unwrap();
    let (ft_val, test) = split_groups(&moved, &rest, 0.5, 2).unwrap();
    let test_items = aggregate_items(&moved, Some(&test));
    let full = finetune_aggregate(
        &pt,
        &aggregate_items(&moved, Some(&ft_train)),
        Some(&aggregate_items(&moved, Some(&ft_val))),
        FinetuneMode::UntilEarlyStop,
        &cfg,
    )
    .unwrap();
    let before = aggregate_score(&pt, &test_items).unwrap();
    let after = aggregate_score(&full.params, &test_items).unwrap();
    assert!(after >= before, "FT-Full {after:.3} vs PT {before:.3}");
}

#[test]
fn inference_ignores_batch_composition() {
    let bench = gen_benchmark(&sim(ProfileDistribution::default(), 0.3)).unwrap();
    let s = prepared(&bench.target);
    let m = model(&s.data, 11, 0.2);
    let all = HeadOutputs::for_dataset(&m, &s.data).unwrap();
    let ids: Vec<&str> = s.data.samples().iter().map(|x| x.id.as_str()).collect();
    let some = HeadOutputs::compute(&m, &s.data, ids.iter().rev().step_by(7).copied()).unwrap();
    for id in ids.iter().rev().step_by(7) {
        for d in annomap_core::corpus::Dimension::BOTH {
            for h in 0..m.n_heads() {
                assert_eq!(all.head(id, d, h).unwrap(), some.head(id, d, h).unwrap());
            }
            assert_eq!(all.aggregate(id, d).unwrap(), some.aggregate(id, d).unwrap());
        }
        let f = &s.data.sample(id).unwrap().features;
        let p = m.forward(f, &HeadSelector::AllHeads, None).unwrap();
        assert_eq!(p.activation[0], all.head(id, annomap_core::corpus::Dimension::Activation, 0).unwrap());
    }
}
