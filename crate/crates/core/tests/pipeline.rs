use regibox::boxnet::{train_stage1, Activation, BoxNetModel, Stage1Config, TextAnchors};
use regibox::eval::{accuracy, apply_protocol, run_protocol, ExperimentConfig, Method, Protocol};
use regibox::probe::{predict, train_probe, zero_shot_predict, ProbeConfig};
use regibox::sampler::{augment_dataset, AugmentationConfig};
use regibox::store::DatasetBundle;
use regibox::synth::{generate, generate_bundle, BundleSpec, SyntheticSpec};

fn bundle(dim: usize, classes: usize, per_class: usize, sigma: f64, seed: u64) -> DatasetBundle {
    generate_bundle(&BundleSpec {
        base: SyntheticSpec::new(dim, classes, per_class, sigma, seed),
        eval_per_class: 20,
        shift_magnitude: Some(0.5),
    })
    .unwrap()
}

/// Wider-region setting: α = 0.8 and a faster Stage 1 step.
fn wide_stage1(seed: u64) -> Stage1Config {
    Stage1Config {
        alpha: 0.8,
        learning_rate: 1e-2,
        seed,
        ..Stage1Config::default()
    }
}

#[test]
fn zero_shot_is_exact_without_noise() {
    let b = bundle(8, 5, 10, 0.0, 3);
    for set in [&b.train, &b.test_in_domain] {
        let preds = zero_shot_predict(&b.class_text, set).unwrap();
        assert_eq!(accuracy(&preds, &set.labels).unwrap(), 1.0);
    }
    let report = run_protocol(&b, Protocol::Standard, Method::ZeroShot, &[0, 1], &ExperimentConfig::default()).unwrap();
    assert_eq!(report.in_domain.mean, 1.0);
}

#[test]
fn probe_separates_tight_orthogonal_clusters() {
    let (train, _) = generate(&SyntheticSpec::new(16, 4, 50, 0.05, 8)).unwrap();
    let fit = train_probe(&train, &train, 4, &ProbeConfig::default()).unwrap();
    assert_eq!(accuracy(&predict(&fit.model, &train).unwrap(), &train.labels).unwrap(), 1.0);
}

#[test]
fn probe_loss_trends_down() {
    for seed in 0..5 {
        let b = bundle(16, 4, 50, 0.2, seed);
        let cfg = ProbeConfig {
            seed,
            batch_size: 64,
            ..ProbeConfig::default()
        };
        let fit = train_probe(&b.train, &b.val, 4, &cfg).unwrap();
        let l = &fit.train_loss;
        let head: f64 = l[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn stage1_is_deterministic_and_reduces_class_terms() {
    let b = bundle(8, 3, 40, 0.1, 5);
    let anchors = TextAnchors::from(&b.class_text);
    let cfg = Stage1Config {
        epochs: 20,
        batch_size: 32,
        ..Stage1Config::default()
    };
    let one = train_stage1(&b.train, &b.val, &anchors, &cfg).unwrap();
    let two = train_stage1(&b.train, &b.val, &anchors, &cfg).unwrap();
    assert_eq!(one.trace, two.trace);
    assert_eq!(one.model.params, two.model.params);
    assert_eq!(one.trace.epochs.len(), 20);
    let last = one.trace.epochs.last().unwrap();
    assert!(last.class_consistency < one.trace.initial.class_consistency);
    assert!(last.total < one.trace.initial.total);
}

#[test]
fn augmentation_counts_and_identity() {
    let b = bundle(6, 3, 10, 0.1, 2);
    let model = BoxNetModel::init(vec![6, 6, 12], Activation::Softplus, 1).unwrap();
    let k0 = augment_dataset(&b.train, &model, &AugmentationConfig { samples_per_image: 0, ..Default::default() }).unwrap();
    assert_eq!(k0.set, b.train);

    let cfg = AugmentationConfig {
        samples_per_image: 3,
        seed: 4,
        ..Default::default()
    };
    let k3 = augment_dataset(&b.train, &model, &cfg).unwrap();
    let n = b.train.count();
    assert_eq!(k3.set.count(), 4 * n);
    assert_eq!(&k3.set.data[..b.train.data.len()], &b.train.data[..]);
    for (row, &src) in k3.source_indices.iter().enumerate() {
        assert_eq!(k3.set.labels[row], b.train.labels[src]);
    }
    for c in 0..3 {
        let before = b.train.labels.iter().filter(|&&y| y == c).count();
        let after = k3.set.labels.iter().filter(|&&y| y == c).count();
        assert_eq!(after, 4 * before);
    }
    // grouped by source index after the originals
    assert!(k3.source_indices[n..].windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(augment_dataset(&b.train, &model, &cfg).unwrap(), k3);
    let manifest = k3.manifest(&cfg);
    assert_eq!((manifest.source_count, manifest.output_count), (n, 4 * n));
}

#[test]
fn degenerate_boxes_duplicate_their_source() {
    // weights [I; I], zero bias: both corners equal the input
    let d = 5;
    let mut params = Vec::new();
    for r in 0..2 * d {
        params.extend((0..d).map(|c| if r % d == c { 1.0 } else { 0.0 }));
    }
    params.extend(vec![0.0; 2 * d]);
    let model = BoxNetModel::from_params(vec![d, 2 * d], Activation::Identity, params).unwrap();
    let b = bundle(d, 2, 6, 0.3, 9);
    let aug = augment_dataset(&b.train, &model, &AugmentationConfig { samples_per_image: 2, ..Default::default() }).unwrap();
    let n = b.train.count();
    for row in n..aug.set.count() {
        let src = aug.source_indices[row];
        for (x, y) in aug.set.row(row).iter().zip(b.train.row(src)) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn box_samples_keep_their_class() {
    for seed in 0..5 {
        let b = bundle(16, 4, 200, 0.1, 20 + seed);
        let anchors = TextAnchors::from(&b.class_text);
        let out = train_stage1(&b.train, &b.val, &anchors, &wide_stage1(seed)).unwrap();
        let cfg = AugmentationConfig { seed, ..Default::default() };
        let aug = augment_dataset(&b.train, &out.model, &cfg).unwrap();
        let n = b.train.count();
        let samples = aug.set.subset(&(n..aug.set.count()).collect::<Vec<_>>());
        let preds = zero_shot_predict(&b.class_text, &samples).unwrap();
        let agree = accuracy(&preds, &samples.labels).unwrap();
        assert!(agree >= 0.9, "seed {seed}: {agree}");
    }
}

#[test]
fn protocol_identities() {
    let b = bundle(6, 3, 12, 0.1, 1);
    let all = apply_protocol(&b.train, 3, Protocol::FewShot(12), 5).unwrap();
    assert_eq!(all, b.train);
    let none = apply_protocol(&b.train, 3, Protocol::Imbalanced { percent: 0.0, n: 2 }, 5).unwrap();
    assert_eq!(none, b.train);
    let few = apply_protocol(&b.train, 3, Protocol::FewShot(4), 5).unwrap();
    assert_eq!(few.count(), 12);
    let imb = apply_protocol(&b.train, 3, Protocol::Imbalanced { percent: 34.0, n: 2 }, 5).unwrap();
    assert_eq!(imb.count(), 12 + 12 + 2);
    assert!(apply_protocol(&b.train, 3, Protocol::FewShot(13), 5).is_err());
}

#[test]
fn reports_recompute_from_their_runs() {
    let b = bundle(6, 3, 12, 0.3, 1);
    let cfg = ExperimentConfig {
        stage1: Stage1Config { epochs: 3, ..Stage1Config::default() },
        probe: ProbeConfig { epochs: 5, ..ProbeConfig::default() },
        augmentation: AugmentationConfig { samples_per_image: 2, ..Default::default() },
    };
    let r = run_protocol(&b, Protocol::FewShot(5), Method::Lare, &[3, 1, 4], &cfg).unwrap();
    let acc: Vec<f64> = r.per_seed.iter().map(|s| s.in_domain.accuracy).collect();
    let mean = acc.iter().sum::<f64>() / 3.0;
    let std = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((r.in_domain.mean - mean).abs() < 1e-9);
    assert!((r.in_domain.std - std).abs() < 1e-9);
    for s in &r.per_seed {
        let out = s.out_domain.unwrap();
        let pooled = (s.in_domain.correct + out.correct) as f64 / (s.in_domain.total + out.total) as f64;
        assert!((s.extended - pooled).abs() < 1e-12);
    }
    assert_eq!(r, run_protocol(&b, Protocol::FewShot(5), Method::Lare, &[3, 1, 4], &cfg).unwrap());
}
