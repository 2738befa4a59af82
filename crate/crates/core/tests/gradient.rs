//! Analytic gradients of the combined box objective against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regibox::boxnet::{
    backward, check_gradient, Activation, Batch, BoxNetModel, LossConfig, TextAnchors,
};

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

struct Instance {
    model: BoxNetModel,
    batch: Batch,
    anchors: TextAnchors,
    cfg: LossConfig,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=8);
    let n_classes = rng.random_range(2..=4);
    let n_items = rng.random_range(1..=16);
    let hidden = rng.random_range(2..=8);
    let activation = [Activation::Softplus, Activation::Tanh, Activation::Identity][seed as usize % 3];
    let model = BoxNetModel::init(vec![d, hidden, 2 * d], activation, seed ^ 0xABCD).unwrap();
    let anchors = TextAnchors::new((0..n_classes).map(|_| unit(&mut rng, d)).collect()).unwrap();
    let batch = Batch {
        inputs: (0..n_items).map(|_| unit(&mut rng, d)).collect(),
        labels: (0..n_items).map(|_| rng.random_range(0..n_classes as u32)).collect(),
    };
    let cfg = LossConfig {
        alpha: rng.random_range(0.0..=1.0),
        temperature: [1.0, 0.5, 2.0][seed as usize % 3],
        raw_midpoint: seed % 4 == 3,
    };
    Instance {
        model,
        batch,
        anchors,
        cfg,
    }
}

#[test]
fn fixed_instance_d8_three_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let model = BoxNetModel::init(vec![8, 8, 16], Activation::Softplus, 3).unwrap();
    let anchors = TextAnchors::new((0..3).map(|_| unit(&mut rng, 8)).collect()).unwrap();
    let batch = Batch {
        inputs: (0..16).map(|_| unit(&mut rng, 8)).collect(),
        labels: (0..16).map(|i| i % 3).collect(),
    };
    let c = check_gradient(&model, &batch, &anchors, &LossConfig::default(), H).unwrap();
    assert!(c.max_rel_error <= REL_TOL, "{c:?}");
}

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..24 {
        let inst = instance(seed);
        let c = check_gradient(&inst.model, &inst.batch, &inst.anchors, &inst.cfg, H).unwrap();
        assert!(c.compared > 0);
        assert!(
            c.skipped * 20 <= inst.model.n_params(),
            "seed {seed}: too many kink crossings ({}/{})",
            c.skipped,
            inst.model.n_params()
        );
        assert!(
            c.max_rel_error <= REL_TOL,
            "seed {seed}: max relative error {} at parameter {:?}",
            c.max_rel_error,
            c.worst_param
        );
    }
}

#[test]
fn alpha_zero_ignores_class_terms() {
    // With α = 0 the gradient is that of the box volume term alone, so it must not
    // depend on the labels or the anchors.
    let mut inst = instance(5);
    inst.cfg.alpha = 0.0;
    let g1 = backward(&inst.batch, &inst.model, &inst.anchors, &inst.cfg).unwrap();
    let mut relabeled = inst.batch.clone();
    relabeled.labels.iter_mut().for_each(|y| *y = 0);
    let other = TextAnchors::new(vec![vec![1.0; inst.model.dim()]; 2]).unwrap();
    let g2 = backward(&relabeled, &inst.model, &other, &inst.cfg).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn gradient_is_deterministic() {
    let inst = instance(11);
    let mut model = inst.model.clone();
    let (w, b) = model.layer_range(model.n_layers() - 1);
    // zero last layer except a bias offset so the raw corners are nonzero
    for (k, p) in model.params[w.start..b.end].iter_mut().enumerate() {
        *p = if k >= w.len() { 0.1 + k as f64 * 0.01 } else { 0.0 };
    }
    let g1 = backward(&inst.batch, &model, &inst.anchors, &inst.cfg).unwrap();
    let g2 = backward(&inst.batch, &model, &inst.anchors, &inst.cfg).unwrap();
    assert_eq!(g1, g2);
}
